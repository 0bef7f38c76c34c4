use serde::{Deserialize, Serialize};

use super::{argmax, train, EncodedInstance, ForwardOpts, Model, TrainConfig, TrainOutcome};
use crate::tape::Tape;
use crate::{Error, Result};

/// Per-instance, per-choice vectors over fine units (masks or labels).
pub type UnitTable = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalLoss {
    /// KL(target ∥ α) with the target uniform over positive units.
    Kl,
    /// Each α_u as an independent prediction of its 0/1 label.
    Bce,
}

#[derive(Debug, Clone, Copy)]
pub struct SaliencyTerm<'a> {
    pub lambda: f64,
    pub kind: SalLoss,
    /// Binary labels aligned with the training set.
    pub labels: &'a UnitTable,
}

/// What a task model is trained on besides cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSpec<'a> {
    /// Hard attention masks for train and dev (both or neither).
    pub masks: Option<(&'a UnitTable, &'a UnitTable)>,
    pub saliency: Option<SaliencyTerm<'a>>,
}

/// Trains a task-head model with `L_task (+ λ L_sal)`.
pub fn train_task_model(
    model: &mut Model,
    train_set: &[EncodedInstance],
    dev_set: &[EncodedInstance],
    spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if let Some(s) = &spec.saliency {
        if s.labels.len() != train_set.len() {
            return Err(Error::Mismatch(
                "saliency labels do not align with the training set".into(),
            ));
        }
        if !model.is_kg() {
            return Err(Error::Config(
                "saliency supervision needs a KG model".into(),
            ));
        }
    }
    let train_masks = spec.masks.map(|m| m.0);
    let dev_masks = spec.masks.map(|m| m.1);
    train(
        model,
        train_set.len(),
        cfg,
        &[],
        |m, i, grads, rng| {
            let inst = &train_set[i];
            let mut tape = Tape::new(&m.params);
            let mut opts = ForwardOpts {
                masks: train_masks.map(|t| t[i].as_slice()),
                dropout_rng: Some(rng),
                ..Default::default()
            };
            let q = m.forward_tape(&mut tape, inst, &mut opts)?;
            let logp = tape.log_softmax(q.rho.unwrap());
            let lt = tape.index(logp, inst.target);
            let mut loss = tape.scale(lt, -1.0);
            if let Some(s) = spec.saliency.filter(|s| s.lambda != 0.0) {
                let mut terms = Vec::new();
                for (c, ch) in q.choices.iter().enumerate() {
                    let Some(alpha) = ch.alpha else { continue };
                    let y = &s.labels[i][c];
                    let term = match s.kind {
                        SalLoss::Kl => {
                            let pos: f64 = y.iter().sum();
                            if pos <= 0.0 {
                                return Err(Error::Mismatch(format!(
                                    "({}, choice {c}) has no positive unit",
                                    inst.id
                                )));
                            }
                            tape.kl_from_target(alpha, y.iter().map(|v| v / pos).collect())
                        }
                        SalLoss::Bce => tape.bce_prob(alpha, y.clone()),
                    };
                    terms.push(term);
                }
                if !terms.is_empty() {
                    let n = terms.len() as f64;
                    let sal = tape.sum(&terms);
                    let sal = tape.scale(sal, s.lambda / n);
                    loss = tape.add(loss, sal);
                }
            }
            tape.backward(loss, 1.0, Some(grads));
            Ok(tape.scalar(loss))
        },
        |m| task_accuracy(m, dev_set, dev_masks),
    )
}

/// Per-choice probabilities for every instance.
pub fn predict_probs(
    model: &Model,
    data: &[EncodedInstance],
    masks: Option<&UnitTable>,
) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .enumerate()
        .map(|(i, inst)| model.probs(inst, masks.map(|m| m[i].as_slice())))
        .collect()
}

pub fn task_accuracy(
    model: &Model,
    data: &[EncodedInstance],
    masks: Option<&UnitTable>,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_probs(model, data, masks)?;
    let correct = probs
        .iter()
        .zip(data)
        .filter(|(p, inst)| argmax(p) == inst.target)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
