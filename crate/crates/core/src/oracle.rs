//! Oracle models: explanations derived from the gold answer are fed back as
//! hard inputs, as an upper-bound probe.
//!
//! * Coarse: per choice, take F_KG's probability if `y_c = 1`, else F_No-KG's.
//! * Fine: a KG model whose attention is masked with `y_f` in training and
//!   evaluation.
//! * Hybrid: coarse mixing between the fine oracle and F_No-KG, with labels
//!   recomputed from the fine oracle's probabilities.

use crate::datamodel::{ExplanationCache, Granularity, QaInstance};
use crate::models::{
    argmax, predict_probs, train_task_model, LossSpec, Model, ModelConfig, TrainConfig,
    TrainOutcome, UnitTable, Vocab,
};
use crate::saliency::{binarize_coarse, coarse_score};
use crate::{Error, Result};

/// Predictions and the per-choice values they were read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn from_values(values: Vec<Vec<f64>>, data: &[QaInstance]) -> Self {
        let predictions: Vec<usize> = values.iter().map(|v| argmax(v)).collect();
        let correct = predictions
            .iter()
            .zip(data)
            .filter(|(p, inst)| **p == inst.target_index)
            .count();
        Evaluation {
            accuracy: if data.is_empty() {
                0.0
            } else {
                correct as f64 / data.len() as f64
            },
            predictions,
            values,
        }
    }
}

/// `y·p_kg + (1−y)·p_nokg` per choice.
pub fn mix(p_kg: &[f64], p_nokg: &[f64], y: &[f64]) -> Vec<f64> {
    p_kg.iter()
        .zip(p_nokg)
        .zip(y)
        .map(|((a, b), w)| w * a + (1.0 - w) * b)
        .collect()
}

pub fn probs_of(
    model: &Model,
    data: &[QaInstance],
    masks: Option<&UnitTable>,
) -> Result<Vec<Vec<f64>>> {
    predict_probs(model, &model.encode_all(data), masks)
}

/// Coarse mixing from precomputed probabilities and labels.
pub fn mixed_eval(
    p_kg: &[Vec<f64>],
    p_nokg: &[Vec<f64>],
    labels: &[Vec<f64>],
    data: &[QaInstance],
) -> Evaluation {
    let values = p_kg
        .iter()
        .zip(p_nokg)
        .zip(labels)
        .map(|((a, b), y)| mix(a, b, y))
        .collect();
    Evaluation::from_values(values, data)
}

/// Oracle-Coarse on `data`. No training involved.
pub fn oracle_coarse_eval(
    f_kg: &Model,
    f_nokg: &Model,
    cache: &ExplanationCache,
    data: &[QaInstance],
) -> Result<Evaluation> {
    if cache.granularity != Granularity::Coarse {
        return Err(Error::Mismatch("Oracle-Coarse needs a coarse cache".into()));
    }
    let labels = cache.coarse_table(data)?;
    let p_kg = probs_of(f_kg, data, None)?;
    let p_nokg = probs_of(f_nokg, data, None)?;
    Ok(mixed_eval(&p_kg, &p_nokg, &labels, data))
}

/// Fine labels as attention masks, rejecting KGs without a positive unit.
pub fn fine_masks(cache: &ExplanationCache, data: &[QaInstance]) -> Result<UnitTable> {
    if cache.granularity != Granularity::Fine {
        return Err(Error::Mismatch("expected a fine cache".into()));
    }
    let table = cache.mask_table(data)?;
    for (inst, row) in data.iter().zip(&table) {
        for (c, m) in row.iter().enumerate() {
            if !m.is_empty() && m.iter().all(|&v| v == 0.0) {
                return Err(Error::Mismatch(format!(
                    "({}, choice {c}) has no positive unit",
                    inst.id
                )));
            }
        }
    }
    Ok(table)
}

/// Trains Oracle-Fine: the KG architecture with attention masked by `y_f`.
pub fn train_oracle_fine(
    config: &ModelConfig,
    vocab: &Vocab,
    cache: &ExplanationCache,
    train: &[QaInstance],
    dev: &[QaInstance],
    seed: u64,
    tcfg: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    if config.unit_kind() != Some(cache.unit_kind) {
        return Err(Error::Mismatch(
            "cache unit kind does not match the encoder".into(),
        ));
    }
    let train_masks = fine_masks(cache, train)?;
    let dev_masks = fine_masks(cache, dev)?;
    let mut model = Model::new(config.clone(), vocab.clone(), seed)?;
    let (tr, dv) = (model.encode_all(train), model.encode_all(dev));
    let spec = LossSpec {
        masks: Some((&train_masks, &dev_masks)),
        saliency: None,
    };
    let outcome = train_task_model(&mut model, &tr, &dv, &spec, tcfg)?;
    Ok((model, outcome))
}

pub fn oracle_fine_eval(
    f_fine: &Model,
    cache: &ExplanationCache,
    data: &[QaInstance],
) -> Result<Evaluation> {
    let masks = fine_masks(cache, data)?;
    Ok(Evaluation::from_values(
        probs_of(f_fine, data, Some(&masks))?,
        data,
    ))
}

/// Coarse labels from any (KG-side, No-KG) probability pair.
pub fn coarse_labels(
    p_kg: &[Vec<f64>],
    p_nokg: &[Vec<f64>],
    data: &[QaInstance],
    t: f64,
) -> Vec<Vec<f64>> {
    p_kg.iter()
        .zip(p_nokg)
        .zip(data)
        .map(|((a, b), inst)| {
            (0..a.len())
                .map(|c| {
                    f64::from(u8::from(binarize_coarse(
                        coarse_score(a[c], b[c], c == inst.target_index),
                        t,
                    )))
                })
                .collect()
        })
        .collect()
}

/// Oracle-Hybrid: Oracle-Coarse with the fine oracle in place of F_KG.
pub fn oracle_hybrid_eval(
    f_fine: &Model,
    cache: &ExplanationCache,
    f_nokg: &Model,
    data: &[QaInstance],
    t: f64,
) -> Result<Evaluation> {
    let masks = fine_masks(cache, data)?;
    let p_fine = probs_of(f_fine, data, Some(&masks))?;
    let p_nokg = probs_of(f_nokg, data, None)?;
    let labels = coarse_labels(&p_fine, &p_nokg, data, t);
    Ok(mixed_eval(&p_fine, &p_nokg, &labels, data))
}
