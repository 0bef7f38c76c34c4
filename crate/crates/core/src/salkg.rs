//! SalKG models, trained with `L_task + λ·L_sal`, and the simple baselines
//! they are compared against.
//!
//! Coarse and Hybrid train a gate `ŷ` (KG architecture, usefulness head)
//! over two frozen task models and predict with
//! `ŷ·p_KG + (1−ŷ)·p_No-KG`. Fine trains a KG model whose attention is
//! supervised by fine labels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    validate_instance, ExplanationCache, ExplanationMethod, Granularity, QaInstance,
    SaliencyRecord, Threshold, Unit, UnitKind,
};
use crate::models::{
    gate_value, train, train_task_model, ForwardOpts, Head, LossSpec, Model, ModelConfig, SalLoss,
    SaliencyTerm, TrainConfig, TrainOutcome, Vocab,
};
use crate::oracle::{coarse_labels, fine_masks, mixed_eval, probs_of, Evaluation};
use crate::saliency::topk_count;
use crate::tape::Tape;
use crate::{Error, Result};

/// Gate settings shared by SalKG-Coarse and SalKG-Hybrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub head: Head,
    /// Initialize the gate's encoders from the frozen KG-side model.
    pub warm_start: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            head: Head::GateSigmoid,
            warm_start: true,
        }
    }
}

/// A trained gate and the frozen models it mixes.
pub struct GatedModel<'a> {
    pub gate: Model,
    /// F_KG, or SalKG-Fine for the hybrid.
    pub kg_side: &'a Model,
    pub nokg: &'a Model,
}

impl GatedModel<'_> {
    pub fn gate_probs(&self, data: &[QaInstance]) -> Result<Vec<Vec<f64>>> {
        data.iter()
            .map(|raw| self.gate.gate_probs(&self.gate.encode(raw)))
            .collect()
    }

    pub fn evaluate(&self, data: &[QaInstance]) -> Result<Evaluation> {
        let y = self.gate_probs(data)?;
        let p_kg = probs_of(self.kg_side, data, None)?;
        let p_nokg = probs_of(self.nokg, data, None)?;
        Ok(mixed_eval(&p_kg, &p_nokg, &y, data))
    }
}

/// Trains a usefulness gate over precomputed, frozen per-choice probabilities.
#[allow(clippy::too_many_arguments)]
pub fn train_gate(
    template: &Model,
    gcfg: &GateConfig,
    train_set: (&[QaInstance], &[Vec<f64>], &[Vec<f64>], &[Vec<f64>]),
    dev_set: (&[QaInstance], &[Vec<f64>], &[Vec<f64>]),
    lambda: f64,
    seed: u64,
    tcfg: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    let (train_raw, tr_kg, tr_nokg, labels) = train_set;
    let (dev_raw, dv_kg, dv_nokg) = dev_set;
    if gcfg.head == Head::Task {
        return Err(Error::Config("a gate needs a usefulness head".into()));
    }
    let style = template
        .config
        .graph
        .ok_or_else(|| Error::Config("the gate has the KG architecture".into()))?;
    let config = ModelConfig {
        graph: Some(style),
        head: gcfg.head,
        ..template.config.clone()
    };
    let mut gate = Model::new(config, template.vocab.clone(), seed)?;
    if gcfg.warm_start {
        gate.warm_start_from(template);
    }
    let tr = gate.encode_all(train_raw);
    let dv = gate.encode_all(dev_raw);
    let head = gcfg.head;
    let outcome = train(
        &mut gate,
        tr.len(),
        tcfg,
        &[],
        |m, i, grads, rng| {
            let inst = &tr[i];
            let mut tape = Tape::new(&m.params);
            let mut opts = ForwardOpts {
                dropout_rng: Some(rng),
                ..Default::default()
            };
            let q = m.forward_tape(&mut tape, inst, &mut opts)?;
            let ys: Vec<_> = q
                .choices
                .iter()
                .map(|c| gate_value(&mut tape, head, c.out))
                .collect();
            let y = tape.stack(&ys);
            let loss = gate_loss(
                &mut tape,
                y,
                &tr_kg[i],
                &tr_nokg[i],
                inst.target,
                &labels[i],
                lambda,
            );
            tape.backward(loss, 1.0, Some(grads));
            Ok(tape.scalar(loss))
        },
        |m| {
            let y: Vec<Vec<f64>> = dv
                .iter()
                .map(|inst| m.gate_probs(inst))
                .collect::<Result<_>>()?;
            Ok(mixed_eval(dv_kg, dv_nokg, &y, dev_raw).accuracy)
        },
    )?;
    Ok((gate, outcome))
}

/// NLL of the renormalized mixture plus `λ`·BCE of `y` against the labels.
pub fn gate_loss(
    tape: &mut Tape,
    y: crate::tape::Var,
    p_kg: &[f64],
    p_nokg: &[f64],
    target: usize,
    labels: &[f64],
    lambda: f64,
) -> crate::tape::Var {
    let diff: Vec<f64> = p_kg.iter().zip(p_nokg).map(|(a, b)| a - b).collect();
    let mixed = tape.mul_const(y, diff);
    let mixed = tape.add_const(mixed, p_nokg);
    let total = tape.sum_elems(mixed);
    let log_total = tape.ln(total);
    let picked = tape.index(mixed, target);
    let log_picked = tape.ln(picked);
    let neg = tape.scale(log_picked, -1.0);
    let task = tape.add(neg, log_total);
    if lambda == 0.0 {
        return task;
    }
    let sal = tape.bce_prob(y, labels.to_vec());
    let sal = tape.scale(sal, lambda);
    tape.add(task, sal)
}

/// SalKG-Coarse: a gate trained against coarse labels over frozen F_KG and
/// F_No-KG.
#[allow(clippy::too_many_arguments)]
pub fn train_salkg_coarse<'a>(
    f_kg: &'a Model,
    f_nokg: &'a Model,
    cache: &ExplanationCache,
    train_raw: &[QaInstance],
    dev_raw: &[QaInstance],
    lambda: f64,
    seed: u64,
    gcfg: &GateConfig,
    tcfg: &TrainConfig,
) -> Result<(GatedModel<'a>, TrainOutcome)> {
    if cache.granularity != Granularity::Coarse {
        return Err(Error::Mismatch("SalKG-Coarse needs a coarse cache".into()));
    }
    let labels = cache.coarse_table(train_raw)?;
    let (tr_kg, tr_nokg) = (
        probs_of(f_kg, train_raw, None)?,
        probs_of(f_nokg, train_raw, None)?,
    );
    let (dv_kg, dv_nokg) = (
        probs_of(f_kg, dev_raw, None)?,
        probs_of(f_nokg, dev_raw, None)?,
    );
    let (gate, outcome) = train_gate(
        f_kg,
        gcfg,
        (train_raw, &tr_kg, &tr_nokg, &labels),
        (dev_raw, &dv_kg, &dv_nokg),
        lambda,
        seed,
        tcfg,
    )?;
    Ok((
        GatedModel {
            gate,
            kg_side: f_kg,
            nokg: f_nokg,
        },
        outcome,
    ))
}

/// SalKG-Fine: a KG model trained with attention supervision.
#[allow(clippy::too_many_arguments)]
pub fn train_salkg_fine(
    config: &ModelConfig,
    vocab: &Vocab,
    cache: Option<&ExplanationCache>,
    train_raw: &[QaInstance],
    dev_raw: &[QaInstance],
    lambda: f64,
    loss: SalLoss,
    seed: u64,
    tcfg: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::new(config.clone(), vocab.clone(), seed)?;
    let (tr, dv) = (model.encode_all(train_raw), model.encode_all(dev_raw));
    let labels = match cache {
        Some(c) => {
            if Some(c.unit_kind) != config.unit_kind() {
                return Err(Error::Mismatch(
                    "cache unit kind does not match the encoder".into(),
                ));
            }
            Some(fine_masks(c, train_raw)?)
        }
        None if lambda != 0.0 => return Err(Error::Config("λ > 0 needs a fine cache".into())),
        None => None,
    };
    let spec = LossSpec {
        masks: None,
        saliency: labels.as_ref().map(|labels| SaliencyTerm {
            lambda,
            kind: loss,
            labels,
        }),
    };
    let outcome = train_task_model(&mut model, &tr, &dv, &spec, tcfg)?;
    Ok((model, outcome))
}

/// SalKG-Hybrid: a gate over frozen SalKG-Fine and F_No-KG, trained against
/// labels recomputed from their probabilities at threshold `t`.
#[allow(clippy::too_many_arguments)]
pub fn train_salkg_hybrid<'a>(
    f_fine: &'a Model,
    f_nokg: &'a Model,
    train_raw: &[QaInstance],
    dev_raw: &[QaInstance],
    t: f64,
    lambda: f64,
    seed: u64,
    gcfg: &GateConfig,
    tcfg: &TrainConfig,
) -> Result<(GatedModel<'a>, TrainOutcome)> {
    let (tr_f, tr_nokg) = (
        probs_of(f_fine, train_raw, None)?,
        probs_of(f_nokg, train_raw, None)?,
    );
    let (dv_f, dv_nokg) = (
        probs_of(f_fine, dev_raw, None)?,
        probs_of(f_nokg, dev_raw, None)?,
    );
    let labels = coarse_labels(&tr_f, &tr_nokg, train_raw, t);
    let (gate, outcome) = train_gate(
        f_fine,
        gcfg,
        (train_raw, &tr_f, &tr_nokg, &labels),
        (dev_raw, &dv_f, &dv_nokg),
        lambda,
        seed,
        tcfg,
    )?;
    Ok((
        GatedModel {
            gate,
            kg_side: f_fine,
            nokg: f_nokg,
        },
        outcome,
    ))
}

/// Random explanations: coarse labels iid uniform on {0,1}; fine labels with
/// exactly `topk_count` positives per KG, drawn uniformly.
pub fn make_random_labels(
    data: &[QaInstance],
    granularity: Granularity,
    unit_kind: UnitKind,
    k_percent: f64,
    seed: u64,
) -> ExplanationCache {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kind, threshold) = match granularity {
        Granularity::Coarse => (UnitKind::Graph, Threshold::None),
        Granularity::Fine => (unit_kind, Threshold::K(k_percent)),
    };
    let mut cache = ExplanationCache::new(ExplanationMethod::Random, granularity, threshold, kind);
    for inst in data {
        for (c, ch) in inst.choices.iter().enumerate() {
            let correct = c == inst.target_index;
            let records = match granularity {
                Granularity::Coarse => vec![SaliencyRecord::new(
                    Unit::Graph,
                    0.0,
                    correct,
                    rng.gen_bool(0.5),
                )],
                Granularity::Fine => {
                    let units = ch.kg.units(kind);
                    let mut y = vec![false; units.len()];
                    for i in sample(&mut rng, units.len(), topk_count(units.len(), k_percent)) {
                        y[i] = true;
                    }
                    units
                        .into_iter()
                        .zip(y)
                        .map(|(u, y)| SaliencyRecord::new(u, 0.0, correct, y))
                        .collect()
                }
            };
            cache.records.insert((inst.id.clone(), c), records);
        }
    }
    cache
}

/// Mean number of QA nodes per KG.
pub fn mean_qa_nodes(train: &[QaInstance]) -> f64 {
    let (sum, n) = train
        .iter()
        .flat_map(|i| &i.choices)
        .fold((0usize, 0usize), |(s, n), ch| {
            (s + ch.kg.qa_node_count(), n + 1)
        });
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Heuristic explanations. Coarse: `N(G) > n_bar` QA nodes. Fine: a node is
/// positive iff it is a QA node; a path iff all its nodes are QA nodes. A KG
/// where no unit qualifies gets every unit positive, so the label still
/// defines a distribution.
pub fn make_heuristic_labels(
    data: &[QaInstance],
    granularity: Granularity,
    unit_kind: UnitKind,
    n_bar: f64,
) -> ExplanationCache {
    let (kind, threshold) = match granularity {
        Granularity::Coarse => (UnitKind::Graph, Threshold::None),
        Granularity::Fine => (unit_kind, Threshold::None),
    };
    let mut cache =
        ExplanationCache::new(ExplanationMethod::Heuristic, granularity, threshold, kind);
    for inst in data {
        for (c, ch) in inst.choices.iter().enumerate() {
            let correct = c == inst.target_index;
            let kg = &ch.kg;
            let records = match granularity {
                Granularity::Coarse => {
                    let n = kg.qa_node_count() as f64;
                    vec![SaliencyRecord::new(Unit::Graph, 0.0, correct, n > n_bar)]
                }
                Granularity::Fine => {
                    let units = kg.units(kind);
                    let mut y: Vec<bool> = units.iter().map(|&u| heuristic_fine(kg, u)).collect();
                    if !y.iter().any(|&b| b) {
                        y.iter_mut().for_each(|b| *b = true);
                    }
                    units
                        .into_iter()
                        .zip(y)
                        .map(|(u, y)| SaliencyRecord::new(u, 0.0, correct, y))
                        .collect()
                }
            };
            cache.records.insert((inst.id.clone(), c), records);
        }
    }
    cache
}

/// The raw fine heuristic rule for one unit.
pub fn heuristic_fine(kg: &crate::datamodel::ContextKg, unit: Unit) -> bool {
    match unit {
        Unit::Graph => kg.qa_node_count() > 0,
        Unit::Node(n) => kg.nodes[n as usize].kind.is_qa(),
        Unit::Path(p) => kg
            .path_nodes(&kg.paths[p])
            .iter()
            .all(|&n| kg.nodes[n as usize].kind.is_qa()),
    }
}

/// Drops every negative unit from every KG.
pub fn hard_prune(data: &[QaInstance], cache: &ExplanationCache) -> Result<Vec<QaInstance>> {
    let masks = fine_masks(cache, data)?;
    data.iter()
        .zip(masks)
        .map(|(inst, m)| {
            let mut out = inst.clone();
            for (ch, keep) in out.choices.iter_mut().zip(m) {
                let keep: Vec<bool> = keep.iter().map(|&v| v > 0.0).collect();
                ch.kg = ch.kg.retain_units(cache.unit_kind, &keep);
            }
            let violations = validate_instance(&out);
            if violations.is_empty() {
                Ok(out)
            } else {
                Err(Error::Invalid {
                    id: out.id,
                    violations,
                })
            }
        })
        .collect()
}

/// Average of F_KG's and F_No-KG's per-choice probabilities.
pub fn mean_ensemble_eval(f_kg: &Model, f_nokg: &Model, data: &[QaInstance]) -> Result<Evaluation> {
    let p_kg = probs_of(f_kg, data, None)?;
    let p_nokg = probs_of(f_nokg, data, None)?;
    let half: Vec<Vec<f64>> = p_kg.iter().map(|p| vec![0.5; p.len()]).collect();
    Ok(mixed_eval(&p_kg, &p_nokg, &half, data))
}

#[cfg(test)]
mod tests;
