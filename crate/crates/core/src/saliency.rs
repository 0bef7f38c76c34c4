//! Coarse and fine saliency explanations from frozen models.
//!
//! Coarse: the ensemble score compares F_KG with F_No-KG on each choice and
//! thresholds the signed gap at `T`. Fine: raw per-unit attributions `phi`
//! (gradient×input or leave-one-out occlusion) are signed by choice
//! correctness and the top `k` percent of each KG become positives.

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ExplanationCache, ExplanationMethod, Granularity, QaInstance, SaliencyRecord, Threshold, Unit,
    UnitKind,
};
use crate::models::{params_hash, EncodedInstance, ForwardOpts, Model};
use crate::tape::{dot, Tape};
use crate::{Error, Result};

pub const DEFAULT_T: f64 = 0.01;
pub const DEFAULT_K: f64 = 10.0;

/// Signed KG-vs-No-KG probability gap of one choice.
pub fn coarse_score(p_kg: f64, p_nokg: f64, is_correct: bool) -> f64 {
    if is_correct {
        p_kg - p_nokg
    } else {
        p_nokg - p_kg
    }
}

/// `s_c > t`, strictly.
pub fn binarize_coarse(s_c: f64, t: f64) -> bool {
    s_c > t
}

pub fn sign_fine(phi: f64, is_correct: bool) -> f64 {
    if is_correct {
        phi
    } else {
        -phi
    }
}

/// Number of positives kept out of `n` units at `k` percent.
pub fn topk_count(n: usize, k_percent: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let m = (k_percent / 100.0 * n as f64).ceil() as usize;
    m.clamp(1, n)
}

/// Marks the `topk_count` highest scores; equal scores go to the lower index.
pub fn binarize_topk(scores: &[f64], k_percent: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![false; scores.len()];
    for &i in order.iter().take(topk_count(scores.len(), k_percent)) {
        out[i] = true;
    }
    out
}

/// Gradient×input attribution of every unit of one choice, against the
/// probability the model assigns to that choice.
///
/// Node units use the node embedding; path units use the sum of the path's
/// constituent embeddings, which equals summing the per-constituent scores.
pub fn phi_grad(model: &Model, inst: &EncodedInstance, choice: usize) -> Result<Vec<f64>> {
    phi_grad_impl(model, inst, choice, false)
}

/// Same attribution computed constituent by constituent.
pub fn phi_grad_by_constituents(
    model: &Model,
    inst: &EncodedInstance,
    choice: usize,
) -> Result<Vec<f64>> {
    phi_grad_impl(model, inst, choice, true)
}

fn phi_grad_impl(
    model: &Model,
    inst: &EncodedInstance,
    choice: usize,
    per_constituent: bool,
) -> Result<Vec<f64>> {
    require_kg(model)?;
    let mut tape = Tape::new(&model.params);
    let q = model.forward_tape(&mut tape, inst, &mut ForwardOpts::default())?;
    let p = tape.softmax(q.rho.expect("task head"));
    let pc = tape.index(p, choice);
    let grads = tape.backward(pc, 1.0, None);
    let zero = vec![0.0; model.config.dim];
    let grad_dot = |v| dot(tape.value(v), grads.get(v).unwrap_or(&zero));
    q.choices[choice]
        .units
        .iter()
        .enumerate()
        .map(|(u, uv)| {
            let phi = if per_constituent {
                uv.constituents.iter().map(|&c| grad_dot(c)).sum()
            } else {
                grad_dot(uv.embedding)
            };
            if phi.is_finite() {
                Ok(phi)
            } else {
                Err(Error::NonFiniteGradient {
                    id: inst.id.clone(),
                    choice,
                    unit: u,
                })
            }
        })
        .collect()
}

/// Leave-one-out attribution: drop in the choice's probability when a unit
/// is excluded from attention pooling. Removing the only unit falls back to
/// a zero graph embedding and sets the returned flag for that unit.
pub fn phi_occl(model: &Model, inst: &EncodedInstance, choice: usize) -> Result<Vec<(f64, bool)>> {
    require_kg(model)?;
    let base = model.probs(inst, None)?[choice];
    let n = inst.choices[choice].units.len();
    let mut masks: Vec<Vec<f64>> = inst
        .choices
        .iter()
        .map(|c| vec![1.0; c.units.len()])
        .collect();
    (0..n)
        .map(|u| {
            masks[choice][u] = 0.0;
            let mut tape = Tape::new(&model.params);
            let mut opts = ForwardOpts {
                masks: Some(&masks),
                degenerate_fallback: true,
                ..Default::default()
            };
            let q = model.forward_tape(&mut tape, inst, &mut opts)?;
            let out = model.output(&tape, &q);
            masks[choice][u] = 1.0;
            Ok((base - out.p[choice], q.choices[choice].degenerate))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttributionMethod {
    Grad,
    Occl,
}

/// Coarse score from the graph embedding `g` itself: gradient×input on `g`,
/// or the drop when `g` is replaced by zeros. Signed by correctness.
pub fn coarse_phi_ablation(
    model: &Model,
    inst: &EncodedInstance,
    choice: usize,
    method: AttributionMethod,
) -> Result<f64> {
    require_kg(model)?;
    let is_correct = choice == inst.target;
    let phi = match method {
        AttributionMethod::Grad => {
            let mut tape = Tape::new(&model.params);
            let q = model.forward_tape(&mut tape, inst, &mut ForwardOpts::default())?;
            let p = tape.softmax(q.rho.expect("task head"));
            let pc = tape.index(p, choice);
            let grads = tape.backward(pc, 1.0, None);
            let g = q.choices[choice].g.ok_or(Error::DegenerateMask)?;
            grads.get(g).map_or(0.0, |gr| dot(tape.value(g), gr))
        }
        AttributionMethod::Occl => {
            let base = model.probs(inst, None)?[choice];
            let mut tape = Tape::new(&model.params);
            let mut opts = ForwardOpts {
                zero_graph: Some(choice),
                ..Default::default()
            };
            let q = model.forward_tape(&mut tape, inst, &mut opts)?;
            base - model.output(&tape, &q).p[choice]
        }
    };
    Ok(sign_fine(phi, is_correct))
}

fn require_kg(model: &Model) -> Result<()> {
    if model.is_kg() {
        Ok(())
    } else {
        Err(Error::Config("saliency needs a KG model".into()))
    }
}

fn check_explainable(model: &Model, data: &[QaInstance]) -> Result<()> {
    let kind = model
        .unit_kind()
        .ok_or_else(|| Error::Config("saliency needs a KG model".into()))?;
    for inst in data {
        if inst.choices.is_empty() {
            return Err(Error::Mismatch(format!("{} has no choices", inst.id)));
        }
        for ch in &inst.choices {
            if kind == UnitKind::Path && ch.kg.paths.is_empty() {
                return Err(Error::Mismatch(format!(
                    "{} has a KG without paths",
                    inst.id
                )));
            }
        }
    }
    Ok(())
}

/// Coarse ensemble explanations: one GRAPH record per (instance, choice),
/// `phi = p_KG − p_No-KG`, labelled by `s_c > t`.
pub fn build_coarse_cache(
    f_kg: &Model,
    f_nokg: &Model,
    data: &[QaInstance],
    t: f64,
) -> Result<ExplanationCache> {
    if f_nokg.is_kg() {
        return Err(Error::Mismatch(
            "second model of the ensemble must be No-KG".into(),
        ));
    }
    check_explainable(f_kg, data)?;
    let mut cache = ExplanationCache::new(
        ExplanationMethod::Ensemble,
        Granularity::Coarse,
        Threshold::T(t),
        UnitKind::Graph,
    );
    cache.model_hashes = vec![params_hash(&f_kg.params), params_hash(&f_nokg.params)];
    for raw in data {
        let p_kg = f_kg.probs(&f_kg.encode(raw), None)?;
        let p_nokg = f_nokg.probs(&f_nokg.encode(raw), None)?;
        insert_coarse(&mut cache, raw, &p_kg, &p_nokg, t);
    }
    Ok(cache)
}

/// Adds coarse records computed from precomputed probabilities.
pub fn insert_coarse(
    cache: &mut ExplanationCache,
    raw: &QaInstance,
    p_kg: &[f64],
    p_nokg: &[f64],
    t: f64,
) {
    for c in 0..raw.choices.len() {
        let correct = c == raw.target_index;
        let s = coarse_score(p_kg[c], p_nokg[c], correct);
        let rec = SaliencyRecord::new(
            Unit::Graph,
            p_kg[c] - p_nokg[c],
            correct,
            binarize_coarse(s, t),
        );
        cache.records.insert((raw.id.clone(), c), vec![rec]);
    }
}

/// Coarse labels from the graph-embedding ablation scores.
pub fn build_coarse_ablation_cache(
    f_kg: &Model,
    data: &[QaInstance],
    method: AttributionMethod,
    t: f64,
) -> Result<ExplanationCache> {
    check_explainable(f_kg, data)?;
    let m = match method {
        AttributionMethod::Grad => ExplanationMethod::Grad,
        AttributionMethod::Occl => ExplanationMethod::Occl,
    };
    let mut cache = ExplanationCache::new(m, Granularity::Coarse, Threshold::T(t), UnitKind::Graph);
    cache.model_hashes = vec![params_hash(&f_kg.params)];
    for raw in data {
        let inst = f_kg.encode(raw);
        for c in 0..inst.choices.len() {
            let correct = c == inst.target;
            let s = coarse_phi_ablation(f_kg, &inst, c, method)?;
            let rec = SaliencyRecord::new(
                Unit::Graph,
                sign_fine(s, correct),
                correct,
                binarize_coarse(s, t),
            );
            cache.records.insert((raw.id.clone(), c), vec![rec]);
        }
    }
    Ok(cache)
}

/// Fine explanations: `phi` per unit, signed, top-`k`% positives per KG.
pub fn build_fine_cache(
    f_kg: &Model,
    data: &[QaInstance],
    method: AttributionMethod,
    k_percent: f64,
) -> Result<ExplanationCache> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!(
            "k = {k_percent} must lie in (0, 100]"
        )));
    }
    check_explainable(f_kg, data)?;
    let kind = f_kg.unit_kind().unwrap();
    let m = match method {
        AttributionMethod::Grad => ExplanationMethod::Grad,
        AttributionMethod::Occl => ExplanationMethod::Occl,
    };
    let mut cache = ExplanationCache::new(m, Granularity::Fine, Threshold::K(k_percent), kind);
    cache.model_hashes = vec![params_hash(&f_kg.params)];
    for raw in data {
        let inst = f_kg.encode(raw);
        for c in 0..inst.choices.len() {
            let correct = c == inst.target;
            let phis: Vec<(f64, bool)> = match method {
                AttributionMethod::Grad => phi_grad(f_kg, &inst, c)?
                    .into_iter()
                    .map(|p| (p, false))
                    .collect(),
                AttributionMethod::Occl => phi_occl(f_kg, &inst, c)?,
            };
            let signed: Vec<f64> = phis.iter().map(|&(p, _)| sign_fine(p, correct)).collect();
            let labels = binarize_topk(&signed, k_percent);
            let records = raw.choices[c]
                .kg
                .units(kind)
                .into_iter()
                .zip(phis)
                .zip(labels)
                .map(|((unit, (phi, degenerate)), y)| SaliencyRecord {
                    degenerate,
                    ..SaliencyRecord::new(unit, phi, correct, y)
                })
                .collect();
            cache.records.insert((raw.id.clone(), c), records);
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderStyle, ModelConfig, Vocab};
    use crate::synthdata::{generate_dataset, GenConfig};
    use proptest::prelude::*;

    #[test]
    fn coarse_examples() {
        assert!((coarse_score(0.8, 0.6, true) - 0.2).abs() < 1e-15);
        assert!((coarse_score(0.8, 0.6, false) + 0.2).abs() < 1e-15);
        assert_eq!(coarse_score(0.5, 0.5, true), 0.0);
        assert_eq!(coarse_score(0.5, 0.5, false), 0.0);
        assert!(binarize_coarse(0.2, 0.01));
        assert!(!binarize_coarse(0.0, 0.01));
        assert!(!binarize_coarse(0.01, 0.01));
    }

    #[test]
    fn fine_examples() {
        assert_eq!(sign_fine(0.3, true), 0.3);
        assert_eq!(sign_fine(0.3, false), -0.3);
        assert_eq!(sign_fine(0.0, false), 0.0);
        let ten: Vec<f64> = (0..10).map(|i| (i as f64 * 1.7).sin()).collect();
        let y = binarize_topk(&ten, 10.0);
        assert_eq!(y.iter().filter(|&&b| b).count(), 1);
        assert!(y[crate::models::argmax(&ten)]);
        assert_eq!(topk_count(5, 10.0), 1);
        assert_eq!(
            binarize_topk(&[3.0, 2.0, 2.0, 1.0], 50.0),
            vec![true, true, false, false]
        );
    }

    proptest! {
        #[test]
        fn topk_count_and_dominance(scores in prop::collection::vec(-3i32..3, 1..40), k in 0.01f64..100.0) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let y = binarize_topk(&s, k);
            let m = ((k / 100.0 * s.len() as f64).ceil() as usize).max(1);
            prop_assert_eq!(y.iter().filter(|&&b| b).count(), m);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if y[i] && !y[j] {
                        prop_assert!(s[i] > s[j] || (s[i] == s[j] && i < j));
                    }
                }
            }
        }

        #[test]
        fn coarse_label_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, t in -0.5f64..0.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(binarize_coarse(lo, t) <= binarize_coarse(hi, t));
        }
    }

    fn setup(style: EncoderStyle) -> (Model, Vec<QaInstance>) {
        let cfg = GenConfig {
            n_train: 12,
            n_dev: 4,
            n_test: 4,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap().train;
        let m = Model::new(ModelConfig::kg(style, 8), Vocab::build(&data), 5).unwrap();
        (m, data)
    }

    #[test]
    fn path_grad_equals_sum_over_constituents() {
        let (m, data) = setup(EncoderStyle::PathAttn);
        for raw in &data {
            let inst = m.encode(raw);
            for c in 0..inst.choices.len() {
                let a = phi_grad(&m, &inst, c).unwrap();
                let b = phi_grad_by_constituents(&m, &inst, c).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-3), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn occlusion_matches_physical_deletion_for_paths() {
        let (m, data) = setup(EncoderStyle::PathAttn);
        for raw in &data {
            let inst = m.encode(raw);
            let base = m.probs(&inst, None).unwrap();
            for c in 0..inst.choices.len() {
                let phis = phi_occl(&m, &inst, c).unwrap();
                // Reverse order gives the same values.
                for (u, &(phi, deg)) in phis.iter().enumerate().rev() {
                    let n = raw.choices[c].kg.paths.len();
                    let mut keep = vec![true; n];
                    keep[u] = false;
                    let mut cut = raw.clone();
                    cut.choices[c].kg = raw.choices[c].kg.retain_units(UnitKind::Path, &keep);
                    if n == 1 {
                        assert!(deg);
                        continue;
                    }
                    let p = m.probs(&m.encode(&cut), None).unwrap()[c];
                    assert!((phi - (base[c] - p)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_unit_occlusion_is_flagged() {
        let (m, data) = setup(EncoderStyle::PathAttn);
        let mut raw = data[0].clone();
        raw.choices[0].kg = raw.choices[0].kg.retain_units(
            UnitKind::Path,
            &(0..raw.choices[0].kg.paths.len())
                .map(|i| i == 0)
                .collect::<Vec<_>>(),
        );
        let phis = phi_occl(&m, &m.encode(&raw), 0).unwrap();
        assert_eq!(phis.len(), 1);
        assert!(phis[0].1);
    }

    #[test]
    fn graph_ablation_occl_matches_reforward() {
        let (m, data) = setup(EncoderStyle::NodeAttn);
        let inst = m.encode(&data[0]);
        for c in 0..inst.choices.len() {
            let s = coarse_phi_ablation(&m, &inst, c, AttributionMethod::Occl).unwrap();
            let base = m.probs(&inst, None).unwrap()[c];
            let mut tape = Tape::new(&m.params);
            let mut opts = ForwardOpts {
                zero_graph: Some(c),
                ..Default::default()
            };
            let q = m.forward_tape(&mut tape, &inst, &mut opts).unwrap();
            let zeroed = m.output(&tape, &q).p[c];
            assert_eq!(s, sign_fine(base - zeroed, c == inst.target));
        }
    }

    #[test]
    fn caches_have_the_right_shape_and_are_deterministic() {
        let (m, data) = setup(EncoderStyle::PathAttn);
        let nokg = Model::new(ModelConfig::no_kg(8), m.vocab.clone(), 2).unwrap();
        let coarse = build_coarse_cache(&m, &nokg, &data, DEFAULT_T).unwrap();
        assert_eq!(coarse.records.len(), data.len() * 4);
        assert!(coarse
            .records
            .values()
            .all(|r| r.len() == 1 && r[0].unit == Unit::Graph && r[0].is_consistent()));

        let fine = build_fine_cache(&m, &data, AttributionMethod::Grad, 30.0).unwrap();
        for raw in &data {
            for (c, ch) in raw.choices.iter().enumerate() {
                let recs = fine.get(&raw.id, c).unwrap();
                assert_eq!(recs.len(), ch.kg.paths.len());
                let pos = recs.iter().filter(|r| r.positive()).count();
                assert_eq!(pos, topk_count(recs.len(), 30.0));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        fine.write(&a).unwrap();
        build_fine_cache(&m, &data, AttributionMethod::Grad, 30.0)
            .unwrap()
            .write(&b)
            .unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
