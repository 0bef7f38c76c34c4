use super::*;
use crate::datamodel::{AnswerChoice, ContextKg, Edge, KgPath, Node, NodeType, QaInstance};
use crate::synthdata::{generate_dataset, GenConfig};
use crate::tape::dot;

fn tiny() -> Vec<QaInstance> {
    let cfg = GenConfig {
        n_train: 24,
        n_dev: 8,
        n_test: 8,
        ..Default::default()
    };
    generate_dataset(&cfg).unwrap().train
}

fn model(style: Option<EncoderStyle>, data: &[QaInstance]) -> Model {
    let cfg = match style {
        Some(s) => ModelConfig::kg(s, 8),
        None => ModelConfig::no_kg(8),
    };
    Model::new(cfg, Vocab::build(data), 7).unwrap()
}

fn one_path_kg() -> ContextKg {
    ContextKg {
        nodes: vec![
            Node {
                id: 0,
                label: "c1".into(),
                kind: NodeType::Question,
            },
            Node {
                id: 1,
                label: "c2".into(),
                kind: NodeType::Answer,
            },
        ],
        relations: vec!["r0".into()],
        edges: vec![Edge {
            head: 0,
            relation: 0,
            tail: 1,
        }],
        paths: vec![KgPath { edges: vec![0] }],
    }
}

fn toy_instance(id: usize, question: &[&str], texts: &[&str], target: usize) -> QaInstance {
    QaInstance {
        id: format!("toy-{id}"),
        question: question.iter().map(|s| s.to_string()).collect(),
        choices: texts
            .iter()
            .map(|t| AnswerChoice {
                text: vec![t.to_string()],
                kg: one_path_kg(),
            })
            .collect(),
        target_index: target,
    }
}

#[test]
fn text_encoder_is_deterministic_and_order_free() {
    let data = tiny();
    let m = model(None, &data);
    let emb = |toks: &[usize]| {
        let mut t = Tape::new(&m.params);
        let x = m.encode_text(&mut t, toks);
        t.value(x).to_vec()
    };
    let a = emb(&[3, 5, 9]);
    assert_eq!(a, emb(&[3, 5, 9]));
    let b = emb(&[9, 3, 5]);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
    assert_ne!(a, emb(&[3, 5, 10]));
}

#[test]
fn unknown_tokens_map_to_unk() {
    let data = tiny();
    let v = Vocab::build(&data);
    assert_eq!(v.token("never-seen"), 0);
    assert_eq!(v.concept("never-seen"), 0);
    assert_eq!(v.tokens[0], encode::UNK);
}

#[test]
fn single_unit_kg_attends_fully() {
    let inst = toy_instance(0, &["w1"], &["a", "b"], 0);
    let m = model(Some(EncoderStyle::PathAttn), std::slice::from_ref(&inst));
    let enc = m.encode(&inst);
    let mut t = Tape::new(&m.params);
    let x = m.encode_text(&mut t, &enc.choices[0].tokens);
    let (units, alpha, g) = m
        .encode_graph(&mut t, &enc.choices[0], x, None, None)
        .unwrap();
    assert_eq!(t.value(alpha), &[1.0]);
    assert_eq!(t.value(g), t.value(units[0].h));
}

#[test]
fn identity_mask_changes_nothing() {
    let data = tiny();
    for style in [EncoderStyle::PathAttn, EncoderStyle::NodeAttn] {
        let m = model(Some(style), &data);
        for inst in m.encode_all(&data) {
            let ones: Vec<Vec<f64>> = inst
                .choices
                .iter()
                .map(|c| vec![1.0; c.units.len()])
                .collect();
            assert_eq!(
                m.forward(&inst, None).unwrap(),
                m.forward(&inst, Some(&ones)).unwrap()
            );
        }
    }
}

#[test]
fn masking_renormalizes_and_is_idempotent() {
    let data = tiny();
    let m = model(Some(EncoderStyle::PathAttn), &data);
    for inst in m.encode_all(&data) {
        let plain = m.forward(&inst, None).unwrap();
        let masks: Vec<Vec<f64>> = plain
            .attention
            .iter()
            .map(|a| {
                let top = argmax(a);
                (0..a.len())
                    .map(|i| if i == top && a.len() > 1 { 0.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        let out = m.forward(&inst, Some(&masks)).unwrap();
        for (a, mk) in out.attention.iter().zip(&masks) {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (ai, mi) in a.iter().zip(mk) {
                if *mi == 0.0 {
                    assert_eq!(*ai, 0.0);
                }
            }
        }
        // Masking again with the survivors' indicator is a no-op.
        let survivors: Vec<Vec<f64>> = out
            .attention
            .iter()
            .map(|a| a.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(out, m.forward(&inst, Some(&survivors)).unwrap());
    }
}

#[test]
fn all_zero_mask_is_degenerate() {
    let data = tiny();
    let m = model(Some(EncoderStyle::PathAttn), &data);
    let inst = m.encode(&data[0]);
    let zeros: Vec<Vec<f64>> = inst
        .choices
        .iter()
        .map(|c| vec![0.0; c.units.len()])
        .collect();
    assert!(matches!(
        m.forward(&inst, Some(&zeros)),
        Err(Error::DegenerateMask)
    ));
}

#[test]
fn output_shapes() {
    let data = tiny();
    let nokg = model(None, &data);
    let kg = model(Some(EncoderStyle::NodeAttn), &data);
    for raw in &data {
        let out = nokg.forward(&nokg.encode(raw), None).unwrap();
        assert!(out.attention.iter().all(Vec::is_empty));
        let out = kg.forward(&kg.encode(raw), None).unwrap();
        assert_eq!(out.p.len(), 4);
        assert!((out.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (c, a) in out.attention.iter().enumerate() {
            assert_eq!(a.len(), raw.choices[c].kg.nodes.len());
        }
    }
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let data = tiny();
    let mut m = model(Some(EncoderStyle::PathAttn), &data);
    for name in ["pred.w_o", "pred.b_o"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let out = m.forward(&m.encode(&data[0]), None).unwrap();
    assert_eq!(out.p, vec![0.25; 4]);
}

/// ∂p_c/∂u from the tape versus central differences.
fn check_unit_gradient(style: EncoderStyle) {
    let data = tiny();
    let m = model(Some(style), &data);
    let inst = m.encode(&data[1]);
    let c = inst.target;
    let prob = |perturb: Option<(usize, usize, &[f64])>| {
        let mut t = Tape::new(&m.params);
        let mut opts = ForwardOpts {
            perturb,
            ..Default::default()
        };
        let q = m.forward_tape(&mut t, &inst, &mut opts).unwrap();
        let p = t.softmax(q.rho.unwrap());
        t.value(p)[c]
    };
    let mut t = Tape::new(&m.params);
    let q = m
        .forward_tape(&mut t, &inst, &mut ForwardOpts::default())
        .unwrap();
    let p = t.softmax(q.rho.unwrap());
    let pc = t.index(p, c);
    let grads = t.backward(pc, 1.0, None);
    for (u, uv) in q.choices[c].units.iter().enumerate() {
        let an = grads.get(uv.embedding).unwrap().to_vec();
        let h = 1e-5;
        let fd: Vec<f64> = (0..m.config.dim)
            .map(|k| {
                let mut d = vec![0.0; m.config.dim];
                d[k] = h;
                let up = prob(Some((c, u, &d)));
                d[k] = -h;
                let down = prob(Some((c, u, &d)));
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = an
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = dot(&an, &an).sqrt().max(1e-12);
        assert!(
            diff / norm < 1e-6,
            "unit {u}: relative error {}",
            diff / norm
        );
    }
}

#[test]
fn path_unit_gradient_matches_finite_differences() {
    check_unit_gradient(EncoderStyle::PathAttn);
}

#[test]
fn node_unit_gradient_matches_finite_differences() {
    check_unit_gradient(EncoderStyle::NodeAttn);
}

#[test]
fn path_representation_depends_only_on_used_constituents() {
    // Two 2-hop paths that differ only in the intermediate node.
    let data = tiny();
    let m = model(Some(EncoderStyle::PathAttn), &data);
    let u1 = EncodedUnit::Path {
        head: 3,
        rels: vec![1, 2],
        tail: 4,
    };
    let ch = EncodedChoice {
        tokens: vec![1],
        units: vec![u1.clone(), u1],
    };
    let mut t = Tape::new(&m.params);
    let x = m.encode_text(&mut t, &ch.tokens);
    let (units, alpha, _) = m.encode_graph(&mut t, &ch, x, None, None).unwrap();
    assert_eq!(t.value(units[0].h), t.value(units[1].h));
    assert_eq!(t.value(alpha), &[0.5, 0.5]);
}

fn separable() -> (Vec<QaInstance>, Vec<QaInstance>) {
    let make = |n: usize, off: usize| {
        (0..n)
            .map(|i| {
                let target = (i * 7 + off) % 2;
                let texts = if target == 0 {
                    ["good", "bad"]
                } else {
                    ["bad", "good"]
                };
                let q = format!("w{}", (i * 13 + off) % 5);
                toy_instance(i + off, &[q.as_str()], &texts, target)
            })
            .collect::<Vec<_>>()
    };
    (make(40, 0), make(10, 100))
}

#[test]
fn separable_toy_set_is_learned() {
    let (train_raw, dev_raw) = separable();
    let mut m = Model::new(ModelConfig::no_kg(8), Vocab::build(&train_raw), 3).unwrap();
    let (tr, dv) = (m.encode_all(&train_raw), m.encode_all(&dev_raw));
    let cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 8,
        lr: 1e-2,
        ..Default::default()
    };
    train_task_model(&mut m, &tr, &dv, &LossSpec::default(), &cfg).unwrap();
    assert_eq!(task_accuracy(&m, &tr, None).unwrap(), 1.0);
}

#[test]
fn training_is_deterministic_and_stops_early() {
    let data = tiny();
    let run = || {
        let mut m = model(Some(EncoderStyle::PathAttn), &data);
        let enc = m.encode_all(&data);
        let cfg = TrainConfig {
            max_epochs: 12,
            patience: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out =
            train_task_model(&mut m, &enc[..16], &enc[16..], &LossSpec::default(), &cfg).unwrap();
        (out, m.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let last = a.log.last().unwrap().epoch;
    assert!(last == 12 || last - a.best_epoch == 2, "{a:?}");
    assert_eq!(a.best_dev_acc, a.log[a.best_epoch - 1].dev_acc);
}

#[test]
fn checkpoint_round_trip_keeps_hash() {
    let data = tiny();
    let m = model(Some(EncoderStyle::NodeAttn), &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let h = Checkpoint::write(&m, &path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(h, params_hash(&back.params));
    assert_eq!(back.config, m.config);
    let inst = m.encode(&data[0]);
    assert_eq!(
        m.forward(&inst, None).unwrap(),
        back.forward(&inst, None).unwrap()
    );
}
