use super::*;
use crate::datamodel::{AnswerChoice, ContextKg, Edge, KgPath, Node, NodeType};
use crate::models::{params_hash, EncoderStyle};
use crate::saliency::build_coarse_cache;
use crate::synthdata::{generate_dataset, GenConfig, SyntheticSplits};

fn splits(n: usize) -> SyntheticSplits {
    generate_dataset(&GenConfig {
        n_train: n,
        n_dev: 8,
        n_test: 8,
        ..Default::default()
    })
    .unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn random_coarse_labels_are_balanced_and_seeded() {
    let data = splits(2500).train;
    let cache = make_random_labels(&data, Granularity::Coarse, UnitKind::Path, 10.0, 7);
    let pos = cache.records.values().filter(|r| r[0].positive()).count();
    let frac = pos as f64 / cache.records.len() as f64;
    assert_eq!(cache.records.len(), 10_000);
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    assert_eq!(
        cache,
        make_random_labels(&data, Granularity::Coarse, UnitKind::Path, 10.0, 7)
    );
}

#[test]
fn random_fine_labels_keep_topk_count() {
    let data = splits(50).train;
    let cache = make_random_labels(&data, Granularity::Fine, UnitKind::Node, 10.0, 3);
    for inst in &data {
        for (c, ch) in inst.choices.iter().enumerate() {
            let recs = cache.get(&inst.id, c).unwrap();
            assert_eq!(recs.len(), ch.kg.nodes.len());
            assert_eq!(
                recs.iter().filter(|r| r.positive()).count(),
                topk_count(recs.len(), 10.0)
            );
        }
    }
}

fn kg_with(types: &[NodeType], edges: &[(u32, u32)], paths: Vec<Vec<usize>>) -> ContextKg {
    ContextKg {
        nodes: types
            .iter()
            .enumerate()
            .map(|(i, &kind)| Node {
                id: i as u32,
                label: format!("c{i}"),
                kind,
            })
            .collect(),
        relations: vec!["r0".into()],
        edges: edges.iter().map(|&(h, t)| Edge::from((h, 0, t))).collect(),
        paths: paths.into_iter().map(|edges| KgPath { edges }).collect(),
    }
}

#[test]
fn heuristic_rules() {
    use NodeType::*;
    let kg = kg_with(
        &[Question, Question, Answer, Answer, Answer, Intermediate],
        &[(0, 2), (1, 5), (5, 3)],
        vec![vec![0], vec![1, 2]],
    );
    assert_eq!(kg.qa_node_count(), 5);
    assert!(heuristic_fine(&kg, Unit::Path(0)));
    assert!(!heuristic_fine(&kg, Unit::Path(1)));
    assert!(heuristic_fine(&kg, Unit::Node(0)));
    assert!(!heuristic_fine(&kg, Unit::Node(5)));

    let inst = QaInstance {
        id: "h".into(),
        question: vec!["w".into()],
        choices: vec![
            AnswerChoice {
                text: vec!["a".into()],
                kg: kg.clone(),
            },
            AnswerChoice {
                text: vec!["b".into()],
                kg: kg_with(
                    &[Question, Intermediate, Answer],
                    &[(0, 1), (1, 2)],
                    vec![vec![0, 1]],
                ),
            },
        ],
        target_index: 0,
    };
    let data = vec![inst];
    let coarse = make_heuristic_labels(&data, Granularity::Coarse, UnitKind::Path, 3.0);
    assert!(coarse.coarse_label("h", 0).unwrap());
    assert!(!coarse.coarse_label("h", 1).unwrap());
    let fine = make_heuristic_labels(&data, Granularity::Fine, UnitKind::Path, 3.0);
    assert_eq!(fine.mask("h", 0).unwrap(), vec![1.0, 0.0]);
    // No path qualifies: every path becomes positive.
    assert_eq!(fine.mask("h", 1).unwrap(), vec![1.0]);
    assert!((mean_qa_nodes(&data) - 3.5).abs() < 1e-12);
}

#[test]
fn hard_prune_matches_masked_attention() {
    let data = splits(20).train;
    let vocab = Vocab::build(&data);
    let kg = Model::new(ModelConfig::kg(EncoderStyle::PathAttn, 8), vocab, 1).unwrap();

    let all = make_random_labels(&data, Granularity::Fine, UnitKind::Path, 100.0, 0);
    assert_eq!(hard_prune(&data, &all).unwrap(), data);

    let one = make_random_labels(&data, Granularity::Fine, UnitKind::Path, 1.0, 0);
    let pruned = hard_prune(&data, &one).unwrap();
    assert!(pruned
        .iter()
        .flat_map(|i| &i.choices)
        .all(|c| c.kg.paths.len() == 1));

    let some = make_random_labels(&data, Granularity::Fine, UnitKind::Path, 40.0, 5);
    let pruned = hard_prune(&data, &some).unwrap();
    let masks = fine_masks(&some, &data).unwrap();
    for (i, (raw, cut)) in data.iter().zip(&pruned).enumerate() {
        let masked = kg.probs(&kg.encode(raw), Some(&masks[i])).unwrap();
        let physical = kg.probs(&kg.encode(cut), None).unwrap();
        for (a, b) in masked.iter().zip(&physical) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn mean_ensemble_of_a_model_with_itself() {
    let data = splits(12).train;
    let m = Model::new(ModelConfig::no_kg(8), Vocab::build(&data), 1).unwrap();
    let ens = mean_ensemble_eval(&m, &m, &data).unwrap();
    let alone = probs_of(&m, &data, None).unwrap();
    for (a, b) in ens.values.iter().zip(&alone) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_lambda_fine_training_equals_plain_training() {
    let s = splits(40);
    let vocab = Vocab::build(&s.train);
    let cfg = ModelConfig::kg(EncoderStyle::PathAttn, 8);
    let cache = make_random_labels(&s.train, Granularity::Fine, UnitKind::Path, 10.0, 1);
    let (a, la) = train_salkg_fine(
        &cfg,
        &vocab,
        Some(&cache),
        &s.train,
        &s.dev,
        0.0,
        SalLoss::Kl,
        9,
        &quick(),
    )
    .unwrap();
    let mut plain = Model::new(cfg, vocab, 9).unwrap();
    let (tr, dv) = (plain.encode_all(&s.train), plain.encode_all(&s.dev));
    let lp = train_task_model(&mut plain, &tr, &dv, &LossSpec::default(), &quick()).unwrap();
    assert_eq!(la, lp);
    assert_eq!(a.params, plain.params);
}

#[test]
fn supervised_attention_moves_towards_labels() {
    let s = splits(40);
    let vocab = Vocab::build(&s.train);
    let cfg = ModelConfig::kg(EncoderStyle::PathAttn, 8);
    let cache = make_random_labels(&s.train, Granularity::Fine, UnitKind::Path, 10.0, 1);
    let masks = fine_masks(&cache, &s.train).unwrap();
    let mass = |m: &Model| {
        let mut total = 0.0;
        for (i, inst) in m.encode_all(&s.train).iter().enumerate() {
            let out = m.forward(inst, None).unwrap();
            for (a, y) in out.attention.iter().zip(&masks[i]) {
                total += a.iter().zip(y).map(|(a, y)| a * y).sum::<f64>();
            }
        }
        total
    };
    let tcfg = TrainConfig {
        max_epochs: 8,
        patience: 8,
        ..quick()
    };
    let (plain, _) = train_salkg_fine(
        &cfg,
        &vocab,
        None,
        &s.train,
        &s.dev,
        0.0,
        SalLoss::Kl,
        2,
        &tcfg,
    )
    .unwrap();
    for kind in [SalLoss::Kl, SalLoss::Bce] {
        let (sup, _) = train_salkg_fine(
            &cfg,
            &vocab,
            Some(&cache),
            &s.train,
            &s.dev,
            10.0,
            kind,
            2,
            &tcfg,
        )
        .unwrap();
        assert!(mass(&sup) > mass(&plain), "{kind:?}");
    }
}

#[test]
fn coarse_gate_keeps_bases_frozen_and_fits_labels() {
    let s = splits(48);
    let vocab = Vocab::build(&s.train);
    let kg = Model::new(ModelConfig::kg(EncoderStyle::PathAttn, 8), vocab.clone(), 1).unwrap();
    let nokg = Model::new(ModelConfig::no_kg(8), vocab, 2).unwrap();
    let before = (params_hash(&kg.params), params_hash(&nokg.params));
    let cache = build_coarse_cache(&kg, &nokg, &s.train, 0.01).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 60,
        patience: 60,
        lr: 1e-2,
        ..quick()
    };
    let (gated, _) = train_salkg_coarse(
        &kg,
        &nokg,
        &cache,
        &s.train,
        &s.train,
        1e6,
        4,
        &GateConfig::default(),
        &tcfg,
    )
    .unwrap();
    assert_eq!(before, (params_hash(&kg.params), params_hash(&nokg.params)));
    let y = gated.gate_probs(&s.train).unwrap();
    let labels = cache.coarse_table(&s.train).unwrap();
    let err: f64 = y
        .iter()
        .flatten()
        .zip(labels.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (4 * s.train.len()) as f64;
    assert!(err < 0.1, "mean |ŷ − y| = {err}");
}

#[test]
fn gate_loss_without_saliency_is_pure_task_loss() {
    let params = crate::params::ParamSet::default();
    let mut tape = Tape::new(&params);
    let y = tape.input(vec![1.0, 1.0]);
    let l = gate_loss(&mut tape, y, &[0.7, 0.3], &[0.2, 0.8], 0, &[1.0, 0.0], 0.0);
    assert!((tape.scalar(l) + 0.7f64.ln()).abs() < 1e-15);
}
