//! Synthetic multi-choice QA with planted, controllable KG usefulness.
//!
//! Each instance is tagged KG_USEFUL, TEXT_USEFUL or NEITHER by an exact
//! partition of the split:
//!
//! * KG_USEFUL: every choice's KG contains a marked question node; only the
//!   correct choice's KG links it to a marked answer node through the signal
//!   relation. Some wrong choices carry a decoy (marked answer node linked by
//!   an ordinary relation). The question text is noise.
//! * TEXT_USEFUL: one question token equals the correct choice's text token.
//!   KGs are noise.
//! * NEITHER: target drawn at random; text and KGs are noise.
//!
//! Every instance draws from its own ChaCha stream keyed by (seed, split,
//! index), so generation is a pure function of the config.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_dataset, AnswerChoice, ContextKg, Edge, KgPath, Node, NodeType, QaInstance,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Usefulness {
    KgUseful,
    TextUseful,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_choices: usize,
    /// Noise tokens available to question text.
    pub vocab_size: usize,
    /// Tokens used as answer-choice text.
    pub answer_vocab: usize,
    pub question_len: usize,
    pub concept_vocab: usize,
    pub relation_vocab: usize,
    /// Distinct marked concepts.
    pub marker_vocab: usize,
    pub kg_nodes_range: (usize, usize),
    pub kg_paths_range: (usize, usize),
    pub rho_kg_useful: f64,
    pub rho_text_useful: f64,
    /// Probability that a wrong choice of a KG_USEFUL instance gets a decoy.
    pub decoy_rate: f64,
    /// Prefix of marked concept labels and label of the signal relation.
    pub signal_marker: String,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            n_choices: 4,
            vocab_size: 64,
            answer_vocab: 24,
            question_len: 4,
            concept_vocab: 120,
            relation_vocab: 12,
            marker_vocab: 8,
            kg_nodes_range: (4, 8),
            kg_paths_range: (3, 7),
            rho_kg_useful: 0.4,
            rho_text_useful: 0.4,
            decoy_rate: 0.5,
            signal_marker: "sig".to_string(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_choices < 2 {
            return fail("n_choices must be at least 2");
        }
        if self.answer_vocab < self.n_choices {
            return fail("answer_vocab must cover n_choices distinct answers");
        }
        if self.vocab_size == 0 || self.concept_vocab == 0 || self.relation_vocab == 0 {
            return fail("vocabularies must be non-empty");
        }
        if self.marker_vocab < 2 {
            return fail("marker_vocab must be at least 2");
        }
        if self.question_len == 0 {
            return fail("question_len must be positive");
        }
        let (nmin, nmax) = self.kg_nodes_range;
        let (pmin, pmax) = self.kg_paths_range;
        if nmin > nmax || pmin > pmax {
            return fail("ranges must satisfy min <= max");
        }
        if nmin < 2 {
            return fail("kg_nodes_range.min must be at least 2 (a question and an answer node)");
        }
        if pmin == 0 {
            return fail("kg_paths_range.min must be at least 1 (planted path required)");
        }
        if self.signal_marker.is_empty() {
            return fail("signal_marker must be non-empty");
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.rho_kg_useful)
            || !in_unit(self.rho_text_useful)
            || !in_unit(self.decoy_rate)
            || self.rho_kg_useful + self.rho_text_useful > 1.0 + 1e-12
        {
            return fail("rho_kg_useful + rho_text_useful must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn signal_relation(&self) -> &str {
        &self.signal_marker
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: Vec<QaInstance>,
    pub dev: Vec<QaInstance>,
    pub test: Vec<QaInstance>,
    /// Ground-truth usefulness; never shown to models.
    pub tags: BTreeMap<String, Usefulness>,
}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<SyntheticSplits> {
    cfg.validate()?;
    let mut tags = BTreeMap::new();
    let mut split = |name: &str, salt: u64, n: usize| {
        let kinds = partition(cfg, n, mix_seed(cfg.seed, salt ^ 0xFFFF));
        kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let id = format!("{name}-{i:05}");
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, salt), i as u64));
                tags.insert(id.clone(), kind);
                generate_instance(cfg, id, kind, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let train = split("train", 1, cfg.n_train);
    let dev = split("dev", 2, cfg.n_dev);
    let test = split("test", 3, cfg.n_test);
    Ok(SyntheticSplits {
        train,
        dev,
        test,
        tags,
    })
}

/// Exact counts per tag, in a seeded order.
fn partition(cfg: &GenConfig, n: usize, seed: u64) -> Vec<Usefulness> {
    let n_kg = (cfg.rho_kg_useful * n as f64).round() as usize;
    let n_text = ((cfg.rho_text_useful * n as f64).round() as usize).min(n - n_kg);
    let mut kinds: Vec<Usefulness> = std::iter::repeat_n(Usefulness::KgUseful, n_kg)
        .chain(std::iter::repeat_n(Usefulness::TextUseful, n_text))
        .chain(std::iter::repeat_n(Usefulness::Neither, n - n_kg - n_text))
        .collect();
    kinds.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    kinds
}

fn generate_instance(
    cfg: &GenConfig,
    id: String,
    kind: Usefulness,
    rng: &mut ChaCha8Rng,
) -> QaInstance {
    let target = rng.gen_range(0..cfg.n_choices);
    let answers: Vec<usize> =
        rand::seq::index::sample(rng, cfg.answer_vocab, cfg.n_choices).into_vec();

    let mut question: Vec<String> = (0..cfg.question_len)
        .map(|_| format!("w{}", rng.gen_range(0..cfg.vocab_size)))
        .collect();
    if kind == Usefulness::TextUseful {
        let pos = rng.gen_range(0..cfg.question_len);
        question[pos] = format!("t{}", answers[target]);
    }

    // Question concepts are shared by every choice's KG.
    let (nmin, nmax) = cfg.kg_nodes_range;
    let n_question = if nmin >= 4 { rng.gen_range(1..=2) } else { 1 };
    let mut question_labels: Vec<String> = (0..n_question)
        .map(|_| format!("c{}", rng.gen_range(0..cfg.concept_vocab)))
        .collect();
    let planted = kind == Usefulness::KgUseful;
    if planted {
        question_labels[0] = format!(
            "{}{}",
            cfg.signal_marker,
            rng.gen_range(0..cfg.marker_vocab / 2)
        );
    }

    let choices = (0..cfg.n_choices)
        .map(|c| {
            let mark = if !planted {
                AnswerMark::None
            } else if c == target {
                AnswerMark::Signal
            } else if rng.gen_bool(cfg.decoy_rate) {
                AnswerMark::Decoy
            } else {
                AnswerMark::None
            };
            let n_nodes = rng.gen_range(nmin..=nmax);
            AnswerChoice {
                text: vec![format!("t{}", answers[c])],
                kg: build_kg(cfg, &question_labels, n_nodes, mark, rng),
            }
        })
        .collect();

    QaInstance {
        id,
        question,
        choices,
        target_index: target,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AnswerMark {
    None,
    Signal,
    Decoy,
}

struct KgBuilder {
    kg: ContextKg,
    rel_index: HashMap<String, usize>,
    edge_index: HashMap<Edge, usize>,
    seen_paths: BTreeSet<Vec<usize>>,
}

impl KgBuilder {
    fn relation(&mut self, label: &str) -> usize {
        if let Some(&i) = self.rel_index.get(label) {
            return i;
        }
        self.kg.relations.push(label.to_string());
        self.rel_index
            .insert(label.to_string(), self.kg.relations.len() - 1);
        self.kg.relations.len() - 1
    }

    fn edge(&mut self, head: u32, rel: &str, tail: u32) -> usize {
        let relation = self.relation(rel);
        let e = Edge {
            head,
            relation,
            tail,
        };
        if let Some(&i) = self.edge_index.get(&e) {
            return i;
        }
        self.kg.edges.push(e);
        self.edge_index.insert(e, self.kg.edges.len() - 1);
        self.kg.edges.len() - 1
    }

    fn path(&mut self, edges: Vec<usize>) -> bool {
        if self.seen_paths.insert(edges.clone()) {
            self.kg.paths.push(KgPath { edges });
            true
        } else {
            false
        }
    }
}

fn build_kg(
    cfg: &GenConfig,
    question_labels: &[String],
    n_nodes: usize,
    mark: AnswerMark,
    rng: &mut ChaCha8Rng,
) -> ContextKg {
    let n_question = question_labels.len();
    let n_answer = if n_nodes >= n_question + 3 && rng.gen_bool(0.5) {
        2
    } else {
        1
    };
    let n_inter = n_nodes - n_question - n_answer;

    let mut b = KgBuilder {
        kg: ContextKg {
            nodes: Vec::with_capacity(n_nodes),
            relations: Vec::new(),
            edges: Vec::new(),
            paths: Vec::new(),
        },
        rel_index: HashMap::new(),
        edge_index: HashMap::new(),
        seen_paths: BTreeSet::new(),
    };
    let push = |b: &mut KgBuilder, label: String, kind: NodeType| {
        let id = b.kg.nodes.len() as u32;
        b.kg.nodes.push(Node { id, label, kind });
        id
    };
    let q_ids: Vec<u32> = question_labels
        .iter()
        .map(|l| push(&mut b, l.clone(), NodeType::Question))
        .collect();
    let a_ids: Vec<u32> = (0..n_answer)
        .map(|i| {
            let label = if i == 0 && mark != AnswerMark::None {
                format!(
                    "{}{}",
                    cfg.signal_marker,
                    cfg.marker_vocab / 2
                        + rng.gen_range(0..cfg.marker_vocab - cfg.marker_vocab / 2)
                )
            } else {
                format!("c{}", rng.gen_range(0..cfg.concept_vocab))
            };
            push(&mut b, label, NodeType::Answer)
        })
        .collect();
    let i_ids: Vec<u32> = (0..n_inter)
        .map(|_| {
            push(
                &mut b,
                format!("c{}", rng.gen_range(0..cfg.concept_vocab)),
                NodeType::Intermediate,
            )
        })
        .collect();

    let (pmin, pmax) = cfg.kg_paths_range;
    let n_paths = rng.gen_range(pmin..=pmax);
    let noise_rel = |rng: &mut ChaCha8Rng| format!("r{}", rng.gen_range(0..cfg.relation_vocab));

    // Planted path first in construction order, then shuffled below.
    match mark {
        AnswerMark::Signal => {
            let e = b.edge(q_ids[0], cfg.signal_relation(), a_ids[0]);
            b.path(vec![e]);
        }
        AnswerMark::Decoy => {
            let r = noise_rel(rng);
            let e = b.edge(q_ids[0], &r, a_ids[0]);
            b.path(vec![e]);
        }
        AnswerMark::None => {}
    }

    let mut attempts = 0;
    while b.kg.paths.len() < n_paths && attempts < 50 {
        attempts += 1;
        let q = q_ids[rng.gen_range(0..q_ids.len())];
        let a = a_ids[rng.gen_range(0..a_ids.len())];
        let two_hop = !i_ids.is_empty() && rng.gen_bool(0.6);
        if two_hop {
            let m = i_ids[rng.gen_range(0..i_ids.len())];
            let (r1, r2) = (noise_rel(rng), noise_rel(rng));
            let e1 = b.edge(q, &r1, m);
            let e2 = b.edge(m, &r2, a);
            b.path(vec![e1, e2]);
        } else {
            let r = noise_rel(rng);
            let e = b.edge(q, &r, a);
            b.path(vec![e]);
        }
    }
    b.kg.paths.shuffle(rng);
    b.kg
}

/// True iff every node label and relation label on the path carries the marker.
pub fn is_signal_path(kg: &ContextKg, path: &KgPath, marker: &str) -> bool {
    let nodes_marked = kg
        .path_nodes(path)
        .iter()
        .all(|&n| kg.nodes[n as usize].label.starts_with(marker));
    let rels_marked = path
        .edges
        .iter()
        .all(|&e| kg.relations[kg.edges[e].relation] == marker);
    nodes_marked && rels_marked
}

/// Reads a JSON-lines dataset; every instance is validated.
pub fn ingest_jsonl(path: &FsPath) -> Result<Vec<QaInstance>> {
    read_dataset(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PerturbMode {
    Relation,
    Node,
}

/// One global seeded permutation over a label vocabulary (sorted before
/// shuffling, so the result depends only on the label set and the seed).
pub fn label_permutation<'a>(
    labels: impl IntoIterator<Item = &'a str>,
    seed: u64,
) -> BTreeMap<String, String> {
    let vocab: Vec<String> = labels
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let mut shuffled = vocab.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    vocab.into_iter().zip(shuffled).collect()
}

/// Applies a dataset-wide permutation of relation or concept labels. Graph
/// topology (nodes, edge endpoints, paths) is untouched.
pub fn perturb_kg(instances: &[QaInstance], mode: PerturbMode, seed: u64) -> Vec<QaInstance> {
    let kgs = || {
        instances
            .iter()
            .flat_map(|i| i.choices.iter().map(|c| &c.kg))
    };
    let perm = match mode {
        PerturbMode::Relation => label_permutation(
            kgs().flat_map(|kg| kg.relations.iter().map(String::as_str)),
            seed,
        ),
        PerturbMode::Node => label_permutation(
            kgs().flat_map(|kg| kg.nodes.iter().map(|n| n.label.as_str())),
            seed,
        ),
    };
    instances
        .iter()
        .map(|inst| {
            let mut inst = inst.clone();
            for choice in &mut inst.choices {
                match mode {
                    PerturbMode::Relation => {
                        for r in &mut choice.kg.relations {
                            *r = perm[r.as_str()].clone();
                        }
                    }
                    PerturbMode::Node => {
                        for n in &mut choice.kg.nodes {
                            n.label = perm[n.label.as_str()].clone();
                        }
                    }
                }
            }
            inst
        })
        .collect()
}

/// Seeded nested subsample: the kept set is a prefix of one fixed shuffle,
/// so smaller fractions are subsets of larger ones. Original order is kept.
pub fn subsample_train(train: &[QaInstance], fraction: f64, seed: u64) -> Result<Vec<QaInstance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} not in (0, 1]")));
    }
    let keep = (fraction * train.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5AB5)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| train[i].clone()).collect())
}
