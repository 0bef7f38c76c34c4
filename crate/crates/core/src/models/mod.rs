//! Desk-scale No-KG and KG-augmented QA models.
//!
//! Text encoder: token embeddings, mean pooling, two feed-forward layers.
//! Graph encoders expose one of two fine unit kinds:
//! * `PathAttn`: a path is the sum of its head, tail and relation embeddings
//!   (the intermediate node of a 2-hop path is skipped) mapped through a
//!   tanh layer.
//! * `NodeAttn`: one relation-aware neighbourhood aggregation layer.
//!
//! Units are pooled by text-conditioned bilinear attention whose weights can
//! be masked and renormalized. The task head scores `x ⊕ g` (or `x` alone).

mod checkpoint;
mod encode;
mod task;
mod train;

pub use checkpoint::{params_hash, Checkpoint};
pub use encode::{EncodedChoice, EncodedInstance, EncodedUnit, Vocab};
pub use task::{
    predict_probs, task_accuracy, train_task_model, LossSpec, SalLoss, SaliencyTerm, UnitTable,
};
pub use train::{train, LogRow, TrainConfig, TrainOutcome};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::UnitKind;
use crate::params::{ParamId, ParamSet, Tensor};
use crate::synthdata::mix_seed;
use crate::tape::{softmax, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderStyle {
    NodeAttn,
    PathAttn,
}

impl EncoderStyle {
    pub fn unit_kind(self) -> UnitKind {
        match self {
            EncoderStyle::NodeAttn => UnitKind::Node,
            EncoderStyle::PathAttn => UnitKind::Path,
        }
    }
}

/// What the model outputs per choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Plausibility score, softmaxed over the question's choices.
    Task,
    /// Sigmoid probability that the KG helps on this choice.
    GateSigmoid,
    /// Same probability read off a 2-way softmax.
    GateSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `None` builds the No-KG model.
    pub graph: Option<EncoderStyle>,
    pub dim: usize,
    pub hidden: usize,
    pub relational_layer: bool,
    pub dropout: f64,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            graph: Some(EncoderStyle::PathAttn),
            dim: 64,
            hidden: 64,
            relational_layer: true,
            dropout: 0.0,
            head: Head::Task,
        }
    }
}

impl ModelConfig {
    pub fn no_kg(dim: usize) -> Self {
        ModelConfig {
            graph: None,
            dim,
            hidden: dim,
            ..Default::default()
        }
    }

    pub fn kg(style: EncoderStyle, dim: usize) -> Self {
        ModelConfig {
            graph: Some(style),
            dim,
            hidden: dim,
            ..Default::default()
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn unit_kind(&self) -> Option<UnitKind> {
        self.graph.map(EncoderStyle::unit_kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    tok: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    concept: Option<ParamId>,
    rel: Option<ParamId>,
    w_unit: Option<ParamId>,
    b_unit: Option<ParamId>,
    w_nbr: Option<ParamId>,
    w_att: Option<ParamId>,
    w_h: ParamId,
    b_h: ParamId,
    w_o: ParamId,
    b_o: ParamId,
}

impl Ids {
    fn lookup(ps: &ParamSet) -> Result<Self> {
        let req = |n: &str| {
            ps.id(n)
                .ok_or_else(|| Error::Mismatch(format!("parameter {n} missing")))
        };
        Ok(Ids {
            tok: req("tok")?,
            w1: req("text.w1")?,
            b1: req("text.b1")?,
            w2: req("text.w2")?,
            b2: req("text.b2")?,
            concept: ps.id("concept"),
            rel: ps.id("rel"),
            w_unit: ps.id("graph.w_unit"),
            b_unit: ps.id("graph.b_unit"),
            w_nbr: ps.id("graph.w_nbr"),
            w_att: ps.id("graph.w_att"),
            w_h: req("pred.w_h")?,
            b_h: req("pred.b_h")?,
            w_o: req("pred.w_o")?,
            b_o: req("pred.b_o")?,
        })
    }
}

/// A model: configuration, vocabulary and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub params: ParamSet,
    ids: Ids,
}

/// Options of one forward pass over a question.
#[derive(Default)]
pub struct ForwardOpts<'a> {
    /// Per-choice attention masks.
    pub masks: Option<&'a [Vec<f64>]>,
    /// Replace an all-zero mask (or a unit-less KG) by a zero graph embedding
    /// instead of failing.
    pub degenerate_fallback: bool,
    /// Choice whose graph embedding is replaced by the zero vector.
    pub zero_graph: Option<usize>,
    /// Additive offset on the embedding of one unit: (choice, unit, delta).
    pub perturb: Option<(usize, usize, &'a [f64])>,
    /// Dropout stream; dropout is active only when set.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

/// Tape handles for one unit.
pub struct UnitVars {
    /// The unit embedding that saliency differentiates against: the node
    /// embedding, or the summed constituents of a path.
    pub embedding: Var,
    /// Individual embedding rows the unit is built from.
    pub constituents: Vec<Var>,
    pub h: Var,
}

pub struct ChoiceVars {
    pub x: Var,
    pub units: Vec<UnitVars>,
    pub alpha: Option<Var>,
    pub g: Option<Var>,
    /// Plausibility (task head), gate logit, or 2-way gate logits.
    pub out: Var,
    pub degenerate: bool,
}

pub struct QuestionVars {
    pub choices: Vec<ChoiceVars>,
    /// Stacked per-choice plausibility scores (task head only).
    pub rho: Option<Var>,
}

/// Per-question output of a task model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
    /// Attention per choice; empty for the No-KG model.
    pub attention: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417));
        let (d, h) = (config.dim, config.hidden);
        let mut ps = ParamSet::default();
        ps.add("tok", Tensor::uniform(vocab.tokens.len(), d, 0.5, &mut rng));
        ps.add("text.w1", Tensor::glorot(d, d, &mut rng));
        ps.add("text.b1", Tensor::zeros(1, d));
        ps.add("text.w2", Tensor::glorot(d, d, &mut rng));
        ps.add("text.b2", Tensor::zeros(1, d));
        let fused = if let Some(style) = config.graph {
            ps.add(
                "concept",
                Tensor::uniform(vocab.concepts.len(), d, 0.5, &mut rng),
            );
            ps.add(
                "rel",
                Tensor::uniform(vocab.relations.len(), d, 0.5, &mut rng),
            );
            ps.add("graph.w_unit", Tensor::glorot(d, d, &mut rng));
            ps.add("graph.b_unit", Tensor::zeros(1, d));
            if style == EncoderStyle::NodeAttn && config.relational_layer {
                ps.add("graph.w_nbr", Tensor::glorot(d, d, &mut rng));
            }
            ps.add("graph.w_att", Tensor::glorot(d, d, &mut rng));
            2 * d
        } else {
            d
        };
        ps.add("pred.w_h", Tensor::glorot(h, fused, &mut rng));
        ps.add("pred.b_h", Tensor::zeros(1, h));
        let n_out = if config.head == Head::GateSoftmax {
            2
        } else {
            1
        };
        ps.add("pred.w_o", Tensor::glorot(n_out, h, &mut rng));
        ps.add("pred.b_o", Tensor::zeros(1, n_out));
        let ids = Ids::lookup(&ps)?;
        Ok(Model {
            config,
            vocab,
            seed,
            params: ps,
            ids,
        })
    }

    /// Rebuilds a model around existing parameters.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        seed: u64,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        let ids = Ids::lookup(&params)?;
        let fresh = Model::new(config.clone(), vocab.clone(), seed)?;
        for name in fresh.params.names() {
            let (a, b) = (
                fresh.params.get(fresh.params.id(name).unwrap()),
                params.id(name).map(|i| params.get(i)),
            );
            match b {
                Some(b) if a.rows == b.rows && a.cols == b.cols => {}
                _ => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name} has the wrong shape"
                    )))
                }
            }
        }
        Ok(Model {
            config,
            vocab,
            seed,
            params,
            ids,
        })
    }

    pub fn is_kg(&self) -> bool {
        self.config.graph.is_some()
    }

    pub fn unit_kind(&self) -> Option<UnitKind> {
        self.config.unit_kind()
    }

    /// Copies every same-named, same-shaped parameter from `other`, except
    /// the output layer.
    pub fn warm_start_from(&mut self, other: &Model) {
        for name in self.params.names().to_vec() {
            if name.starts_with("pred.w_o") || name.starts_with("pred.b_o") {
                continue;
            }
            let (Some(dst), Some(src)) = (self.params.id(&name), other.params.id(&name)) else {
                continue;
            };
            let src = other.params.get(src).clone();
            let dst = self.params.get_mut(dst);
            if dst.rows == src.rows && dst.cols == src.cols {
                *dst = src;
            }
        }
    }

    pub fn encode(&self, inst: &crate::datamodel::QaInstance) -> EncodedInstance {
        self.vocab.encode(inst, self.config.graph)
    }

    pub fn encode_all(&self, data: &[crate::datamodel::QaInstance]) -> Vec<EncodedInstance> {
        data.iter().map(|i| self.encode(i)).collect()
    }

    /// Statement embedding `x`.
    pub fn encode_text(&self, tape: &mut Tape, tokens: &[usize]) -> Var {
        let ids = &self.ids;
        let rows: Vec<Var> = tokens.iter().map(|&t| tape.row(ids.tok, t)).collect();
        let pooled = if rows.is_empty() {
            tape.input(vec![0.0; self.config.dim])
        } else {
            let s = tape.sum(&rows);
            tape.scale(s, 1.0 / rows.len() as f64)
        };
        let h = tape.linear(ids.w1, Some(ids.b1), pooled);
        let h = tape.tanh(h);
        tape.linear(ids.w2, Some(ids.b2), h)
    }

    /// Unit representations of one choice's KG.
    fn encode_units(
        &self,
        tape: &mut Tape,
        choice: &EncodedChoice,
        perturb: Option<(usize, &[f64])>,
    ) -> Vec<UnitVars> {
        let ids = &self.ids;
        let (concept, rel) = (ids.concept.unwrap(), ids.rel.unwrap());
        let (w_unit, b_unit) = (ids.w_unit.unwrap(), ids.b_unit.unwrap());
        let offset = |tape: &mut Tape, i: usize, v: Var| match perturb {
            Some((j, d)) if j == i => tape.add_const(v, d),
            _ => v,
        };
        match self.config.graph.unwrap() {
            EncoderStyle::PathAttn => choice
                .units
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let EncodedUnit::Path { head, rels, tail } = u else {
                        unreachable!("path encoder on node units")
                    };
                    let mut constituents = vec![tape.row(concept, *head)];
                    constituents.extend(rels.iter().map(|&r| tape.row(rel, r)));
                    constituents.push(tape.row(concept, *tail));
                    let s = tape.sum(&constituents);
                    let s = offset(tape, i, s);
                    let h = tape.linear(w_unit, Some(b_unit), s);
                    let h = tape.tanh(h);
                    UnitVars {
                        embedding: s,
                        constituents,
                        h,
                    }
                })
                .collect(),
            EncoderStyle::NodeAttn => {
                let emb: Vec<Var> = choice
                    .units
                    .iter()
                    .enumerate()
                    .map(|(i, u)| {
                        let EncodedUnit::Node { concept: c, .. } = u else {
                            unreachable!("node encoder on path units")
                        };
                        let r = tape.row(concept, *c);
                        offset(tape, i, r)
                    })
                    .collect();
                choice
                    .units
                    .iter()
                    .enumerate()
                    .map(|(i, u)| {
                        let EncodedUnit::Node { neighbours, .. } = u else {
                            unreachable!()
                        };
                        let self_part = tape.linear(w_unit, Some(b_unit), emb[i]);
                        let pre = match ids.w_nbr {
                            Some(w_nbr) if !neighbours.is_empty() => {
                                let msgs: Vec<Var> = neighbours
                                    .iter()
                                    .map(|&(n, r)| {
                                        let rv = tape.row(rel, r);
                                        tape.add(emb[n], rv)
                                    })
                                    .collect();
                                let m = tape.sum(&msgs);
                                let m = tape.scale(m, 1.0 / msgs.len() as f64);
                                let m = tape.linear(w_nbr, None, m);
                                tape.add(self_part, m)
                            }
                            _ => self_part,
                        };
                        let h = tape.tanh(pre);
                        UnitVars {
                            embedding: emb[i],
                            constituents: vec![emb[i]],
                            h,
                        }
                    })
                    .collect()
            }
        }
    }

    /// Graph embedding and attention of one choice. Returns
    /// `Err(DegenerateMask)` when the mask removes every unit.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        choice: &EncodedChoice,
        x: Var,
        mask: Option<&[f64]>,
        perturb: Option<(usize, &[f64])>,
    ) -> Result<(Vec<UnitVars>, Var, Var)> {
        let units = self.encode_units(tape, choice, perturb);
        if let Some(m) = mask {
            if m.len() != units.len() {
                return Err(Error::Mismatch(format!(
                    "mask has {} weights for {} units",
                    m.len(),
                    units.len()
                )));
            }
        }
        if units.is_empty() {
            return Err(Error::DegenerateMask);
        }
        let q = tape.linear(self.ids.w_att.unwrap(), None, x);
        let inv = 1.0 / (self.config.dim as f64).sqrt();
        let scores: Vec<Var> = units
            .iter()
            .map(|u| {
                let d = tape.dot(q, u.h);
                tape.scale(d, inv)
            })
            .collect();
        let scores = tape.stack(&scores);
        let alpha = match mask {
            Some(m) => tape
                .masked_softmax(scores, m)
                .ok_or(Error::DegenerateMask)?,
            None => tape.softmax(scores),
        };
        let hs: Vec<Var> = units.iter().map(|u| u.h).collect();
        let g = tape.weighted_sum(alpha, &hs);
        Ok((units, alpha, g))
    }

    /// Builds the full tape for a question.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        inst: &EncodedInstance,
        opts: &mut ForwardOpts,
    ) -> Result<QuestionVars> {
        let ids = self.ids;
        let d = self.config.dim;
        let mut choices = Vec::with_capacity(inst.choices.len());
        for (c, ch) in inst.choices.iter().enumerate() {
            let x = self.encode_text(tape, &ch.tokens);
            let (units, alpha, g, degenerate) = if self.is_kg() {
                let mask = opts.masks.map(|m| m[c].as_slice());
                let perturb = opts
                    .perturb
                    .and_then(|(pc, u, delta)| (pc == c).then_some((u, delta)));
                match self.encode_graph(tape, ch, x, mask, perturb) {
                    Ok((units, alpha, g)) => (units, Some(alpha), Some(g), false),
                    Err(Error::DegenerateMask) if opts.degenerate_fallback => {
                        (Vec::new(), None, Some(tape.input(vec![0.0; d])), true)
                    }
                    Err(e) => return Err(e),
                }
            } else {
                (Vec::new(), None, None, false)
            };
            let fused = match g {
                Some(g) => {
                    let g_in = if opts.zero_graph == Some(c) {
                        tape.input(vec![0.0; d])
                    } else {
                        g
                    };
                    tape.concat(&[x, g_in])
                }
                None => x,
            };
            let fused = match (&mut opts.dropout_rng, self.config.dropout) {
                (Some(rng), p) if p > 0.0 => {
                    let n = tape.value(fused).len();
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..n)
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    tape.mul_const(fused, m)
                }
                _ => fused,
            };
            let z = tape.linear(ids.w_h, Some(ids.b_h), fused);
            let z = tape.tanh(z);
            let out = tape.linear(ids.w_o, Some(ids.b_o), z);
            choices.push(ChoiceVars {
                x,
                units,
                alpha,
                g,
                out,
                degenerate,
            });
        }
        let rho = (self.config.head == Head::Task).then(|| {
            let outs: Vec<Var> = choices.iter().map(|c| c.out).collect();
            tape.stack(&outs)
        });
        Ok(QuestionVars { choices, rho })
    }

    /// Evaluation-mode forward pass of a task model.
    pub fn forward(
        &self,
        inst: &EncodedInstance,
        masks: Option<&[Vec<f64>]>,
    ) -> Result<ModelOutput> {
        let mut tape = Tape::new(&self.params);
        let mut opts = ForwardOpts {
            masks,
            ..Default::default()
        };
        let q = self.forward_tape(&mut tape, inst, &mut opts)?;
        Ok(self.output(&tape, &q))
    }

    pub fn output(&self, tape: &Tape, q: &QuestionVars) -> ModelOutput {
        let rho = tape.value(q.rho.expect("task head")).to_vec();
        let p = softmax(&rho, None);
        let attention = q
            .choices
            .iter()
            .map(|c| c.alpha.map_or_else(Vec::new, |a| tape.value(a).to_vec()))
            .collect();
        ModelOutput { rho, p, attention }
    }

    /// Per-choice probabilities of a task model.
    pub fn probs(&self, inst: &EncodedInstance, masks: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        Ok(self.forward(inst, masks)?.p)
    }

    /// Per-choice usefulness probabilities of a gate model.
    pub fn gate_probs(&self, inst: &EncodedInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let q = self.forward_tape(&mut tape, inst, &mut ForwardOpts::default())?;
        let mut out = Vec::with_capacity(q.choices.len());
        for c in &q.choices {
            let v = gate_value(&mut tape, self.config.head, c.out);
            out.push(tape.scalar(v));
        }
        Ok(out)
    }
}

/// Usefulness probability var from a gate output.
pub fn gate_value(tape: &mut Tape, head: Head, out: Var) -> Var {
    match head {
        Head::GateSigmoid => {
            let s = tape.sigmoid(out);
            tape.index(s, 0)
        }
        Head::GateSoftmax => {
            let s = tape.softmax(out);
            tape.index(s, 1)
        }
        Head::Task => panic!("task head has no usefulness output"),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
