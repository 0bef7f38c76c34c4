//! Minimal reverse-mode automatic differentiation over f64 vectors.
//!
//! Every value on the tape is a dense vector (scalars have length 1).
//! Matrices only appear as parameters, read through [`Op::Row`] (embedding
//! lookup) and [`Op::Linear`]. Backward accumulates parameter gradients into a
//! [`ParamGrads`] buffer and returns per-node gradients, which is how
//! gradient×input saliency reads `∂p/∂u` for unit embeddings.

use crate::params::{ParamGrads, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Row {
        param: ParamId,
        row: usize,
    },
    Linear {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Add(Var, Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    SumElems(Var),
    /// Softmax restricted to units with nonzero mask, renormalized.
    Softmax(Var),
    LogSoftmax(Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    Ln(Var),
    /// Σ t (ln t − ln p) over t > 0.
    KlFromTarget {
        p: Var,
        target: Vec<f64>,
    },
    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    BceProb {
        p: Var,
        target: Vec<f64>,
    },
    /// Mean binary cross-entropy of logits against 0/1 targets.
    BceLogits {
        z: Var,
        target: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

const PROB_FLOOR: f64 = 1e-300;

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Gradients of every tape node with respect to the backward root.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient of a node; zeros if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn row(&mut self, param: ParamId, row: usize) -> Var {
        let value = self.params.get(param).row(row).to_vec();
        self.push(Op::Row { param, row }, value)
    }

    /// `W x + b` with `W` stored row-major as (out × in).
    pub fn linear(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(wt.cols, xv.len());
        let mut out: Vec<f64> = (0..wt.rows).map(|r| dot(wt.row(r), xv)).collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(&self.params.get(b).data) {
                *o += bv;
            }
        }
        self.push(Op::Linear { w, b, x }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sum(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "sum of no vectors");
        let mut v = self.value(items[0]).to_vec();
        for &it in &items[1..] {
            for (a, b) in v.iter_mut().zip(&self.nodes[it.0].value) {
                *a += b;
            }
        }
        self.push(Op::Sum(items.to_vec()), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), v)
    }

    /// `a + c` for a constant vector `c` (gradient passes through).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let v = zip_map(self.value(a), c, |x, y| x + y);
        self.push(Op::AddConst(a), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let v = zip_map(self.value(a), &c, |x, y| x * y);
        self.push(Op::MulConst(a, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = dot(self.value(a), self.value(b));
        self.push(Op::Dot(a, b), vec![v])
    }

    pub fn concat(&mut self, items: &[Var]) -> Var {
        let v = items
            .iter()
            .flat_map(|&i| self.nodes[i.0].value.iter().copied())
            .collect();
        self.push(Op::Concat(items.to_vec()), v)
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Var {
        let v = items.iter().map(|&i| self.nodes[i.0].value[0]).collect();
        self.push(Op::Stack(items.to_vec()), v)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a)[i];
        self.push(Op::Index(a, i), vec![v])
    }

    pub fn sum_elems(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        self.push(Op::SumElems(a), vec![v])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a), None);
        self.push(Op::Softmax(a), v)
    }

    /// Softmax over units whose mask weight is nonzero, scaled by the mask
    /// and renormalized; masked units get exactly zero. `None` if every
    /// weight is zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[f64]) -> Option<Var> {
        if mask.iter().all(|&m| m == 0.0) {
            return None;
        }
        let v = softmax(self.value(a), Some(mask));
        // Masked softmax has the same Jacobian form as softmax in terms of
        // its output (masked entries are constant zero).
        Some(self.push(Op::Softmax(a), v))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let v = x.iter().map(|v| v - lse).collect();
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = &self.nodes[weights.0].value;
        debug_assert_eq!(w.len(), items.len());
        let dim = self.nodes[items[0].0].value.len();
        let mut v = vec![0.0; dim];
        for (&wi, &it) in w.iter().zip(items) {
            if wi != 0.0 {
                for (o, x) in v.iter_mut().zip(&self.nodes[it.0].value) {
                    *o += wi * x;
                }
            }
        }
        self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            v,
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .iter()
            .map(|x| x.max(PROB_FLOOR).ln())
            .collect();
        self.push(Op::Ln(a), v)
    }

    pub fn kl_from_target(&mut self, p: Var, target: Vec<f64>) -> Var {
        let v = self
            .value(p)
            .iter()
            .zip(&target)
            .filter(|(_, &t)| t > 0.0)
            .map(|(&pv, &t)| t * (t.ln() - pv.max(PROB_FLOOR).ln()))
            .sum();
        self.push(Op::KlFromTarget { p, target }, vec![v])
    }

    pub fn bce_prob(&mut self, p: Var, target: Vec<f64>) -> Var {
        let n = target.len() as f64;
        let v = self
            .value(p)
            .iter()
            .zip(&target)
            .map(|(&pv, &t)| {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Op::BceProb { p, target }, vec![v])
    }

    pub fn bce_logits(&mut self, z: Var, target: Vec<f64>) -> Var {
        let n = target.len() as f64;
        let v = self
            .value(z)
            .iter()
            .zip(&target)
            .map(|(&zv, &t)| softplus(zv) - t * zv)
            .sum::<f64>()
            / n;
        self.push(Op::BceLogits { z, target }, vec![v])
    }

    /// Backpropagates from the scalar `root` with seed `d root = scale`.
    /// Parameter gradients are added into `param_grads` when given.
    pub fn backward(
        &self,
        root: Var,
        scale: f64,
        mut param_grads: Option<&mut ParamGrads>,
    ) -> NodeGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![scale; self.nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Row { param, row } => {
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let cols = self.params.get(*param).cols;
                        let dst = &mut pg.get_mut(*param)[row * cols..(row + 1) * cols];
                        axpy(dst, 1.0, &g);
                    }
                }
                Op::Linear { w, b, x } => {
                    let wt = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let dw = pg.get_mut(*w);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                axpy(&mut dw[r * wt.cols..(r + 1) * wt.cols], gr, xv);
                            }
                        }
                        if let Some(b) = b {
                            axpy(pg.get_mut(*b), 1.0, &g);
                        }
                    }
                    let mut dx = vec![0.0; wt.cols];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(&mut dx, gr, wt.row(r));
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sum(items) => {
                    for &it in items {
                        accumulate(&mut grads, it, &g);
                    }
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, &g),
                Op::Mul(a, b) => {
                    let da = zip_map(&g, &self.nodes[b.0].value, |x, y| x * y);
                    let db = zip_map(&g, &self.nodes[a.0].value, |x, y| x * y);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MulConst(a, c) => {
                    let d = zip_map(&g, c, |x, y| x * y);
                    accumulate(&mut grads, *a, &d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, &d);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da: Vec<f64> = bv.iter().map(|x| x * g[0]).collect();
                    let db: Vec<f64> = av.iter().map(|x| x * g[0]).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Concat(items) => {
                    let mut off = 0;
                    for &it in items {
                        let n = self.nodes[it.0].value.len();
                        accumulate(&mut grads, it, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Stack(items) => {
                    for (&it, &gi) in items.iter().zip(&g) {
                        accumulate(&mut grads, it, &[gi]);
                    }
                }
                Op::Index(a, k) => {
                    let mut d = vec![0.0; self.nodes[a.0].value.len()];
                    d[*k] = g[0];
                    accumulate(&mut grads, *a, &d);
                }
                Op::SumElems(a) => {
                    let d = vec![g[0]; self.nodes[a.0].value.len()];
                    accumulate(&mut grads, *a, &d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let d: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi * (gi - gy)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::LogSoftmax(a) => {
                    let gs: f64 = g.iter().sum();
                    let d: Vec<f64> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(l, gi)| gi - l.exp() * gs)
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::WeightedSum { weights, items } => {
                    let w = &self.nodes[weights.0].value;
                    let dw: Vec<f64> = items
                        .iter()
                        .map(|it| dot(&g, &self.nodes[it.0].value))
                        .collect();
                    for (&wi, &it) in w.iter().zip(items) {
                        if wi != 0.0 {
                            let d: Vec<f64> = g.iter().map(|x| x * wi).collect();
                            accumulate(&mut grads, it, &d);
                        }
                    }
                    accumulate(&mut grads, *weights, &dw);
                }
                Op::Ln(a) => {
                    let d = zip_map(&g, &self.nodes[a.0].value, |x, y| x / y.max(PROB_FLOOR));
                    accumulate(&mut grads, *a, &d);
                }
                Op::KlFromTarget { p, target } => {
                    let pv = &self.nodes[p.0].value;
                    let d: Vec<f64> = pv
                        .iter()
                        .zip(target)
                        .map(|(&pi, &t)| {
                            if t > 0.0 {
                                -g[0] * t / pi.max(PROB_FLOOR)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, &d);
                }
                Op::BceProb { p, target } => {
                    let n = target.len() as f64;
                    let pv = &self.nodes[p.0].value;
                    let d: Vec<f64> = pv
                        .iter()
                        .zip(target)
                        .map(|(&pi, &t)| {
                            if pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                                0.0
                            } else {
                                g[0] * (-(t / pi) + (1.0 - t) / (1.0 - pi)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, &d);
                }
                Op::BceLogits { z, target } => {
                    let n = target.len() as f64;
                    let zv = &self.nodes[z.0].value;
                    let d: Vec<f64> = zv
                        .iter()
                        .zip(target)
                        .map(|(&zi, &t)| g[0] * (sigmoid(zi) - t) / n)
                        .collect();
                    accumulate(&mut grads, *z, &d);
                }
            }
            grads[i] = Some(g);
        }
        NodeGrads { grads }
    }
}

const BCE_EPS: f64 = 1e-12;

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => axpy(g, 1.0, d),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax. With a mask, the max and the normalizer run
/// over units with nonzero weight only, in index order, so deleting a unit
/// and masking it produce identical values.
pub fn softmax(x: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    let keep = |i: usize| mask.is_none_or(|m| m[i] != 0.0);
    let m = x
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !keep(i) {
                return 0.0;
            }
            let e = (v - m).exp();
            match mask {
                Some(mk) => e * mk[i],
                None => e,
            }
        })
        .collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamSet, Tensor};

    fn params() -> (ParamSet, ParamId, ParamId, ParamId) {
        let mut ps = ParamSet::default();
        let w = ps.add(
            "w",
            Tensor::from_rows(&[&[0.3, -0.2, 0.5], &[0.1, 0.4, -0.7]]),
        );
        let b = ps.add("b", Tensor::from_rows(&[&[0.05, -0.1]]).reshape(1, 2));
        let e = ps.add(
            "e",
            Tensor::from_rows(&[&[0.2, 0.1, -0.3], &[-0.5, 0.6, 0.9]]),
        );
        (ps, w, b, e)
    }

    /// A scalar function exercising most ops, for finite-difference checks.
    fn build(tape: &mut Tape, w: ParamId, b: ParamId, e: ParamId, x: &[f64]) -> (Var, Var) {
        let xi = tape.input(x.to_vec());
        let r0 = tape.row(e, 0);
        let r1 = tape.row(e, 1);
        let s = tape.sum(&[xi, r0]);
        let h = tape.linear(w, Some(b), s);
        let h = tape.tanh(h);
        let h2 = tape.linear(w, None, r1);
        let h2 = tape.sigmoid(h2);
        let m = tape.mul(h, h2);
        let d0 = tape.dot(m, h);
        let d1 = tape.index(h2, 1);
        let scores = tape.stack(&[d0, d1]);
        let alpha = tape.softmax(scores);
        let g = tape.weighted_sum(alpha, &[h, h2]);
        let c = tape.concat(&[g, m]);
        let ls = tape.log_softmax(c);
        let l0 = tape.index(ls, 0);
        let kl = tape.kl_from_target(alpha, vec![0.7, 0.3]);
        let bce = tape.bce_logits(g, vec![1.0, 0.0]);
        let bp = tape.bce_prob(h2, vec![0.0, 1.0]);
        let tot = tape.sum(&[l0, kl, bce, bp]);
        let sc = tape.scale(tot, 0.5);
        let lnv = tape.sum_elems(h2);
        let lnv = tape.ln(lnv);
        (tape.add(sc, lnv), xi)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (ps, w, b, e) = params();
        let x = [0.4, -0.3, 0.8];
        let mut tape = Tape::new(&ps);
        let (out, xi) = build(&mut tape, w, b, e, &x);
        let mut pg = ParamGrads::zeros_like(&ps);
        let ng = tape.backward(out, 1.0, Some(&mut pg));

        let h = 1e-6;
        let f = |ps: &ParamSet, x: &[f64]| {
            let mut t = Tape::new(ps);
            let (o, _) = build(&mut t, w, b, e, x);
            t.scalar(o)
        };
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&ps, &xp) - f(&ps, &xm)) / (2.0 * h);
            let an = ng.get(xi).unwrap()[k];
            assert!((fd - an).abs() < 1e-7, "input {k}: fd {fd} vs {an}");
        }
        for pid in [w, b, e] {
            for k in 0..ps.get(pid).data.len() {
                let mut pp = ps.clone();
                pp.get_mut(pid).data[k] += h;
                let mut pm = ps.clone();
                pm.get_mut(pid).data[k] -= h;
                let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                let an = pg.get(pid)[k];
                assert!(
                    (fd - an).abs() < 1e-7,
                    "param {pid:?}[{k}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn masked_softmax_matches_deletion() {
        let x = [0.3, 2.0, -1.0, 0.7];
        let masked = softmax(&x, Some(&[1.0, 0.0, 1.0, 1.0]));
        let deleted = softmax(&[0.3, -1.0, 0.7], None);
        assert_eq!(masked[1], 0.0);
        assert_eq!(vec![masked[0], masked[2], masked[3]], deleted);
        assert_eq!(softmax(&x, Some(&[1.0; 4])), softmax(&x, None));
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        let (ps, ..) = params();
        let mut tape = Tape::new(&ps);
        let s = tape.input(vec![1.0, 2.0]);
        assert!(tape.masked_softmax(s, &[0.0, 0.0]).is_none());
    }
}
