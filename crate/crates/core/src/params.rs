//! Named parameter tensors, their gradients, and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
        }
    }

    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Tensor {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn reshape(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len());
        self.rows = rows;
        self.cols = cols;
        self
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        ParamGrads {
            grads: ps.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ps.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with gradients averaged over `scale` examples. Parameters
    /// listed in `frozen` are left untouched.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &ParamGrads, scale: f64, frozen: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, t) in ps.tensors.iter_mut().enumerate() {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.grads[i]);
            for k in 0..t.data.len() {
                let gk = g[k] / scale + self.weight_decay * t.data[k];
                if gk == 0.0 && m[k] == 0.0 {
                    continue;
                }
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                t.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::default();
        let x = ps.add("x", Tensor::from_rows(&[&[3.0, -2.0]]));
        let mut adam = Adam::new(&ps, 0.1);
        let mut g = ParamGrads::zeros_like(&ps);
        for _ in 0..500 {
            g.zero();
            let d = ps.get(x).data.clone();
            g.get_mut(x)
                .copy_from_slice(&[2.0 * (d[0] - 1.0), 2.0 * d[1]]);
            adam.step(&mut ps, &g, 1.0, &[]);
        }
        let d = &ps.get(x).data;
        assert!((d[0] - 1.0).abs() < 1e-3 && d[1].abs() < 1e-3, "{d:?}");
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut ps = ParamSet::default();
        let a = ps.add("a", Tensor::from_rows(&[&[1.0]]));
        let b = ps.add("b", Tensor::from_rows(&[&[1.0]]));
        let mut adam = Adam::new(&ps, 0.1);
        let mut g = ParamGrads::zeros_like(&ps);
        g.get_mut(a)[0] = 1.0;
        g.get_mut(b)[0] = 1.0;
        adam.step(&mut ps, &g, 1.0, &[a]);
        assert_eq!(ps.get(a).data[0], 1.0);
        assert!(ps.get(b).data[0] < 1.0);
    }
}
