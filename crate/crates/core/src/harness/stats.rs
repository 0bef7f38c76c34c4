use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::Variant;
use crate::datamodel::QaInstance;
use crate::{Error, Result};

/// Fraction of instances whose prediction is the target.
pub fn accuracy(predictions: &[usize], data: &[QaInstance]) -> Result<f64> {
    if predictions.len() != data.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} instances",
            predictions.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Mismatch("accuracy of an empty dataset".into()));
    }
    let correct = predictions
        .iter()
        .zip(data)
        .filter(|(p, i)| **p == i.target_index)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean and sample standard deviation (0 for a single value). Deviations
/// are taken from the first value, so identical runs give exactly that
/// value and a zero std.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.len() as f64;
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p: f64,
}

/// Two-sided unpaired t-test with unequal variances.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Config(
            "each sample needs at least two values".into(),
        ));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    let (na1, nb1) = ((a.len() - 1) as f64, (b.len() - 1) as f64);
    if se2 == 0.0 {
        let dof = na1 + nb1;
        return Ok(if ma == mb {
            TTest {
                t: 0.0,
                dof,
                p: 1.0,
            }
        } else {
            TTest {
                t: if ma > mb {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                dof,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (va * va / na1 + vb * vb / nb1);
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, dof, p })
}

/// One trained-and-evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub base_seed: u64,
    /// Empty for variants that take no explanation seed.
    pub expl_seed: String,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub perturbed_accuracy: Option<f64>,
}

impl RunRecord {
    pub fn key(&self) -> String {
        if self.expl_seed.is_empty() {
            format!("{}/{}", self.variant, self.base_seed)
        } else {
            format!("{}/{}{}", self.variant, self.base_seed, self.expl_seed)
        }
    }
}

/// Append-only log of runs; recording the same run twice is an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultStore {
    pub records: Vec<RunRecord>,
    keys: BTreeSet<String>,
}

impl ResultStore {
    pub fn push(&mut self, rec: RunRecord) -> Result<()> {
        if !self.keys.insert(rec.key()) {
            return Err(Error::Duplicate(rec.key()));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn extend(&mut self, other: ResultStore) -> Result<()> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn write_csv(&self, dest: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dest)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(dest, e))
    }

    pub fn read_csv(src: &Path) -> Result<Self> {
        let mut store = ResultStore::default();
        for row in csv::Reader::from_path(src)?.deserialize() {
            store.push(row?)?;
        }
        Ok(store)
    }

    pub fn accuracies(&self, variant: Variant) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.test_accuracy)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub dev: (f64, f64),
    pub test: (f64, f64),
    pub perturbed: Option<(f64, f64)>,
}

/// Per-variant mean and std over runs, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<VariantSummary>,
}

impl ResultTable {
    pub fn from_store(store: &ResultStore) -> Self {
        let mut order: Vec<Variant> = Vec::new();
        for r in &store.records {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        let rows = order
            .into_iter()
            .map(|v| {
                let recs: Vec<&RunRecord> =
                    store.records.iter().filter(|r| r.variant == v).collect();
                let col = |f: &dyn Fn(&RunRecord) -> f64| {
                    mean_std(&recs.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let perturbed: Option<Vec<f64>> =
                    recs.iter().map(|r| r.perturbed_accuracy).collect();
                VariantSummary {
                    variant: v,
                    runs: recs.len(),
                    dev: col(&|r| r.dev_accuracy),
                    test: col(&|r| r.test_accuracy),
                    perturbed: perturbed.map(|p| mean_std(&p)),
                }
            })
            .collect();
        ResultTable { rows }
    }

    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Mean test accuracy of `v`.
    pub fn mean(&self, v: Variant) -> Option<f64> {
        self.get(v).map(|r| r.test.0)
    }
}
