use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::params::{Adam, ParamGrads, ParamId};
use crate::synthdata::mix_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            patience: 5,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn write_log(&self, dest: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dest)?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(dest, e))
    }
}

/// Mini-batch Adam with early stopping on dev accuracy.
///
/// `loss` adds the gradient of one training example (by index) into the
/// buffer and returns its loss; `dev_acc` scores the current parameters.
/// On return `model` holds the best-dev parameters. Parameters in `frozen`
/// are never updated.
pub fn train<L, E>(
    model: &mut Model,
    n_train: usize,
    cfg: &TrainConfig,
    frozen: &[ParamId],
    mut loss: L,
    mut dev_acc: E,
) -> Result<TrainOutcome>
where
    L: FnMut(&Model, usize, &mut ParamGrads, &mut ChaCha8Rng) -> Result<f64>,
    E: FnMut(&Model) -> Result<f64>,
{
    if n_train == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(model.seed, 0x5_4FF1E));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(model.seed, 0xD0));
    let mut adam = Adam::new(&model.params, cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut best = (0, f64::NEG_INFINITY, model.params.clone());
    let mut log = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grads.zero();
            for &i in batch {
                let l = loss(model, i, &mut grads, &mut drop_rng)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, loss: l });
                }
                total += l;
            }
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
            adam.step(&mut model.params, &grads, batch.len() as f64, frozen);
        }
        let acc = dev_acc(model)?;
        log.push(LogRow {
            epoch,
            train_loss: total / n_train as f64,
            dev_acc: acc,
        });
        if acc > best.1 {
            best = (epoch, acc, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        best_epoch: best.0,
        best_dev_acc: best.1,
        log,
    })
}
