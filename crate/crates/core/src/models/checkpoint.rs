use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Vocab};
use crate::params::ParamSet;
use crate::{Error, Result};

/// On-disk form of a [`Model`]: a single JSON document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn write(model: &Model, dest: &Path) -> Result<String> {
        let ck = Checkpoint {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            seed: model.seed,
            params: model.params.clone(),
        };
        let bytes = serde_json::to_vec(&ck)?;
        if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(dest, &bytes).map_err(|e| Error::io(dest, e))?;
        Ok(params_hash(&model.params))
    }

    pub fn read(src: &Path) -> Result<Model> {
        let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        Model::from_parts(ck.config, ck.vocab, ck.seed, ck.params)
    }
}

/// Hex sha256 over parameter names and exact bit patterns.
pub fn params_hash(ps: &ParamSet) -> String {
    let mut h = Sha256::new();
    for name in ps.names() {
        let t = ps.get(ps.id(name).unwrap());
        h.update(name.as_bytes());
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
