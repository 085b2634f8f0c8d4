//! Checkpoint directory: `meta.json` indexing one little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::config::{from_kv_text, sha256_hex, KeyValue};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PhysMamba};
use crate::params::ParamStore;
use crate::synth::{f32_bytes, f32_values, read_file, write_file};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const BLOB_FILE: &str = "tensors.f32";

/// Complete training state after `epoch` finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    epoch: usize,
    adam_step: u64,
    config_hash: String,
    model_config: String,
    train_config: String,
    blob_sha256: String,
    entries: Vec<Entry>,
}

/// Every stored array in blob order: parameters, Adam moments, then
/// batch-norm statistics.
fn arrays(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, t) in ck.params.iter() {
        out.push((format!("param/{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    for ((name, t), (m, v)) in ck.params.iter().zip(ck.adam.m.iter().zip(&ck.adam.v)) {
        out.push((format!("adam_m/{name}"), t.shape().to_vec(), m.clone()));
        out.push((format!("adam_v/{name}"), t.shape().to_vec(), v.clone()));
    }
    for (name, s) in ck.params.norms() {
        let n = s.running_mean.len();
        out.push((format!("bn_mean/{name}"), vec![n], s.running_mean.clone()));
        out.push((format!("bn_var/{name}"), vec![n], s.running_var.clone()));
    }
    out
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.model.config_hash()
    }

    /// Write `dir/meta.json` and `dir/tensors.f32`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, values) in arrays(self) {
            let bytes = f32_bytes(&values);
            entries.push(Entry {
                name,
                shape,
                offset: blob.len(),
                sha256: sha256_hex(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
        let meta = Meta {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            adam_step: self.adam.step,
            config_hash: self.config_hash(),
            model_config: self.model.to_kv(),
            train_config: self.train.to_kv(),
            blob_sha256: sha256_hex(&blob),
            entries,
        };
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        write_file(&dir.join(BLOB_FILE), &blob)?;
        write_file(&dir.join(META_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let meta_path = dir.join(META_FILE);
        let blob_path = dir.join(BLOB_FILE);
        let text = read_file(&meta_path)?;
        let meta: Meta = serde_json::from_slice(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                &meta_path,
                format!("version {} is not the supported {CHECKPOINT_VERSION}", meta.version),
            ));
        }
        let model: ModelConfig = from_kv_text(&meta.model_config)?;
        let train: TrainConfig = from_kv_text(&meta.train_config)?;
        if model.config_hash() != meta.config_hash {
            return Err(Error::Config(format!(
                "{}: stored model configuration does not match its hash",
                meta_path.display()
            )));
        }
        let blob = read_file(&blob_path)?;
        if sha256_hex(&blob) != meta.blob_sha256 {
            return Err(Error::format(&blob_path, "checksum mismatch"));
        }

        let params = PhysMamba::new(model.clone())?.init_params(0)?;
        let mut ck = Checkpoint {
            epoch: meta.epoch,
            model,
            train,
            adam: AdamState::for_store(&params),
            params,
        };
        ck.adam.step = meta.adam_step;
        let expected = arrays(&ck);
        if expected.len() != meta.entries.len() {
            return Err(Error::format(
                &meta_path,
                format!("{} arrays listed, the model needs {}", meta.entries.len(), expected.len()),
            ));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape, _), e) in expected.iter().zip(&meta.entries) {
            if *name != e.name || *shape != e.shape {
                return Err(Error::format(
                    &meta_path,
                    format!("entry `{}` {:?} where `{name}` {shape:?} was expected", e.name, e.shape),
                ));
            }
            let len = 4 * shape.iter().product::<usize>();
            let bytes = blob
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::format(&blob_path, format!("`{name}` runs past the end of the blob")))?;
            if sha256_hex(bytes) != e.sha256 {
                return Err(Error::format(&blob_path, format!("checksum mismatch for `{name}`")));
            }
            values.push(f32_values(bytes));
        }
        let mut values = values.into_iter();
        for (_, t) in ck.params.iter_mut() {
            t.data_mut().copy_from_slice(&values.next().expect("counted above"));
        }
        for (m, v) in ck.adam.m.iter_mut().zip(ck.adam.v.iter_mut()) {
            *m = values.next().expect("counted above");
            *v = values.next().expect("counted above");
        }
        for (_, s) in ck.params.norms_mut() {
            s.running_mean = values.next().expect("counted above");
            s.running_var = values.next().expect("counted above");
        }
        Ok(ck)
    }

    /// Fails with a configuration error when `model` is not the configuration
    /// this checkpoint was trained with.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if model.config_hash() != self.config_hash() {
            return Err(Error::Config(format!(
                "model configuration hash {} does not match checkpoint hash {}",
                model.config_hash(),
                self.config_hash()
            )));
        }
        Ok(())
    }
}
