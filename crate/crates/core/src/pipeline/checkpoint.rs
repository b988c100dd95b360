//! Checkpoint directories.
//!
//! ```text
//! ckpt/
//!   manifest.json          # config, config hash, tensor shapes/dtypes, train state, vocab, normalization
//!   model.safetensors      # parameters and normalization running statistics, by hierarchical name
//!   optimizer.safetensors  # AdamW moments as m.<name> / v.<name> (training checkpoints only)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::encoders::Vocab;
use crate::error::{Error, Result};

use super::optim::AdamW;
use super::{Model, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Progress counters saved with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_miou: f64,
    /// Seed of the generator that orders the next epoch.
    pub rng_state: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub parameters: BTreeMap<String, TensorInfo>,
    pub buffers: BTreeMap<String, TensorInfo>,
    pub train_state: TrainState,
    pub normalization: Normalization,
    pub vocab: Vec<String>,
}

fn info(t: &Tensor) -> TensorInfo {
    TensorInfo {
        shape: t.dims().to_vec(),
        dtype: format!("{:?}", t.dtype()).to_lowercase(),
    }
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Write through a temporary file and rename, so a failed write never leaves a truncated file.
fn write_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp).map_err(|e| ck_err(path, e))?;
    fs::rename(&tmp, path).map_err(|e| ck_err(path, e))
}

fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    write_file(path, |tmp| Ok(candle_core::safetensors::save(&map, tmp)?))
}

/// A checkpoint read from disk.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Checkpoint {
    pub fn save(
        dir: &Path,
        model: &Model,
        cfg: &RunConfig,
        state: &TrainState,
        normalization: &Normalization,
        vocab: &Vocab,
        optimizer: Option<&AdamW>,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ck_err(dir, e))?;
        let params: BTreeMap<String, Tensor> = model
            .store
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect();
        let buffers: BTreeMap<String, Tensor> = model
            .store
            .buffers()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: cfg.clone(),
            config_hash: cfg.model_hash(),
            parameters: params.iter().map(|(k, t)| (k.clone(), info(t))).collect(),
            buffers: buffers.iter().map(|(k, t)| (k.clone(), info(t))).collect(),
            train_state: state.clone(),
            normalization: *normalization,
            vocab: vocab.words().to_vec(),
        };
        let mut all = params;
        all.extend(buffers);
        save_tensors(&dir.join(MODEL_FILE), &all)?;
        if let Some(opt) = optimizer {
            save_tensors(&dir.join(OPTIMIZER_FILE), &opt.state_tensors())?;
        }
        let text = serde_json::to_string_pretty(&manifest)?;
        write_file(&dir.join(MANIFEST_FILE), |tmp| Ok(fs::write(tmp, text)?))
    }

    /// Reads and checks the manifest; tensors are loaded by [`Checkpoint::build_model`].
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| ck_err(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ck_err(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck_err(
                &path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let actual = manifest.config.model_hash();
        if actual != manifest.config_hash {
            return Err(ck_err(
                &path,
                format!(
                    "config hash mismatch: manifest records {}, its config hashes to {actual}; \
                     the model config was edited after saving",
                    manifest.config_hash
                ),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Refuse to run `expected` against this checkpoint unless their model fields agree.
    pub fn check_compatible(&self, expected: &RunConfig) -> Result<()> {
        let want = expected.model_hash();
        if want != self.manifest.config_hash {
            return Err(ck_err(
                &self.dir,
                format!(
                    "config hash mismatch: checkpoint {} was trained with model config {}, \
                     the supplied config hashes to {want}; encoder, decoder variant and \
                     alignment flags must match",
                    self.dir.display(),
                    self.manifest.config_hash
                ),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_words(self.manifest.vocab.clone())
    }

    /// Rebuild the model and overwrite every tensor with the stored values.
    pub fn build_model(&self) -> Result<Model> {
        let model = Model::build(&self.manifest.config)?;
        let path = self.dir.join(MODEL_FILE);
        let tensors = candle_core::safetensors::load(&path, model.store.device()).map_err(|e| ck_err(&path, e))?;
        let expected: Vec<&String> = self
            .manifest
            .parameters
            .keys()
            .chain(self.manifest.buffers.keys())
            .collect();
        let store_names: Vec<&String> = model.store.params().keys().chain(model.store.buffers().keys()).collect();
        let mut a = expected.clone();
        let mut b = store_names;
        a.sort();
        b.sort();
        if a != b {
            return Err(ck_err(&path, "manifest tensor names do not match the rebuilt model"));
        }
        for name in expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| ck_err(&path, format!("missing tensor {name}")))?;
            model.store.set(name, &t.to_dtype(model.dtype())?)?;
        }
        Ok(model)
    }

    pub fn load_optimizer(&self, model: &Model) -> Result<AdamW> {
        let path = self.dir.join(OPTIMIZER_FILE);
        let mut opt = AdamW::new(&self.manifest.config.optimizer);
        let tensors = candle_core::safetensors::load(&path, model.store.device()).map_err(|e| ck_err(&path, e))?;
        opt.load_state(self.manifest.train_state.step, tensors.into_iter().collect(), &model.store)?;
        Ok(opt)
    }
}
