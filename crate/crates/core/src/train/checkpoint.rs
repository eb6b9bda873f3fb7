use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::TrainConfig;
use crate::audio::ScalingStats;
use crate::error::{Error, Result};
use crate::format::TensorFile;
use crate::model::{Model, Variant};
use crate::tags::{Vocabulary, WordTable};

pub const CHECKPOINT_KIND: &str = "checkpoint";
const PARAM_PREFIX: &str = "param/";
const TABLE_NAME: &str = "w2v/table";

/// Everything downstream tools need besides the weights: the frozen word
/// vectors with their vocabulary and the corpus scaling statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Assets {
    pub vocabulary: Vocabulary,
    pub table: WordTable,
    pub scaling: ScalingStats,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps; also the index of the next dropout stream.
    pub step: u64,
    pub best_validation: Option<f64>,
    pub best_epoch: Option<usize>,
    pub assets: Option<Assets>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    config_digest: String,
    variant: Variant,
    epoch: usize,
    step: u64,
    best_validation: Option<f64>,
    best_epoch: Option<usize>,
    optimizer: serde_json::Value,
    rng: serde_json::Value,
    vocabulary: Option<Vocabulary>,
    scaling: Option<ScalingStats>,
}

impl Checkpoint {
    pub fn to_file(&self) -> Result<TensorFile> {
        let meta = Meta {
            config: self.config.clone(),
            config_digest: self.config.digest()?,
            variant: self.model.variant,
            epoch: self.epoch,
            step: self.step,
            best_validation: self.best_validation,
            best_epoch: self.best_epoch,
            optimizer: json!({ "kind": "sgd", "learning_rate": self.config.learning_rate }),
            // Streams are derived from (seed, purpose, index): the shuffle
            // stream of the next epoch and the dropout stream of the next step.
            rng: json!({ "seed": self.config.seed, "next_epoch": self.epoch, "next_step": self.step }),
            vocabulary: self.assets.as_ref().map(|a| a.vocabulary.clone()),
            scaling: self.assets.as_ref().map(|a| a.scaling),
        };
        let mut f = TensorFile::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        for p in self.model.params.iter() {
            f.push_f32(format!("{PARAM_PREFIX}{}", p.name), p.value.clone())?;
        }
        if let Some(a) = &self.assets {
            f.push_f32(TABLE_NAME, a.table.to_tensor())?;
        }
        Ok(f)
    }

    pub fn from_file(f: &TensorFile, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: path.to_owned(), reason };
        if f.kind != CHECKPOINT_KIND {
            return Err(corrupt(format!("expected a checkpoint, found a `{}` file", f.kind)));
        }
        let meta: Meta = serde_json::from_value(f.meta.clone()).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
        if meta.config.digest()? != meta.config_digest {
            return Err(corrupt("configuration digest does not match".into()));
        }
        if meta.variant != meta.config.variant {
            return Err(corrupt("variant disagrees with configuration".into()));
        }
        let mut model = Model::new(meta.variant, meta.config.seed)?;
        let mut loaded = 0;
        for (name, tensor) in f.tensors() {
            let Some(param) = name.strip_prefix(PARAM_PREFIX) else { continue };
            let target = model.params.get_mut(param).map_err(|_| {
                Error::ConfigMismatch(format!("checkpoint parameter `{param}` does not exist in variant {}", meta.variant))
            })?;
            if target.shape() != tensor.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{param}` has shape {:?}, variant {} expects {:?}",
                    tensor.shape(),
                    meta.variant,
                    target.shape()
                )));
            }
            *target = f.get_f32(name)?;
            loaded += 1;
        }
        if loaded != model.params.len() {
            return Err(corrupt(format!("{loaded} of {} parameters present", model.params.len())));
        }
        let assets = match (meta.vocabulary, meta.scaling) {
            (Some(vocabulary), Some(scaling)) => {
                let table = WordTable::from_tensor(&f.get_f32(TABLE_NAME)?)?;
                if table.rows() != vocabulary.len() {
                    return Err(corrupt("word table and vocabulary sizes differ".into()));
                }
                Some(Assets { vocabulary, table, scaling })
            }
            (None, None) => None,
            _ => return Err(corrupt("incomplete downstream assets".into())),
        };
        Ok(Self {
            config: meta.config,
            model,
            epoch: meta.epoch,
            step: meta.step,
            best_validation: meta.best_validation,
            best_epoch: meta.best_epoch,
            assets,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_file()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::read(path)?, path)
    }

    pub fn ensure_variant(&self, variant: Variant) -> Result<()> {
        if self.model.variant != variant {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds variant {}, configuration asks for {variant}",
                self.model.variant
            )));
        }
        Ok(())
    }

    /// A run may continue from this checkpoint when everything but the epoch
    /// budget matches and the budget is not already spent.
    pub fn ensure_resumable(&self, config: &TrainConfig) -> Result<()> {
        self.ensure_variant(config.variant)?;
        if self.config.digest()? != config.digest()? {
            return Err(Error::ConfigMismatch("checkpoint was trained with a different configuration".into()));
        }
        if self.epoch > config.epochs {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint is at epoch {}, beyond the configured {}",
                self.epoch, config.epochs
            )));
        }
        Ok(())
    }

    pub fn assets(&self) -> Result<&Assets> {
        self.assets.as_ref().ok_or_else(|| Error::invalid("checkpoint carries no word table or scaling statistics"))
    }
}
