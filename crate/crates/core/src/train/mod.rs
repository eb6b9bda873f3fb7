//! Joint optimization of the audio autoencoder, attention encoder and
//! projection head, with validation tracking and checkpoints.

mod checkpoint;

pub use checkpoint::{Assets, Checkpoint, CHECKPOINT_KIND};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{SpectrogramPatch, MEL_BANDS, PATCH_FRAMES};
use crate::error::{Error, Result};
use crate::format::{json_digest, write_atomic};
use crate::model::{Batch, Graph, Model, Variant};
use crate::objectives::{total_loss, LossValues, LossWeights};
use crate::rng::{self, Purpose};
use crate::tags::{TagMatrix, MAX_TAGS};
use crate::tensor::{Mode, Sgd, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_FILE: &str = "best.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const NAN_DUMP_FILE: &str = "nan-dump.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
}

mod defaults {
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn learning_rate() -> f64 {
        0.005
    }
    pub fn validation_fraction() -> f64 {
        0.1
    }
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            seed: 0,
            weights: LossWeights::default(),
            validation_fraction: defaults::validation_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for the contrastive term"));
        }
        // Zero is accepted so that a run can be checked for side-effect-free epochs.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} is not a non-negative number", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        self.weights.validate()
    }

    /// Digest of everything but the epoch budget, which may grow on resume.
    pub fn digest(&self) -> Result<String> {
        json_digest(&Self { epochs: 0, ..self.clone() })
    }
}

/// Seeded shuffle of `0..n`, the first `round(n·fraction)` indices going to
/// validation. Both halves are returned sorted.
pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 examples to split, got {n}")));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let k = (n as f64 * fraction).round() as usize;
    let mut val = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Scaled patches paired with tag matrices.
#[derive(Clone, Debug, Default)]
pub struct AlignmentSet {
    word_dim: usize,
    patches: Vec<f32>,
    tags: Vec<f32>,
    mask: Vec<bool>,
}

impl AlignmentSet {
    pub fn new(word_dim: usize) -> Self {
        Self { word_dim, ..Self::default() }
    }

    pub fn push(&mut self, patch: &SpectrogramPatch, tags: &TagMatrix) -> Result<()> {
        if tags.rows.shape() != [MAX_TAGS, self.word_dim] {
            return Err(Error::ConfigMismatch(format!(
                "tag matrix {:?} does not match word dimension {}",
                tags.rows.shape(),
                self.word_dim
            )));
        }
        self.patches.extend_from_slice(patch.values());
        self.tags.extend_from_slice(tags.rows.data());
        self.mask.extend_from_slice(&tags.mask);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mask.len() / MAX_TAGS
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<f32>> {
        let (p, t) = (SpectrogramPatch::LEN, MAX_TAGS * self.word_dim);
        let mut patches = Vec::with_capacity(indices.len() * p);
        let mut tags = Vec::with_capacity(indices.len() * t);
        let mut mask = Vec::with_capacity(indices.len() * MAX_TAGS);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("example {i} out of range for {} examples", self.len())));
            }
            patches.extend_from_slice(&self.patches[i * p..(i + 1) * p]);
            tags.extend_from_slice(&self.tags[i * t..(i + 1) * t]);
            mask.extend_from_slice(&self.mask[i * MAX_TAGS..(i + 1) * MAX_TAGS]);
        }
        let n = indices.len();
        Ok(Batch {
            patches: Tensor::new(vec![n, 1, PATCH_FRAMES, MEL_BANDS], patches)?,
            tags: Tensor::new(vec![n, MAX_TAGS, self.word_dim], tags)?,
            mask,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_gkl: f64,
    pub loss_ntxent: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, split: &str, v: LossValues) -> Self {
        Self { epoch, split: split.into(), loss_total: v.total, loss_gkl: v.gkl, loss_ntxent: v.ntxent }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best-validation checkpoint found by this invocation, if any.
    pub best: Option<Checkpoint>,
    pub metrics: Vec<EpochMetrics>,
    /// Training loss of every optimizer step taken by this invocation.
    pub step_losses: Vec<LossValues>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the metrics log and checkpoints; nothing is written without it.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Carried into every checkpoint written.
    pub assets: Option<Assets>,
}

/// Weighted running mean of loss values.
#[derive(Default)]
struct Mean {
    sum: LossValues,
    weight: f64,
}

impl Mean {
    fn add(&mut self, v: LossValues, w: f64) {
        self.sum.total += v.total * w;
        self.sum.gkl += v.gkl * w;
        self.sum.ntxent += v.ntxent * w;
        self.weight += w;
    }

    fn get(&self) -> LossValues {
        let w = self.weight.max(f64::MIN_POSITIVE);
        LossValues { total: self.sum.total / w, gkl: self.sum.gkl / w, ntxent: self.sum.ntxent / w }
    }
}

/// Eval-mode loss over `indices` in chunks of at most `batch_size`; chunks
/// are weighted by their size. A trailing single example is folded into the
/// previous chunk since the contrastive term needs two pairs.
pub fn evaluate_loss(model: &mut Model<f32>, data: &AlignmentSet, indices: &[usize], config: &TrainConfig) -> Result<LossValues> {
    if indices.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two examples"));
    }
    let mut bounds: Vec<(usize, usize)> =
        (0..indices.len()).step_by(config.batch_size).map(|s| (s, (s + config.batch_size).min(indices.len()))).collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|(s, e)| e - s < 2) {
        let (_, e) = bounds.pop().expect("non-empty");
        bounds.last_mut().expect("at least one chunk").1 = e;
    }
    let mut mean = Mean::default();
    for (s, e) in bounds {
        let batch = data.batch(&indices[s..e])?;
        let mut g = Graph::eval();
        let out = model.forward(&mut g, &batch)?;
        let loss = total_loss(&mut g.tape, &batch, &out, &config.weights)?;
        mean.add(loss.values(&g.tape), (e - s) as f64);
    }
    Ok(mean.get())
}

fn append_metrics(path: &Path, records: &[EpochMetrics]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.sync_data()?;
    Ok(())
}

fn dump_non_finite(dir: Option<&Path>, model: &Model<f32>, epoch: usize, step: u64, loss: LossValues) -> Error {
    let norms: serde_json::Map<String, serde_json::Value> = model
        .params
        .iter()
        .map(|p| {
            let finite = p.value.all_finite();
            let norm = p.value.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            (p.name.clone(), serde_json::json!({ "finite": finite, "l2": if finite { Some(norm) } else { None } }))
        })
        .collect();
    let detail = format!("loss_total={} loss_gkl={} loss_ntxent={}", loss.total, loss.gkl, loss.ntxent);
    if let Some(dir) = dir {
        let dump = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "loss_total": loss.total.to_string(),
            "loss_gkl": loss.gkl.to_string(),
            "loss_ntxent": loss.ntxent.to_string(),
            "parameters": norms,
        });
        match serde_json::to_vec_pretty(&dump) {
            Ok(bytes) => {
                if let Err(e) = write_atomic(&dir.join(NAN_DUMP_FILE), &bytes) {
                    log::error!("could not write diagnostic dump: {e}");
                }
            }
            Err(e) => log::error!("could not encode diagnostic dump: {e}"),
        }
    }
    Error::NonFiniteLoss { epoch, step, detail }
}

/// Runs epochs `resume.epoch .. config.epochs`. Each epoch shuffles the
/// training split, takes one SGD step per full minibatch, evaluates the
/// validation split in eval mode, appends both records to the metrics log
/// and refreshes the final (and, on improvement, best) checkpoint.
pub fn train(data: &AlignmentSet, config: &TrainConfig, options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    crate::tensor::retain_freed_memory();
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.word_dim() != config.variant.word_dim {
        return Err(Error::ConfigMismatch(format!(
            "variant {} expects {}-dimensional word vectors, the data has {}",
            config.variant,
            config.variant.word_dim,
            data.word_dim()
        )));
    }
    let (train_idx, val_idx) = split_dataset(data.len(), config.validation_fraction, config.seed)?;
    if train_idx.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} training examples cannot fill one batch of {}",
            train_idx.len(),
            config.batch_size
        )));
    }
    let out_dir = options.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut state = match options.resume {
        Some(ckpt) => {
            ckpt.ensure_resumable(config)?;
            Checkpoint { config: config.clone(), assets: options.assets.or(ckpt.assets.clone()), ..ckpt }
        }
        None => Checkpoint {
            config: config.clone(),
            model: Model::new(config.variant, config.seed)?,
            epoch: 0,
            step: 0,
            best_validation: None,
            best_epoch: None,
            assets: options.assets,
        },
    };
    let sgd = Sgd::new(config.learning_rate)?;
    let mut best = None;
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64));
        let mut train_mean = Mean::default();
        for chunk in order.chunks_exact(config.batch_size) {
            let batch = data.batch(chunk)?;
            let mut g = Graph::new(Mode::Train, rng::stream(config.seed, Purpose::Dropout, state.step));
            // Every tape op rejects non-finite results, so a diverged forward
            // pass surfaces as `NonFinite`; report it as a diverged loss.
            let forward = state.model.forward(&mut g, &batch).and_then(|out| total_loss(&mut g.tape, &batch, &out, &config.weights));
            let loss = match forward {
                Ok(loss) => loss,
                Err(Error::NonFinite { .. }) => {
                    let nan = LossValues { total: f64::NAN, gkl: f64::NAN, ntxent: f64::NAN };
                    return Err(dump_non_finite(out_dir, &state.model, epoch, state.step, nan));
                }
                Err(e) => return Err(e),
            };
            let values = loss.values(&g.tape);
            if !(values.total.is_finite() && values.gkl.is_finite() && values.ntxent.is_finite()) {
                return Err(dump_non_finite(out_dir, &state.model, epoch, state.step, values));
            }
            let grads = g.gradients(loss.total)?;
            sgd.step(&mut state.model.params, &grads)?;
            state.step += 1;
            train_mean.add(values, 1.0);
            step_losses.push(values);
        }
        state.epoch += 1;

        let mut records = vec![EpochMetrics::new(epoch, "train", train_mean.get())];
        let improved = if val_idx.len() >= 2 {
            let v = evaluate_loss(&mut state.model, data, &val_idx, config)?;
            records.push(EpochMetrics::new(epoch, "validation", v));
            let better = state.best_validation.is_none_or(|b| v.total < b);
            if better {
                state.best_validation = Some(v.total);
                state.best_epoch = Some(epoch);
            }
            better
        } else {
            false
        };
        if let Some(dir) = out_dir {
            append_metrics(&dir.join(METRICS_FILE), &records)?;
            state.write(&dir.join(FINAL_FILE))?;
            if improved {
                state.write(&dir.join(BEST_FILE))?;
            }
        }
        if improved {
            best = Some(state.clone());
        }
        for r in &records {
            log::info!(
                "epoch {} {}: total {:.4} gkl {:.4} ntxent {:.4}",
                r.epoch,
                r.split,
                r.loss_total,
                r.loss_gkl,
                r.loss_ntxent
            );
        }
        metrics.extend(records);
    }
    Ok(TrainOutcome { last: state, best, metrics, step_losses })
}
