//! Frozen-embedding evaluation: clip embeddings, per-dimension
//! standardization, MLP probes repeated over seeds, and cross-modal retrieval.

mod probe;
mod retrieval;

use serde::{Deserialize, Serialize};

use crate::audio::{mfcc_from_logmel, scale_patch, LogMel, ScalingStats, MEL_BANDS, PATCH_FRAMES};
use crate::corpus::clip_logmel;
use crate::error::{Error, Result};
use crate::format::json_digest;
use crate::manifest::{Manifest, ManifestRecord};
use crate::model::Model;
use crate::par;
use crate::tags::{embed_tags, preprocess_tags, Vocabulary, WordTable, MAX_TAGS};
use crate::tensor::Tensor;

pub use probe::{accuracy, train_probe, Mlp};
pub use retrieval::{Hit, RetrievalIndex};

/// Patches per encoder call during extraction.
const EXTRACT_BATCH: usize = 32;
/// Stds below this leave a dimension at zero after standardization.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::repeats")]
    pub repeats: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

mod defaults {
    pub fn hidden() -> usize {
        256
    }
    pub fn repeats() -> usize {
        10
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        32
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
            repeats: defaults::repeats(),
            epochs: defaults::epochs(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.repeats == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("probe hidden size, repeats, epochs and batch size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("probe learning rate must be positive"));
        }
        Ok(())
    }
}

/// Consecutive non-overlapping 96-frame patches. A trailing remainder of at
/// least half a patch is padded into one more; shorter remainders are
/// dropped. Clips shorter than a patch give a single padded patch.
pub fn split_patches(logmel: &LogMel) -> Vec<LogMel> {
    let t = logmel.frames();
    let full = t / PATCH_FRAMES;
    let mut out: Vec<LogMel> = (0..full).map(|i| logmel.window(i * PATCH_FRAMES, PATCH_FRAMES)).collect();
    if full == 0 || t % PATCH_FRAMES >= PATCH_FRAMES / 2 {
        out.push(logmel.window(full * PATCH_FRAMES, PATCH_FRAMES));
    }
    out
}

/// Mean eval-mode z_a over the clip's patches, for many clips at once.
pub fn clip_embeddings(model: &mut Model<f32>, scaling: &ScalingStats, clips: &[LogMel]) -> Result<Vec<Vec<f64>>> {
    let mut owner = Vec::new();
    let mut values = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        for p in split_patches(clip) {
            values.extend_from_slice(scale_patch(&p, scaling)?.values());
            owner.push(c);
        }
    }
    let len = PATCH_FRAMES * MEL_BANDS;
    let mut sums = vec![Vec::new(); clips.len()];
    let mut counts = vec![0usize; clips.len()];
    for (chunk, owners) in values.chunks(EXTRACT_BATCH * len).zip(owner.chunks(EXTRACT_BATCH)) {
        let x = Tensor::new(vec![owners.len(), 1, PATCH_FRAMES, MEL_BANDS], chunk.to_vec())?;
        let z = model.embed_audio(&x)?;
        let dim = z.shape()[1];
        for (row, &c) in z.data().chunks(dim).zip(owners) {
            let acc = &mut sums[c];
            if acc.is_empty() {
                acc.resize(dim, 0.0);
            }
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
            counts[c] += 1;
        }
    }
    Ok(sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect())
}

/// Per-dimension statistics of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &[Vec<f64>]) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::invalid("standardization needs at least two training vectors"));
        }
        let dim = train[0].len();
        if train.iter().any(|v| v.len() != dim) {
            return Err(Error::shape("training vectors differ in length"));
        }
        let n = train.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| train.iter().map(|v| v[d]).sum::<f64>() / n).collect();
        let std = (0..dim).map(|d| (train.iter().map(|v| (v[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / (s + STD_EPS)).collect()
    }
}

/// Standardizes both sets with statistics of `train` only.
pub fn standardize(train: &[Vec<f64>], other: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Standardizer)> {
    let s = Standardizer::fit(train)?;
    let a = train.iter().map(|v| s.apply(v)).collect();
    let b = other.iter().map(|v| s.apply(v)).collect();
    Ok((a, b, s))
}

/// Which examples train and which test a probe.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    Split { train: Vec<usize>, test: Vec<usize> },
    /// Fold id per example; each fold is held out once.
    Folds(Vec<usize>),
}

impl Protocol {
    /// Folds when the records carry fold ids, otherwise their `test` split
    /// against everything else.
    pub fn from_records(records: &[ManifestRecord]) -> Result<Self> {
        if records.iter().any(|r| r.fold.is_some()) {
            let folds: Vec<usize> = records
                .iter()
                .map(|r| r.fold.ok_or_else(|| Error::invalid(format!("record `{}` has no fold id", r.id))))
                .collect::<Result<_>>()?;
            let distinct: std::collections::BTreeSet<usize> = folds.iter().copied().collect();
            if distinct.len() < 2 {
                return Err(Error::invalid("fold protocol needs at least two folds"));
            }
            return Ok(Self::Folds(folds));
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..records.len()).partition(|&i| records[i].split.as_deref() == Some("test"));
        if test.is_empty() || train.len() < 2 {
            return Err(Error::invalid("task needs `test` records and at least two training records"));
        }
        Ok(Self::Split { train, test })
    }

    /// `(train, test)` index pairs evaluated in one run.
    pub fn partitions(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        match self {
            Self::Split { train, test } => vec![(train.clone(), test.clone())],
            Self::Folds(folds) => {
                let distinct: std::collections::BTreeSet<usize> = folds.iter().copied().collect();
                distinct
                    .into_iter()
                    .map(|k| (0..folds.len()).partition::<Vec<usize>, _>(|&i| folds[i] != k))
                    .collect()
            }
        }
    }
}

/// Labelled feature vectors ready for probing.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub protocol: Protocol,
}

impl TaskData {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, protocol: Protocol) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape("features and labels differ in count"));
        }
        let n = labels.len();
        let in_range = match &protocol {
            Protocol::Split { train, test } => train.iter().chain(test).all(|&i| i < n),
            Protocol::Folds(f) => f.len() == n,
        };
        if !in_range {
            return Err(Error::invalid("protocol indices do not match the examples"));
        }
        Ok(Self { features, labels, protocol })
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Labels of every record; a missing label is an error naming the record.
pub fn task_labels(records: &[ManifestRecord]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::invalid(format!("record `{}` has no label", r.id))))
        .collect()
}

/// Where probe features come from.
pub enum FeatureSource<'a> {
    /// Mean z_a of the frozen encoder.
    Encoder { model: &'a mut Model<f32>, scaling: ScalingStats },
    /// Clip-level MFCC statistics; no model involved.
    Mfcc,
    /// φ_w of the frozen attention path.
    Tags { model: &'a Model<f32>, vocabulary: &'a Vocabulary, table: &'a WordTable },
}

impl FeatureSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Encoder { .. } => "encoder",
            Self::Mfcc => "mfcc",
            Self::Tags { .. } => "tags",
        }
    }
}

pub fn extract_features(manifest: &Manifest, source: &mut FeatureSource<'_>) -> Result<Vec<Vec<f64>>> {
    match source {
        FeatureSource::Tags { model, vocabulary, table } => manifest
            .records
            .iter()
            .map(|r| tag_features(model, vocabulary, table, &r.tags).map_err(|e| Error::clip(&r.id, e)))
            .collect(),
        _ => {
            let mels: Vec<LogMel> = par::map_indexed(manifest.len(), |i| clip_logmel(manifest, &manifest.records[i]))
                .into_iter()
                .collect::<Result<_>>()?;
            match source {
                FeatureSource::Encoder { model, scaling } => clip_embeddings(model, scaling, &mels),
                _ => Ok(par::map_indexed(mels.len(), |i| mfcc_from_logmel(&mels[i]))),
            }
        }
    }
}

fn tag_features(model: &Model<f32>, vocabulary: &Vocabulary, table: &WordTable, raw: &[String]) -> Result<Vec<f64>> {
    let tags = preprocess_tags(raw, Some(vocabulary))?;
    let m = embed_tags(&tags, table, vocabulary)?;
    let x = Tensor::new(vec![1, MAX_TAGS, table.dim()], m.rows.data().to_vec())?;
    Ok(model.embed_tags(&x, &m.mask)?.data().iter().map(|&v| v as f64).collect())
}

/// Accuracies of `repeats` probe runs with seeds `0..repeats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seeds: Vec<u64>,
    pub per_run_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// One probe run: under folds, correct predictions are pooled over all held-out folds.
pub fn run_probe(task: &TaskData, config: &ProbeConfig, seed: u64) -> Result<f64> {
    let classes = task.classes();
    if classes < 2 {
        return Err(Error::invalid("probing needs at least two classes"));
    }
    let (mut correct, mut total) = (0.0, 0usize);
    for (k, (train, test)) in task.protocol.partitions().into_iter().enumerate() {
        let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| task.features[i].clone()).collect() };
        let (xtr, xte, _) = standardize(&pick(&train), &pick(&test))?;
        let ytr: Vec<usize> = train.iter().map(|&i| task.labels[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| task.labels[i]).collect();
        let mlp = train_probe(&xtr, &ytr, classes, config, seed, k as u64)?;
        correct += accuracy(&mlp, &xte, &yte) * yte.len() as f64;
        total += yte.len();
    }
    Ok(correct / total as f64)
}

/// Runs the probe `config.repeats` times with seeds `0..repeats`.
pub fn evaluate_task(task: &TaskData, config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.repeats as u64).collect();
    let accs = par::map_indexed(seeds.len(), |i| run_probe(task, config, seeds[i]))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ProbeReport { seeds, per_run_accuracies: accs, mean, std })
}

/// φ_w features of the manifest's tag sets through the same probe protocol.
pub fn evaluate_tags(
    manifest: &Manifest,
    model: &Model<f32>,
    vocabulary: &Vocabulary,
    table: &WordTable,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let features = extract_features(manifest, &mut FeatureSource::Tags { model, vocabulary, table })?;
    let task = TaskData::new(features, task_labels(&manifest.records)?, Protocol::from_records(&manifest.records)?)?;
    evaluate_task(&task, config)
}

/// The results file written by a probe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResults {
    pub task: String,
    /// Model variant, or `mfcc` for the baseline.
    pub variant: String,
    pub features: String,
    pub seeds: Vec<u64>,
    pub per_run_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub probe: ProbeConfig,
    /// Digest over the probe settings and the checkpoint's training configuration.
    pub config_digest: String,
}

impl ProbeResults {
    pub fn new(
        task: impl Into<String>,
        variant: impl Into<String>,
        features: &str,
        report: ProbeReport,
        probe: &ProbeConfig,
        train_digest: Option<&str>,
    ) -> Result<Self> {
        let variant = variant.into();
        let config_digest = json_digest(&serde_json::json!({
            "probe": probe,
            "features": features,
            "variant": variant,
            "train_config": train_digest,
        }))?;
        Ok(Self {
            task: task.into(),
            variant,
            features: features.to_owned(),
            seeds: report.seeds,
            per_run_accuracies: report.per_run_accuracies,
            mean: report.mean,
            std: report.std,
            probe: probe.clone(),
            config_digest,
        })
    }
}

#[cfg(test)]
mod tests;
