use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use xaln::audio::{load_audio, scale_patch, select_max_energy_patch, stft_logmel, SAMPLE_RATE};
use xaln::corpus::{alignment_set, build_word_model, prepare, PreparedCorpus};
use xaln::downstream::{
    evaluate_task, extract_features, task_labels, FeatureSource, ProbeConfig, ProbeResults, Protocol, RetrievalIndex,
    TaskData,
};
use xaln::format::{write_atomic, TensorFile};
use xaln::manifest::Manifest;
use xaln::model::check::{check_model, ModelCheckConfig};
use xaln::synth::{write_dataset, SynthConfig};
use xaln::tags::{CbowConfig, WordTable};
use xaln::train::{self, Assets, Checkpoint, TrainOptions, BEST_FILE, FINAL_FILE, METRICS_FILE};
use xaln::Error;

use crate::config::RunConfig;
use crate::CliError;

pub const W2V_FILE: &str = "w2v.xt";
pub const RESULTS_FILE: &str = "results.json";

type Outcome = Result<Value, CliError>;

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn synth(out: &Path, clips_per_class: usize, frames: usize, seed: u64, test_fraction: f64, folds: usize) -> Outcome {
    let cfg = SynthConfig { clips_per_class, frames, seed, test_fraction, folds };
    let manifest = write_dataset(out, &cfg)?;
    Ok(json!({ "clips": manifest.len(), "manifest": path_str(&out.join("manifest.jsonl")) }))
}

pub fn prepare_data(manifest: &Path, out: &Path) -> Outcome {
    let manifest = Manifest::read(manifest)?;
    if manifest.is_empty() {
        return Err(Error::InvalidInput("manifest has no records".into()).into());
    }
    let corpus = prepare(&manifest)?;
    corpus.write(out)?;
    Ok(json!({ "clips": corpus.len(), "scaling": corpus.scaling, "out": path_str(out) }))
}

pub fn train_w2v(manifest: &Path, dim: usize, out: &Path, seed: u64) -> Outcome {
    let manifest = Manifest::read(manifest)?;
    let cfg = CbowConfig::new(dim, seed);
    let (vocab, table) = build_word_model(&manifest, &cfg)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let path = out.join(W2V_FILE);
    table.to_file(&vocab, &cfg)?.write(&path)?;
    Ok(json!({ "vocabulary": vocab.len(), "dim": table.dim(), "seed": seed, "out": path_str(&path) }))
}

pub fn train(config: &Path, data: &Path, w2v: &Path, out: &Path, resume: Option<&Path>) -> Outcome {
    let run = RunConfig::load(config)?;
    let cfg = run.train()?;
    let (table, vocabulary, _) = WordTable::from_file(&TensorFile::read(w2v)?)?;
    if table.dim() != cfg.variant.word_dim {
        return Err(Error::ConfigMismatch(format!(
            "variant {} needs {}-dimensional word vectors, {} holds {}",
            cfg.variant,
            cfg.variant.word_dim,
            w2v.display(),
            table.dim()
        ))
        .into());
    }
    let corpus = PreparedCorpus::read(data)?;
    let (set, kept) = alignment_set(&corpus, &vocabulary, &table)?;
    let resume = resume.map(Checkpoint::read).transpose()?;
    let options = TrainOptions {
        out_dir: Some(out.to_owned()),
        resume,
        assets: Some(Assets { vocabulary, table, scaling: corpus.scaling }),
    };
    let outcome = train::train(&set, cfg, options)?;
    let best: Option<PathBuf> = out.join(BEST_FILE).exists().then(|| out.join(BEST_FILE));
    Ok(json!({
        "pairs": kept.len(),
        "epoch": outcome.last.epoch,
        "step": outcome.last.step,
        "best_epoch": outcome.last.best_epoch,
        "final": path_str(&out.join(FINAL_FILE)),
        "best": best.as_deref().map(path_str),
        "metrics": path_str(&out.join(METRICS_FILE)),
    }))
}

pub fn gradcheck(config: &Path, tolerance: f64, per_tensor: usize) -> Outcome {
    if per_tensor == 0 {
        return Err(CliError::Usage("--per-tensor must be at least 1".into()));
    }
    let run = RunConfig::load(config)?;
    let cfg = run.train()?;
    let check = ModelCheckConfig { weights: cfg.weights, per_tensor, ..ModelCheckConfig::new(cfg.variant, cfg.seed) };
    let report = check_model(&check)?;
    let worst = report.worst();
    let summary = json!({
        "variant": cfg.variant,
        "checked": report.overall.checked,
        "max_rel_error": report.overall.max_rel_error,
        "worst_op": worst.name,
        "worst_analytic": worst.worst_analytic,
        "worst_numeric": worst.worst_numeric,
        "largest_invariant_gradient": report.largest_invariant_gradient(),
        "passed": report.passed(tolerance),
    });
    if !report.passed(tolerance) {
        return Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} (limit {tolerance:e}), worst op `{}`; {summary}",
            report.overall.max_rel_error, worst.name
        )));
    }
    Ok(summary)
}

pub fn probe(task_manifest: &Path, checkpoint: Option<&Path>, tags: bool, config: Option<&Path>, out: &Path) -> Outcome {
    let probe_cfg = match config {
        Some(p) => RunConfig::load(p)?.probe,
        None => ProbeConfig::default(),
    };
    let manifest = Manifest::read(task_manifest)?;
    let labels = task_labels(&manifest.records)?;
    let protocol = Protocol::from_records(&manifest.records)?;
    let (features, variant, source, digest) = match checkpoint {
        None => (extract_features(&manifest, &mut FeatureSource::Mfcc)?, "mfcc".to_owned(), "mfcc", None),
        Some(path) => {
            let mut ckpt = Checkpoint::read(path)?;
            let assets = ckpt.assets()?.clone();
            let digest = ckpt.config.digest()?;
            let variant = ckpt.model.variant.to_string();
            let mut source = if tags {
                FeatureSource::Tags { model: &ckpt.model, vocabulary: &assets.vocabulary, table: &assets.table }
            } else {
                FeatureSource::Encoder { model: &mut ckpt.model, scaling: assets.scaling }
            };
            let name = source.name();
            (extract_features(&manifest, &mut source)?, variant, name, Some(digest))
        }
    };
    let task = TaskData::new(features, labels, protocol)?;
    let report = evaluate_task(&task, &probe_cfg)?;
    let name = task_manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let results = ProbeResults::new(name, variant, source, report, &probe_cfg, digest.as_deref())?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let path = out.join(RESULTS_FILE);
    write_atomic(&path, &serde_json::to_vec_pretty(&results).map_err(Error::from)?)?;
    Ok(json!({
        "task": results.task,
        "variant": results.variant,
        "features": results.features,
        "mean": results.mean,
        "std": results.std,
        "repeats": results.per_run_accuracies.len(),
        "out": path_str(&path),
    }))
}

pub fn retrieve(checkpoint: &Path, data: &Path, query_tags: Option<&str>, query_audio: Option<&Path>, k: usize) -> Outcome {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let mut ckpt = Checkpoint::read(checkpoint)?;
    let assets = ckpt.assets()?.clone();
    let corpus = PreparedCorpus::read(data)?;
    let index = RetrievalIndex::build(&mut ckpt.model, &corpus, &assets.vocabulary, &assets.table)?;
    let (query, hits) = match (query_tags, query_audio) {
        (Some(raw), _) => {
            let tags: Vec<&str> = raw.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
            (json!({ "tags": tags }), index.query_tags(&ckpt.model, &tags, &assets.vocabulary, &assets.table, k)?)
        }
        (None, Some(path)) => {
            let clip = load_audio(path, SAMPLE_RATE)?;
            let patch = scale_patch(&select_max_energy_patch(&stft_logmel(&clip)?), &assets.scaling)?;
            (json!({ "audio": path_str(path) }), index.query_audio(&mut ckpt.model, &patch, k)?)
        }
        (None, None) => return Err(CliError::Usage("a tag or audio query is required".into())),
    };
    Ok(json!({ "query": query, "corpus": index.len(), "hits": hits }))
}
