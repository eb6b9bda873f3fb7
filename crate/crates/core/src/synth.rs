//! Synthetic tagged audio for desk-scale experiments.
//!
//! Four classes: a low (200–1200 Hz) or high (2–8 kHz) band crossed with a
//! rising or falling log-frequency sawtooth sweep. Each class draws its tags
//! from its own pool, and every clip also carries one tag shared by the whole
//! corpus. Rising and falling sweeps of a band are time reversals of each
//! other, which order-free clip statistics struggle to separate.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, HOP, SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::rng::{self, Purpose};

pub const CLASSES: usize = 4;

/// Tag present on every clip; the vocabulary's frequency cut removes it.
pub const SHARED_TAG: &str = "recording";

const POOLS: [[&str; 6]; CLASSES] = [
    ["bass", "rumble", "deep", "ascending", "climb", "swell"],
    ["boom", "drone", "murky", "descending", "fall", "sink"],
    ["chirp", "bright", "whistle", "upward", "lift", "soar"],
    ["hiss", "shrill", "crisp", "downward", "drop", "dive"],
];

const BANDS: [(f64, f64); 2] = [(200.0, 1200.0), (2000.0, 8000.0)];

pub fn class_tags(class: usize) -> &'static [&'static str] {
    &POOLS[class]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub clips_per_class: usize,
    /// Log-mel frames per clip.
    #[serde(default = "defaults::frames")]
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each class marked `test` in the manifest.
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    /// Number of folds assigned round-robin within each class; 0 for none.
    #[serde(default)]
    pub folds: usize,
}

mod defaults {
    pub fn frames() -> usize {
        100
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

impl SynthConfig {
    pub fn new(clips_per_class: usize, seed: u64) -> Self {
        Self { clips_per_class, frames: defaults::frames(), seed, test_fraction: defaults::test_fraction(), folds: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub id: String,
    pub class: usize,
    pub tags: Vec<String>,
    pub clip: AudioClip,
    pub split: String,
    pub fold: Option<usize>,
}

/// Sine whose log-frequency follows a sawtooth between the band edges.
pub fn sweep(class: usize, samples: usize, period: f64, offset: f64, amplitude: f64) -> Vec<f64> {
    let (lo, hi) = BANDS[class / 2];
    let rising = class.is_multiple_of(2);
    let ratio = (hi / lo).ln();
    let sr = SAMPLE_RATE as f64;
    let mut phase = 0.0;
    (0..samples)
        .map(|n| {
            let pos = (n as f64 / sr / period + offset).fract();
            let pos = if rising { pos } else { 1.0 - pos };
            let f = lo * (ratio * pos).exp();
            phase = (phase + TAU * f / sr) % TAU;
            amplitude * phase.sin()
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    if cfg.clips_per_class == 0 || cfg.frames == 0 {
        return Err(Error::invalid("clips per class and frames must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::invalid("test fraction must lie in [0, 1)"));
    }
    let samples = WINDOW + (cfg.frames - 1) * HOP;
    let n_test = (cfg.clips_per_class as f64 * cfg.test_fraction).round() as usize;
    let mut out = Vec::with_capacity(CLASSES * cfg.clips_per_class);
    for i in 0..cfg.clips_per_class {
        for class in 0..CLASSES {
            let index = (i * CLASSES + class) as u64;
            let mut r = rng::stream(cfg.seed, Purpose::Synthesis, index);
            let period = r.gen_range(0.35..0.7);
            let offset = r.gen_range(0.0..1.0);
            let amplitude = r.gen_range(0.3..0.8);
            let noise = r.gen_range(0.002..0.02);
            let signal: Vec<f32> = sweep(class, samples, period, offset, amplitude)
                .into_iter()
                .map(|v| (v + noise * r.gen_range(-1.0..1.0)) as f32)
                .collect();
            let k = r.gen_range(2..=5);
            let mut tags: Vec<String> = POOLS[class].choose_multiple(&mut r, k).map(|s| s.to_string()).collect();
            tags.insert(r.gen_range(0..=tags.len()), SHARED_TAG.to_string());
            out.push(SynthClip {
                id: format!("c{class}-{i:04}"),
                class,
                tags,
                clip: AudioClip::new(signal, SAMPLE_RATE)?,
                split: if i < cfg.clips_per_class - n_test { "train" } else { "test" }.into(),
                fold: (cfg.folds > 0).then(|| i % cfg.folds),
            });
        }
    }
    Ok(out)
}

/// Writes `audio/<id>.wav` for every clip and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let clips = generate(cfg)?;
    fs::create_dir_all(dir.join("audio"))?;
    let mut records = Vec::with_capacity(clips.len());
    for c in &clips {
        let rel = format!("audio/{}.wav", c.id);
        write_wav(&dir.join(&rel), &c.clip)?;
        records.push(ManifestRecord {
            id: c.id.clone(),
            audio_path: rel,
            tags: c.tags.clone(),
            label: Some(c.class),
            split: Some(c.split.clone()),
            fold: c.fold,
        });
    }
    let manifest = Manifest::new(dir, records)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
