//! Log-mel front end, max-energy patch selection, dataset scaling and the
//! MFCC baseline.

mod io;
mod mel;
mod mfcc;

pub use io::{load_audio, read_raw_f32, read_wav, write_wav};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use mfcc::{dct_ii, delta, mfcc_baseline, mfcc_from_logmel, MFCC_COEFFS, MFCC_DIM};

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 22050;
pub const WINDOW: usize = 1024;
pub const HOP: usize = 512;
pub const FFT_BINS: usize = WINDOW / 2 + 1;
pub const MEL_BANDS: usize = 96;
pub const PATCH_FRAMES: usize = 96;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono samples at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_count(&self) -> Result<usize> {
        frame_count(self.samples.len())
    }
}

pub fn frame_count(len: usize) -> Result<usize> {
    if len < WINDOW {
        return Err(Error::invalid(format!("clip has {len} samples, need at least {WINDOW}")));
    }
    Ok((len - WINDOW) / HOP + 1)
}

/// A `frames × bands` matrix of natural-log mel energies, row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMel {
    frames: usize,
    bands: usize,
    data: Vec<f64>,
}

impl LogMel {
    pub fn new(frames: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || bands == 0 || data.len() != frames * bands {
            return Err(Error::shape(format!("log-mel {frames}×{bands} with {} values", data.len())));
        }
        Ok(Self { frames, bands, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    /// Rows `start..start + len`, repeating the last frame past the end.
    pub fn window(&self, start: usize, len: usize) -> LogMel {
        let mut data = Vec::with_capacity(len * self.bands);
        for t in start..start + len {
            data.extend_from_slice(self.frame(t.min(self.frames - 1)));
        }
        LogMel { frames: len, bands: self.bands, data }
    }

    pub fn frame_energy(&self, t: usize) -> f64 {
        self.frame(t).iter().map(|v| v.exp()).sum()
    }
}

/// Reusable STFT + mel analysis.
pub struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    sample_rate: u32,
}

impl Analyzer {
    pub fn new(sample_rate: u32) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WINDOW);
        Self { fft, window: hamming(WINDOW), filterbank: MelFilterbank::new(sample_rate, MEL_BANDS), sample_rate }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// |DFT|² of one windowed frame on the 513 non-negative bins.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> =
            frame.iter().zip(&self.window).map(|(&s, &w)| Complex::new(s as f64 * w, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..FFT_BINS].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn logmel(&self, clip: &AudioClip) -> Result<LogMel> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "clip sampled at {} Hz, analyzer expects {} Hz",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        let frames = clip.frame_count()?;
        let mut data = Vec::with_capacity(frames * MEL_BANDS);
        for t in 0..frames {
            let power = self.power_spectrum(&clip.samples()[t * HOP..t * HOP + WINDOW]);
            data.extend(self.filterbank.apply(&power).into_iter().map(|e| (e + LOG_FLOOR).ln()));
        }
        LogMel::new(frames, MEL_BANDS, data)
    }
}

/// Symmetric Hamming window, `0.54 − 0.46·cos(2πn/(N−1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()).collect()
}

pub fn stft_logmel(clip: &AudioClip) -> Result<LogMel> {
    Analyzer::new(clip.sample_rate()).logmel(clip)
}

/// The 96-frame window with the largest summed energy. Short inputs are
/// padded by repeating their last frame.
pub fn select_max_energy_patch(logmel: &LogMel) -> LogMel {
    let t = logmel.frames();
    if t <= PATCH_FRAMES {
        return logmel.window(0, PATCH_FRAMES);
    }
    let energy: Vec<f64> = (0..t).map(|i| logmel.frame_energy(i)).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for start in 0..=t - PATCH_FRAMES {
        // Direct sums keep the comparison independent of accumulated drift.
        let sum: f64 = energy[start..start + PATCH_FRAMES].iter().sum();
        if sum > best.1 {
            best = (start, sum);
        }
    }
    logmel.window(best.0, PATCH_FRAMES)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub min: f64,
    pub max: f64,
}

impl ScalingStats {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a LogMel>) -> Result<Self> {
        let mut stats: Option<Self> = None;
        for v in values {
            for &x in v.data() {
                let s = stats.get_or_insert(Self { min: x, max: x });
                s.min = s.min.min(x);
                s.max = s.max.max(x);
            }
        }
        stats.ok_or_else(|| Error::invalid("cannot fit scaling statistics on an empty set"))
    }

    pub fn scale(&self, x: f64) -> f64 {
        if self.max == self.min {
            return 0.5;
        }
        ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// A 96×96 log-mel patch scaled into `[0, 1]`, time along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPatch {
    values: Vec<f32>,
}

impl SpectrogramPatch {
    pub const LEN: usize = PATCH_FRAMES * MEL_BANDS;

    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != Self::LEN {
            return Err(Error::shape(format!("patch has {} values, expected {}", values.len(), Self::LEN)));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("patch value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, PATCH_FRAMES, MEL_BANDS], self.values.clone()).expect("patch length is fixed")
    }
}

pub fn scale_patch(patch: &LogMel, stats: &ScalingStats) -> Result<SpectrogramPatch> {
    if patch.frames() != PATCH_FRAMES || patch.bands() != MEL_BANDS {
        return Err(Error::shape(format!("patch is {}×{}", patch.frames(), patch.bands())));
    }
    SpectrogramPatch::new(patch.data().iter().map(|&x| stats.scale(x) as f32).collect())
}

/// Min-max scales a set of patches, fitting the statistics when none are given.
pub fn scale_unit_interval(
    patches: &[LogMel],
    stats: Option<ScalingStats>,
) -> Result<(Vec<SpectrogramPatch>, ScalingStats)> {
    if patches.is_empty() {
        return Err(Error::invalid("no patches to scale"));
    }
    let stats = match stats {
        Some(s) => s,
        None => ScalingStats::fit(patches)?,
    };
    let scaled = patches.iter().map(|p| scale_patch(p, &stats)).collect::<Result<_>>()?;
    Ok((scaled, stats))
}

#[cfg(test)]
mod tests;
