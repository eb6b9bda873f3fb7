use super::{stft_logmel, AudioClip, LogMel};
use crate::error::Result;

pub const MFCC_COEFFS: usize = 20;
pub const MFCC_DIM: usize = 6 * MFCC_COEFFS;

/// Orthonormal DCT-II, first `keep` coefficients.
pub fn dct_ii(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            scale * s
        })
        .collect()
}

/// Centered difference over time, edges replicated. `rows` are frames.
pub fn delta(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = rows.len();
    (0..t)
        .map(|i| {
            let prev = &rows[i.saturating_sub(1)];
            let next = &rows[(i + 1).min(t - 1)];
            next.iter().zip(prev).map(|(a, b)| (a - b) / 2.0).collect()
        })
        .collect()
}

fn mean_std(rows: &[Vec<f64>], out: &mut Vec<f64>) {
    let t = rows.len() as f64;
    let width = rows[0].len();
    let means: Vec<f64> = (0..width).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / t).collect();
    let stds = (0..width).map(|c| (rows.iter().map(|r| (r[c] - means[c]).powi(2)).sum::<f64>() / t).sqrt());
    out.extend_from_slice(&means);
    out.extend(stds);
}

/// 120 values: mean and std through time of the MFCCs, their Δ and ΔΔ.
pub fn mfcc_from_logmel(logmel: &LogMel) -> Vec<f64> {
    let coeffs: Vec<Vec<f64>> = (0..logmel.frames()).map(|t| dct_ii(logmel.frame(t), MFCC_COEFFS)).collect();
    let d = delta(&coeffs);
    let dd = delta(&d);
    let mut out = Vec::with_capacity(MFCC_DIM);
    for rows in [&coeffs, &d, &dd] {
        mean_std(rows, &mut out);
    }
    out
}

pub fn mfcc_baseline(clip: &AudioClip) -> Result<Vec<f64>> {
    Ok(mfcc_from_logmel(&stft_logmel(clip)?))
}
