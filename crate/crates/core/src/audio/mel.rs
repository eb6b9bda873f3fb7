use super::{FFT_BINS, WINDOW};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over `0..sr/2`, each peaking at 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    edges_hz: Vec<f64>,
    // (first nonzero bin, weights from that bin on)
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, bands: usize) -> Self {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        let edges_hz: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
        let bin_hz = sample_rate as f64 / WINDOW as f64;
        let rows = (0..bands)
            .map(|m| {
                let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let weight = |k: usize| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                };
                let first = (0..FFT_BINS).find(|&k| weight(k) > 0.0).unwrap_or(FFT_BINS);
                let last = (first..FFT_BINS).take_while(|&k| weight(k) > 0.0).last().unwrap_or(first);
                (first, (first..=last.min(FFT_BINS - 1)).map(weight).collect())
            })
            .collect();
        Self { edges_hz, rows }
    }

    pub fn bands(&self) -> usize {
        self.rows.len()
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    /// Dense weights of one filter over all bins.
    pub fn row(&self, band: usize) -> Vec<f64> {
        let mut out = vec![0.0; FFT_BINS];
        let (first, w) = &self.rows[band];
        for (i, &v) in w.iter().enumerate() {
            if first + i < FFT_BINS {
                out[first + i] = v;
            }
        }
        out
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(first, w)| w.iter().zip(&power[(*first).min(power.len())..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}
