use super::*;
use crate::rng::{self, Purpose};
use proptest::prelude::*;
use rand::Rng as _;

fn sine(hz: f64, len: usize) -> AudioClip {
    let s = (0..len).map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / SAMPLE_RATE as f64).sin() as f32 * 0.5);
    AudioClip::new(s.collect(), SAMPLE_RATE).unwrap()
}

fn naive_power(frame: &[f32]) -> Vec<f64> {
    let w = hamming(WINDOW);
    (0..FFT_BINS)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &s) in frame.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / WINDOW as f64;
                re += s as f64 * w[n] * a.cos();
                im += s as f64 * w[n] * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn frame_count_formula() {
    assert_eq!(frame_count(1536).unwrap(), 2);
    assert_eq!(frame_count(1024).unwrap(), 1);
    assert_eq!(frame_count(2047).unwrap(), 2);
    assert!(frame_count(1023).is_err());
    let clip = AudioClip::new(vec![0.0; 1000], SAMPLE_RATE).unwrap();
    assert!(matches!(stft_logmel(&clip), Err(Error::InvalidInput(_))));
}

#[test]
fn silent_clip_hits_the_floor() {
    let clip = AudioClip::new(vec![0.0; 4096], SAMPLE_RATE).unwrap();
    let m = stft_logmel(&clip).unwrap();
    assert_eq!((m.frames(), m.bands()), (7, 96));
    assert!(m.data().iter().all(|&v| v == LOG_FLOOR.ln()));
}

#[test]
fn hamming_endpoints() {
    let w = hamming(WINDOW);
    assert!((w[0] - 0.08).abs() < 1e-12 && (w[WINDOW - 1] - 0.08).abs() < 1e-12);
    assert!((w[511] - w[512]).abs() < 1e-12);
}

#[test]
fn sine_at_band_center_peaks_in_that_band() {
    let analyzer = Analyzer::new(SAMPLE_RATE);
    let fb = analyzer.filterbank();
    for band in [30, 55, 80] {
        let clip = sine(fb.center_hz(band), 2048);
        let frame = &clip.samples()[..WINDOW];
        let fast = analyzer.power_spectrum(frame);
        let slow = naive_power(frame);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6 * b.max(1.0));
        }
        let oracle: Vec<f64> = (0..MEL_BANDS).map(|m| fb.row(m).iter().zip(&slow).map(|(w, p)| w * p).sum()).collect();
        let best = (0..MEL_BANDS).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(best, band);
        let m = analyzer.logmel(&clip).unwrap();
        let row = m.frame(0);
        let arg = (0..MEL_BANDS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, band);
    }
}

#[test]
fn filterbank_shape() {
    let fb = MelFilterbank::new(SAMPLE_RATE, MEL_BANDS);
    assert_eq!(fb.bands(), 96);
    let mut prev_support: Option<(usize, usize)> = None;
    for m in 0..MEL_BANDS {
        let row = fb.row(m);
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        let nz: Vec<usize> = (0..FFT_BINS).filter(|&k| row[k] > 0.0).collect();
        assert!(!nz.is_empty(), "band {m} is empty");
        // contiguous support
        assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        if let Some((_, prev_hi)) = prev_support {
            if m > 3 {
                assert!(nz[0] <= prev_hi, "band {m} does not overlap its neighbour");
            }
        }
        prev_support = Some((nz[0], *nz.last().unwrap()));
    }
    assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
}

fn random_logmel(frames: usize, seed: u64) -> LogMel {
    let mut r = rng::stream(seed, Purpose::Synthesis, 0);
    LogMel::new(frames, MEL_BANDS, (0..frames * MEL_BANDS).map(|_| r.gen_range(-8.0..2.0)).collect()).unwrap()
}

fn brute_force_start(m: &LogMel) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for s in 0..=m.frames() - PATCH_FRAMES {
        let mut sum = 0.0;
        for t in s..s + PATCH_FRAMES {
            sum += m.frame(t).iter().map(|v| v.exp()).sum::<f64>();
        }
        if sum > best_sum {
            best_sum = sum;
            best = s;
        }
    }
    best
}

#[test]
fn patch_selection_examples() {
    let whole = random_logmel(96, 1);
    assert_eq!(select_max_energy_patch(&whole), whole);

    let mut data = vec![-20.0; 200 * MEL_BANDS];
    for t in 100..=120 {
        data[t * MEL_BANDS..(t + 1) * MEL_BANDS].fill(3.0);
    }
    let m = LogMel::new(200, MEL_BANDS, data).unwrap();
    let start = brute_force_start(&m);
    assert!(start <= 100 && start + 96 > 120);
    assert_eq!(select_max_energy_patch(&m), m.window(start, 96));

    let flat = LogMel::new(150, MEL_BANDS, vec![-1.0; 150 * MEL_BANDS]).unwrap();
    assert_eq!(select_max_energy_patch(&flat), flat.window(0, 96));
}

#[test]
fn short_spectrogram_repeats_last_frame() {
    let m = random_logmel(40, 3);
    let p = select_max_energy_patch(&m);
    assert_eq!(p.frames(), 96);
    assert_eq!(p.frame(39), m.frame(39));
    assert_eq!(p.frame(95), m.frame(39));
    assert_eq!(p.frame(0), m.frame(0));
}

#[test]
fn scaling_examples() {
    let s = ScalingStats { min: 0.0, max: 10.0 };
    assert_eq!([0.0, 5.0, 10.0].map(|x| s.scale(x)), [0.0, 0.5, 1.0]);
    assert_eq!(s.scale(12.0), 1.0);
    assert_eq!(s.scale(-1.0), 0.0);
    assert_eq!(ScalingStats { min: 2.0, max: 2.0 }.scale(7.0), 0.5);
    assert!(scale_unit_interval(&[], None).is_err());

    let patches = vec![random_logmel(96, 4), random_logmel(96, 5)];
    let (scaled, stats) = scale_unit_interval(&patches, None).unwrap();
    assert!(scaled.iter().all(|p| p.values().iter().all(|v| (0.0..=1.0).contains(v))));
    // Re-scaling a set already in [0, 1] with its own statistics is a no-op.
    let unit: Vec<LogMel> = scaled
        .iter()
        .map(|p| LogMel::new(96, 96, p.values().iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let (again, s2) = scale_unit_interval(&unit, None).unwrap();
    assert!((s2.min, s2.max) == (0.0, 1.0));
    for (a, b) in again.iter().zip(&scaled) {
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() <= 1e-7));
    }
    let test_set = vec![random_logmel(96, 6)];
    let (applied, reused) = scale_unit_interval(&test_set, Some(stats)).unwrap();
    assert_eq!(reused, stats);
    assert_eq!(applied.len(), 1);
}

#[test]
fn dct_of_constant_has_only_dc() {
    let c = dct_ii(&[2.5; 96], 20);
    assert!((c[0] - 2.5 * 96f64.sqrt()).abs() < 1e-12);
    assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    // Orthonormal: energy preserved when all coefficients are kept.
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
    let full = dct_ii(&x, 16);
    let e1: f64 = x.iter().map(|v| v * v).sum();
    let e2: f64 = full.iter().map(|v| v * v).sum();
    assert!((e1 - e2).abs() < 1e-12);
}

#[test]
fn mfcc_examples() {
    let stationary = LogMel::new(30, MEL_BANDS, (0..30).flat_map(|_| (0..96).map(|b| b as f64 * 0.01)).collect()).unwrap();
    let v = mfcc_from_logmel(&stationary);
    assert_eq!(v.len(), MFCC_DIM);
    assert!(v[2 * MFCC_COEFFS..3 * MFCC_COEFFS].iter().all(|d| d.abs() < 1e-6));

    let single = random_logmel(1, 8);
    let v = mfcc_from_logmel(&single);
    for block in [1, 3, 5] {
        assert!(v[block * MFCC_COEFFS..(block + 1) * MFCC_COEFFS].iter().all(|&s| s == 0.0));
    }

    let clip = sine(440.0, 22050);
    let feats = mfcc_baseline(&clip).unwrap();
    assert_eq!(feats.len(), 120);
    assert!(feats.iter().all(|v| v.is_finite()));
}

#[test]
fn delta_replicates_edges() {
    let rows = vec![vec![0.0], vec![2.0], vec![6.0]];
    assert_eq!(delta(&rows), vec![vec![1.0], vec![3.0], vec![2.0]]);
}

#[test]
fn wav_and_raw_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = sine(1000.0, 3000);
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &clip).unwrap();
    assert_eq!(load_audio(&wav, SAMPLE_RATE).unwrap(), clip);

    let raw = dir.path().join("a.f32");
    let bytes: Vec<u8> = clip.samples().iter().flat_map(|s| s.to_le_bytes()).collect();
    std::fs::write(&raw, bytes).unwrap();
    assert_eq!(load_audio(&raw, SAMPLE_RATE).unwrap(), clip);

    std::fs::write(&raw, [0u8; 7]).unwrap();
    assert!(matches!(load_audio(&raw, SAMPLE_RATE), Err(Error::Corrupt { .. })));

    let stereo = dir.path().join("s.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..10 {
        w.write_sample(16384i16).unwrap();
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let c = read_wav(&stereo).unwrap();
    assert_eq!(c.samples().len(), 10);
    assert!(c.samples().iter().all(|&s| (s - 0.25).abs() < 1e-6));

    let other_rate = AudioClip::new(vec![0.0; 2048], 16000).unwrap();
    write_wav(&wav, &other_rate).unwrap();
    assert!(load_audio(&wav, SAMPLE_RATE).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_matches_brute_force(frames in 96usize..300, seed in 0u64..10_000) {
        let m = random_logmel(frames, seed);
        let start = brute_force_start(&m);
        prop_assert_eq!(select_max_energy_patch(&m), m.window(start, PATCH_FRAMES));
    }

    #[test]
    fn logmel_shape_for_any_length(len in 1024usize..6000) {
        let clip = AudioClip::new((0..len).map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5).collect(), SAMPLE_RATE).unwrap();
        let m = stft_logmel(&clip).unwrap();
        prop_assert_eq!(m.frames(), (len - 1024) / 512 + 1);
        prop_assert_eq!(m.bands(), 96);
        prop_assert_eq!(stft_logmel(&clip).unwrap(), m);
    }
}
