use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads a PCM-integer or float WAV, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 / full_scale)).collect::<Result<_, _>>()?
        }
    };
    let channels = spec.channels.max(1) as usize;
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f32>() / channels as f32).collect();
    AudioClip::new(mono, spec.sample_rate)
}

/// Headerless little-endian f32 samples at the given rate.
pub fn read_raw_f32(path: &Path, sample_rate: u32) -> Result<AudioClip> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt { path: path.to_owned(), reason: "raw f32 length not a multiple of 4".into() });
    }
    let samples = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    AudioClip::new(samples, sample_rate)
}

/// `.wav` files go through the WAV reader, anything else is raw f32.
pub fn load_audio(path: &Path, sample_rate: u32) -> Result<AudioClip> {
    let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let clip = if is_wav { read_wav(path)? } else { read_raw_f32(path, sample_rate)? };
    if clip.sample_rate() != sample_rate {
        return Err(Error::invalid(format!(
            "{} is sampled at {} Hz, expected {sample_rate} Hz",
            path.display(),
            clip.sample_rate()
        )));
    }
    Ok(clip)
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
