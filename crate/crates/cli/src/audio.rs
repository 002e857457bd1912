//! 16-bit PCM mono WAV in and out.

use std::path::Path;

use anyhow::{bail, Context, Result};

const FULL_SCALE: f64 = 32768.0;

/// Samples scaled to [-1, 1).
pub fn read_wav(path: &Path, rate: u32) -> Result<Vec<f64>> {
    let mut r = hound::WavReader::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let spec = r.spec();
    if spec.sample_rate != rate {
        bail!("{}: sample rate {} Hz, expected {rate} Hz", path.display(), spec.sample_rate);
    }
    if spec.channels != 1 {
        bail!("{}: {} channels, expected mono", path.display(), spec.channels);
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!("{}: expected 16-bit PCM", path.display());
    }
    r.samples::<i16>()
        .map(|s| Ok(f64::from(s?) / FULL_SCALE))
        .collect::<Result<_, hound::Error>>()
        .with_context(|| format!("cannot read {}", path.display()))
}

pub fn to_pcm(x: f64) -> i16 {
    (x * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16
}

pub fn write_wav(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).with_context(|| format!("cannot write {}", path.display()))?;
    for &s in samples {
        w.write_sample(to_pcm(s))?;
    }
    w.finalize()?;
    Ok(())
}
