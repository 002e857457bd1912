//! Evaluation metrics: cross-domain loss and SNR.

use super::config::LossKind;
use super::stft::Stft;
use super::ModelError;

/// Upper end of the reported SNR range in dB.
pub const SNR_CAP_DB: f64 = 35.0;

fn check_len(a: &[f64], b: &[f64]) -> Result<(), ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn inner(kind: LossKind, a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match kind {
            LossKind::Mae => (x - y).abs(),
            LossKind::Mse => (x - y) * (x - y),
        })
        .sum();
    s / a.len() as f64
}

/// Concatenated STFT magnitudes of every full frame (hop-spaced, starting at
/// sample 0); a signal shorter than one frame is zero-padded to one frame.
pub fn stft_magnitudes(stft: &Stft, x: &[f64]) -> Vec<f64> {
    let n = stft.fft_len();
    let mut padded = x.to_vec();
    if padded.len() < n {
        padded.resize(n, 0.0);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= padded.len() {
        let f = stft.analyze(&padded[start..start + n]).expect("frame length");
        out.extend_from_slice(&f.magnitude);
        start += stft.hop();
    }
    out
}

/// `alpha * loss_F + (1 - alpha) * loss_T`: spectral-magnitude loss and
/// waveform loss, both MAE or both MSE.
pub fn cross_domain_loss(enh: &[f64], clean: &[f64], alpha: f64, kind: LossKind, stft: &Stft) -> Result<f64, ModelError> {
    check_len(enh, clean)?;
    let lt = inner(kind, enh, clean);
    let lf = inner(kind, &stft_magnitudes(stft, enh), &stft_magnitudes(stft, clean));
    Ok(alpha * lf + (1.0 - alpha) * lt)
}

/// `10 log10(Σ clean² / Σ (enh − clean)²)`, capped at [`SNR_CAP_DB`].
pub fn snr(enh: &[f64], clean: &[f64]) -> Result<f64, ModelError> {
    check_len(enh, clean)?;
    let sig: f64 = clean.iter().map(|x| x * x).sum();
    if sig == 0.0 {
        return Err(ModelError::ZeroSignal);
    }
    let err: f64 = enh.iter().zip(clean).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(SNR_CAP_DB))
}
