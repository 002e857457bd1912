//! Streaming STFT front end: Hann analysis, weighted overlap-add synthesis.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::ModelError;

/// Complex half spectrum of one frame plus its polar form.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub bins: Vec<Complex64>,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralFrame {
    pub fn from_bins(bins: Vec<Complex64>) -> Self {
        let magnitude = bins.iter().map(|b| b.norm()).collect();
        let phase = bins.iter().map(|b| b.arg()).collect();
        Self { bins, magnitude, phase }
    }

    /// New frame with `magnitude` and this frame's phase. A zero bin has
    /// no phase and stays zero.
    pub fn with_magnitude(&self, magnitude: &[f64]) -> SpectralFrame {
        let bins = magnitude
            .iter()
            .zip(&self.bins)
            .map(|(&m, b)| if b.norm() == 0.0 { Complex64::new(0.0, 0.0) } else { b * (m / b.norm()) })
            .collect();
        SpectralFrame::from_bins(bins)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// FFT plans, window and overlap-add normalization for one (fft_len, hop).
#[derive(Clone)]
pub struct Stft {
    fft_len: usize,
    hop: usize,
    window: Vec<f64>,
    /// Sum of squared window over all overlapping frames, per hop position.
    ola_norm: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("fft_len", &self.fft_len).field("hop", &self.hop).finish()
    }
}

impl Stft {
    pub fn new(fft_len: usize, hop: usize) -> Self {
        assert!(hop > 0 && fft_len % hop == 0, "hop must divide fft_len");
        let window = hann(fft_len);
        let ola_norm = (0..hop)
            .map(|n| (n..fft_len).step_by(hop).map(|i| window[i] * window[i]).sum())
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            fft_len,
            hop,
            window,
            ola_norm,
            fwd: planner.plan_fft_forward(fft_len),
            inv: planner.plan_fft_inverse(fft_len),
        }
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Windowed DFT of exactly `fft_len` samples; bins `0..=fft_len/2`.
    pub fn analyze(&self, samples: &[f64]) -> Result<SpectralFrame, ModelError> {
        if samples.len() != self.fft_len {
            return Err(ModelError::Shape(format!(
                "stft expects {} samples, got {}",
                self.fft_len,
                samples.len()
            )));
        }
        let mut buf: Vec<Complex64> =
            samples.iter().zip(&self.window).map(|(&x, &w)| Complex64::new(x * w, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.bins());
        Ok(SpectralFrame::from_bins(buf))
    }

    /// Real inverse DFT of a half spectrum (Hermitian extension).
    pub fn inverse(&self, frame: &SpectralFrame) -> Vec<f64> {
        let n = self.fft_len;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (k, b) in frame.bins.iter().enumerate().take(n / 2 + 1) {
            buf[k] = *b;
            if k > 0 && k < n - k {
                buf[n - k] = b.conj();
            }
        }
        // DC and Nyquist bins of a real signal are real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Overlap-add tail carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct OlaState {
    tail: Vec<f64>,
}

impl OlaState {
    pub fn new(stft: &Stft) -> Self {
        Self { tail: vec![0.0; stft.fft_len - stft.hop] }
    }

    pub fn tail(&self) -> &[f64] {
        &self.tail
    }
}

/// Synthesize one hop of output: inverse DFT, synthesis window, overlap-add,
/// window-sum normalization. Output lags the analysis input by `fft_len - hop`.
pub fn istft_synthesize(stft: &Stft, frame: &SpectralFrame, state: &mut OlaState) -> Vec<f64> {
    let (n, hop) = (stft.fft_len, stft.hop);
    let y = stft.inverse(frame);
    let mut acc: Vec<f64> = state.tail.clone();
    acc.resize(n, 0.0);
    for i in 0..n {
        acc[i] += y[i] * stft.window[i];
    }
    let out = (0..hop).map(|i| acc[i] / stft.ola_norm[i]).collect();
    state.tail.copy_from_slice(&acc[hop..]);
    out
}

pub fn stft_analyze(stft: &Stft, samples: &[f64]) -> Result<SpectralFrame, ModelError> {
    stft.analyze(samples)
}

/// Sliding analysis window over a sample stream (history starts at zero).
#[derive(Debug, Clone)]
pub struct Framer {
    buf: Vec<f64>,
    hop: usize,
}

impl Framer {
    pub fn new(fft_len: usize, hop: usize) -> Self {
        Self { buf: vec![0.0; fft_len], hop }
    }

    /// Push one hop of new samples and return the current analysis window.
    pub fn push(&mut self, hop_samples: &[f64]) -> &[f64] {
        assert_eq!(hop_samples.len(), self.hop);
        self.buf.rotate_left(self.hop);
        let n = self.buf.len();
        self.buf[n - self.hop..].copy_from_slice(hop_samples);
        &self.buf
    }
}
