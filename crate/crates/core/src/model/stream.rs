//! Streaming enhancement: framing, STFT, a magnitude engine, noisy-phase
//! recombination and overlap-add synthesis.

use super::arith::{Arith, F64Arith, QuantArith};
use super::config::ModelConfig;
use super::net::{forward, MacCounter, Net, NetState};
use super::stft::{istft_synthesize, Framer, OlaState, SpectralFrame, Stft};
use super::weights::Weights;
use super::ModelError;
use crate::numerics::Format;

/// Maps a noisy magnitude frame to an enhanced one, carrying its own
/// recurrent state.
pub trait MagnitudeEngine {
    type Error: From<ModelError>;
    fn enhance_magnitude(&mut self, noisy: &[f64]) -> Result<Vec<f64>, Self::Error>;
    fn reset(&mut self);
}

/// Full-precision golden model.
#[derive(Debug, Clone)]
pub struct GoldenF64 {
    pub net: Net<f64>,
    pub state: NetState<f64>,
    pub macs: MacCounter,
}

impl GoldenF64 {
    pub fn new(cfg: &ModelConfig, weights: &Weights) -> Result<Self, ModelError> {
        let net = Net::from_weights(cfg, weights)?;
        Ok(Self { state: NetState::zeros(cfg, 0.0), net, macs: MacCounter::default() })
    }
}

impl MagnitudeEngine for GoldenF64 {
    type Error = ModelError;
    fn enhance_magnitude(&mut self, noisy: &[f64]) -> Result<Vec<f64>, ModelError> {
        forward(&F64Arith, &self.net, noisy, &mut self.state, &mut self.macs, None)
    }
    fn reset(&mut self) {
        self.state = NetState::zeros(&self.net.cfg, 0.0);
    }
}

/// Bit-exact quantized golden model.
#[derive(Debug)]
pub struct GoldenQuant {
    pub arith: QuantArith,
    pub net: Net<u16>,
    pub state: NetState<u16>,
    pub macs: MacCounter,
}

impl GoldenQuant {
    pub fn new(cfg: &ModelConfig, weights: &Weights, fmt: Format) -> Result<Self, ModelError> {
        let net = Net::from_weights(cfg, weights)?.quantize(fmt);
        Ok(Self::from_net(net, fmt))
    }

    pub fn from_net(net: Net<u16>, fmt: Format) -> Self {
        let state = NetState::zeros(&net.cfg, 0);
        Self { arith: QuantArith::new(fmt), net, state, macs: MacCounter::default() }
    }

    /// One frame on already-encoded codes.
    pub fn step_codes(&mut self, input: &[u16]) -> Result<Vec<u16>, ModelError> {
        forward(&self.arith, &self.net, input, &mut self.state, &mut self.macs, None)
    }
}

impl MagnitudeEngine for GoldenQuant {
    type Error = ModelError;
    fn enhance_magnitude(&mut self, noisy: &[f64]) -> Result<Vec<f64>, ModelError> {
        let codes: Vec<u16> = noisy.iter().map(|&x| self.arith.from_f64(x)).collect();
        let out = self.step_codes(&codes)?;
        Ok(out.iter().map(|&c| self.arith.to_f64(c)).collect())
    }
    fn reset(&mut self) {
        self.state = NetState::zeros(&self.net.cfg, 0);
    }
}

/// Streaming state outside the magnitude engine.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub framer: Framer,
    pub ola: OlaState,
}

/// Sample-stream enhancer around any magnitude engine.
#[derive(Debug)]
pub struct Enhancer<E> {
    pub engine: E,
    pub stft: Stft,
    pub state: StreamState,
}

impl<E: MagnitudeEngine> Enhancer<E> {
    pub fn new(cfg: &ModelConfig, engine: E) -> Self {
        let stft = Stft::new(cfg.fft_len, cfg.hop);
        let state = StreamState { framer: Framer::new(cfg.fft_len, cfg.hop), ola: OlaState::new(&stft) };
        Self { engine, stft, state }
    }

    /// Enhance one analysis frame and synthesize one hop of output.
    pub fn tftnn_step(&mut self, frame: &SpectralFrame) -> Result<Vec<f64>, E::Error> {
        let mag = self.engine.enhance_magnitude(&frame.magnitude)?;
        let enhanced = frame.with_magnitude(&mag);
        Ok(istft_synthesize(&self.stft, &enhanced, &mut self.state.ola))
    }

    /// Push one hop of input samples and get one hop of output samples.
    pub fn push_hop(&mut self, hop: &[f64]) -> Result<Vec<f64>, E::Error> {
        let window = self.state.framer.push(hop).to_vec();
        let frame = self.stft.analyze(&window)?;
        self.tftnn_step(&frame)
    }

    /// Enhance a whole signal hop by hop. The signal is zero-padded to a
    /// whole number of hops and followed by enough zero hops to flush the
    /// overlap-add tail; the output is aligned to and as long as the input.
    pub fn process(&mut self, samples: &[f64]) -> Result<Vec<f64>, E::Error> {
        let hop = self.stft.hop();
        let lag = self.stft.fft_len() - hop;
        let hops = samples.len().div_ceil(hop) + lag / hop;
        let mut out = Vec::with_capacity(hops * hop);
        let mut buf = vec![0.0; hop];
        for i in 0..hops {
            buf.iter_mut().for_each(|x| *x = 0.0);
            let lo = (i * hop).min(samples.len());
            let hi = ((i + 1) * hop).min(samples.len());
            buf[..hi - lo].copy_from_slice(&samples[lo..hi]);
            out.extend(self.push_hop(&buf)?);
        }
        Ok(out[lag..lag + samples.len()].to_vec())
    }
}
