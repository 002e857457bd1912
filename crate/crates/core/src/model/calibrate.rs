//! BN running-statistics calibration.
//!
//! Random weights paired with arbitrary BN statistics let activations grow
//! without bound through the cubic attention. Calibration walks the network
//! layer by layer over a batch of frames and sets every BN mean/var to the
//! observed per-channel statistics of its input, as a trained model's
//! running averages would be.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arith::{F64Arith, Tensor};
use super::config::{ModelConfig, NormMode};
use super::net::{affine, attention, conv, ew_add, ew_mul, gru_layer, layer_norm};
use super::net::{Affine, Conv, ConvGeom, Gru, LayerMacs};
use super::stft::Stft;
use super::weights::Weights;
use super::ModelError;

/// Keeps dead channels from producing huge BN scales.
const VAR_FLOOR: f64 = 1e-6;

/// Per-channel mean and population variance over frames and positions.
fn stats(xs: &[Tensor<f64>]) -> (Vec<f64>, Vec<f64>) {
    let ch = xs[0].channels;
    let n = (xs.len() * xs[0].len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        mean[c] = xs.iter().flat_map(|t| t.row(c)).sum::<f64>() / n;
        var[c] = (xs.iter().flat_map(|t| t.row(c)).map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n).max(VAR_FLOOR);
    }
    (mean, var)
}

struct Cal<'a> {
    w: &'a mut Weights,
}

impl Cal<'_> {
    fn t(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        Ok(self.w.get(name)?.data.clone())
    }

    /// Set `{prefix}.mean/var` from `xs` and apply the BN.
    fn bn(&mut self, prefix: &str, xs: Vec<Tensor<f64>>) -> Result<Vec<Tensor<f64>>, ModelError> {
        let (mean, var) = stats(&xs);
        self.w.get_mut(&format!("{prefix}.mean"))?.data = mean.clone();
        self.w.get_mut(&format!("{prefix}.var"))?.data = var.clone();
        let g = self.t(&format!("{prefix}.gamma"))?;
        let b = self.t(&format!("{prefix}.beta"))?;
        let scale: Vec<f64> = g.iter().zip(&var).map(|(g, v)| g / v.sqrt()).collect();
        let shift: Vec<f64> = (0..g.len()).map(|c| b[c] - mean[c] * scale[c]).collect();
        let aff = Affine { scale, shift };
        Ok(xs.iter().map(|x| affine(&F64Arith, x, &aff, false)).collect())
    }

    fn conv(&mut self, prefix: &str, geom: ConvGeom, xs: &[Tensor<f64>], bn: bool, relu: bool) -> Result<Vec<Tensor<f64>>, ModelError> {
        let cv = Conv { geom, w: self.t(&format!("{prefix}.w"))?, b: self.t(&format!("{prefix}.b"))?, post: None, relu: false };
        let mut ys: Vec<Tensor<f64>> = xs.iter().map(|x| conv(&F64Arith, x, &cv, None, &mut LayerMacs::default())).collect();
        if bn {
            ys = self.bn(&format!("{prefix}.bn"), ys)?;
        }
        if relu {
            ys = ys.iter().map(|y| y.map(|v| v.max(0.0))).collect();
        }
        Ok(ys)
    }

    fn drb(&mut self, prefix: &str, cfg: &ModelConfig, xs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, ModelError> {
        let half = cfg.half_channels();
        let mut ys: Vec<Tensor<f64>> = xs.iter().map(|x| x.rows(0, half)).collect();
        for (s, &d) in cfg.dilations.iter().enumerate() {
            let ts = self.conv(&format!("{prefix}.{s}"), ConvGeom::same(half, cfg.kernel, d, cfg.subband_len), &ys, true, true)?;
            ys = ys.iter().zip(&ts).map(|(y, t)| ew_add(&F64Arith, y, t, false)).collect();
        }
        Ok(xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let mut o = x.clone();
                o.set_rows(0, y);
                o
            })
            .collect())
    }

    fn norm(&mut self, prefix: &str, mode: NormMode, xs: Vec<Tensor<f64>>, e: usize) -> Result<Vec<Tensor<f64>>, ModelError> {
        match mode {
            NormMode::Bn => self.bn(prefix, xs),
            NormMode::Ln => {
                let g = self.t(&format!("{prefix}.gamma"))?;
                let b = self.t(&format!("{prefix}.beta"))?;
                Ok(xs.iter().map(|x| layer_norm(&F64Arith, x, &g, &b, 1.0 / e as f64)).collect())
            }
        }
    }
}

/// Calibrate all BN statistics in place on a sequence of magnitude frames
/// (processed in order, so the GRU state evolves as in streaming).
pub fn calibrate_bn(cfg: &ModelConfig, weights: &mut Weights, frames: &[Vec<f64>]) -> Result<(), ModelError> {
    cfg.validate()?;
    weights.check(cfg)?;
    if frames.is_empty() {
        return Ok(());
    }
    let (f, h, c, half, e, hd, k) =
        (cfg.freq_bins, cfg.subband_len, cfg.enc_channels, cfg.half_channels(), cfg.embed_dim, cfg.gru_hidden, cfg.kernel);
    let mut cal = Cal { w: weights };
    let xs: Vec<Tensor<f64>> = frames.iter().map(|m| Tensor::from_vec(1, f, m.clone())).collect();
    let xs = cal.conv("enc_in", ConvGeom::pointwise(1, c, f), &xs, true, true)?;
    let down = ConvGeom { cin: c, cout: c, k, stride: 2, dilation: 1, pad: cfg.down_pad(), upsample: 1, in_len: f, out_len: h };
    let xs = cal.conv("enc_down", down, &xs, true, true)?;
    let enc = cal.drb("enc_drb", cfg, &xs)?;
    let mut ts = cal.conv("tr_in", ConvGeom::pointwise(c, e, h), &enc, true, true)?;
    let scale = cfg.attention_scale.then(|| 1.0 / h as f64);
    for i in 0..cfg.num_transformer_blocks {
        let p = format!("tb{i}");
        let pw = ConvGeom::pointwise(e, e, h);
        let q = cal.conv(&format!("{p}.q"), pw, &ts, true, false)?;
        let kk = cal.conv(&format!("{p}.k"), pw, &ts, true, false)?;
        let v = cal.conv(&format!("{p}.v"), pw, &ts, false, false)?;
        let att: Vec<Tensor<f64>> = (0..ts.len())
            .map(|j| {
                let mut qkv = Tensor::filled(3 * e, h, 0.0);
                qkv.set_rows(0, &q[j]);
                qkv.set_rows(e, &kk[j]);
                qkv.set_rows(2 * e, &v[j]);
                attention(&F64Arith, &qkv, cfg.heads, cfg.head_dim, scale, cfg.attention_order, &mut LayerMacs::default())
            })
            .collect();
        let o = cal.conv(&format!("{p}.o"), pw, &att, true, false)?;
        let sum: Vec<Tensor<f64>> = ts.iter().zip(&o).map(|(x, y)| ew_add(&F64Arith, x, y, false)).collect();
        let x1 = cal.norm(&format!("{p}.norm1"), cfg.norm, sum, e)?;
        let gru = Gru::from_weights(cal.w, &p, e, hd, h)?;
        let mut hid = Tensor::filled(hd, h, 0.0);
        let mut hs = Vec::with_capacity(x1.len());
        for x in &x1 {
            hid = gru_layer(&F64Arith, x, &hid, &gru, &mut LayerMacs::default());
            hs.push(hid.clone());
        }
        let fo = cal.conv(&format!("{p}.ffn"), ConvGeom::pointwise(hd, e, h), &hs, true, false)?;
        let sum: Vec<Tensor<f64>> = x1.iter().zip(&fo).map(|(x, y)| ew_add(&F64Arith, x, y, false)).collect();
        ts = cal.norm(&format!("{p}.norm2"), cfg.norm, sum, e)?;
    }
    let m1 = cal.conv("mask.m1", ConvGeom::pointwise(e, c, h), &ts, false, true)?;
    let m2 = cal.conv("mask.m2", ConvGeom::pointwise(c, c, h), &m1, false, true)?;
    let masked: Vec<Tensor<f64>> =
        m2.iter().zip(&enc).map(|(m, x)| ew_mul(&F64Arith, m, x, None, &mut LayerMacs::default())).collect();
    let d = cal.drb("dec_drb", cfg, &masked)?;
    let up = ConvGeom { cin: c, cout: half, k, stride: 1, dilation: 1, pad: cfg.up_pad(), upsample: 2, in_len: h, out_len: f };
    cal.conv("dec_up", up, &d, true, true)?;
    Ok(())
}

/// Magnitude frames of seeded uniform noise at the given amplitude.
pub fn noise_frames(cfg: &ModelConfig, seed: u64, count: usize, amp: f64) -> Vec<Vec<f64>> {
    let stft = Stft::new(cfg.fft_len, cfg.hop);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig: Vec<f64> = (0..cfg.fft_len + count * cfg.hop).map(|_| rng.gen_range(-amp..amp)).collect();
    (0..count)
        .map(|i| stft.analyze(&sig[i * cfg.hop..i * cfg.hop + cfg.fft_len]).expect("frame length").magnitude)
        .collect()
}

/// Amplitude and frame count of the calibration signal.
pub const CAL_AMPLITUDE: f64 = 0.25;
pub const CAL_FRAMES: usize = 8;

impl Weights {
    /// Seeded random weights with BN statistics calibrated on seeded noise.
    pub fn calibrated(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut w = Weights::random(cfg, seed);
        let frames = noise_frames(cfg, seed ^ 0x5eed, CAL_FRAMES, CAL_AMPLITUDE);
        calibrate_bn(cfg, &mut w, &frames)?;
        Ok(w)
    }
}
