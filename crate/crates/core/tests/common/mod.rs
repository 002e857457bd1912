//! Independent straight-line oracles shared by the integration tests.
//!
//! Nothing here calls the library's kernels: every operation is written
//! from its textbook definition with plain loops over `Vec<Vec<f64>>`.

#![allow(dead_code)]

use num_complex::Complex64;
use tftnn_core::model::{ModelConfig, NormMode, Weights};

pub mod rational;

pub type Mat = Vec<Vec<f64>>;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        fft_len: 16,
        hop: 4,
        freq_bins: 9,
        subband_len: 4,
        embed_dim: 4,
        heads: 2,
        head_dim: 2,
        enc_channels: 4,
        num_res_blocks: 2,
        dilations: vec![1, 2],
        gru_hidden: 3,
        ..ModelConfig::default()
    }
}

/// Direct O(N²) DFT, bins `0..=N/2`.
pub fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| Complex64::from_polar(v, -2.0 * std::f64::consts::PI * ((k * i) % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// Direct inverse DFT of a half spectrum of a real signal.
pub fn naive_idft_half(bins: &[Complex64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for k in 0..n {
                let b = if k <= n / 2 { bins[k] } else { bins[n - k].conj() };
                s += (b * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * ((k * i) % n) as f64 / n as f64)).re;
            }
            s / n as f64
        })
        .collect()
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2)).collect()
}

fn t<'a>(w: &'a Weights, name: &str) -> &'a [f64] {
    &w.get(name).unwrap().data
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-padded cross-correlation `y[o][p] = b[o] + Σ w[o][c][t] x[c][p·s + t·d − pad]`.
pub fn conv_naive(x: &Mat, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, dil: usize, pad: usize) -> Mat {
    let cin = x.len();
    let len = x[0].len();
    let out_len = (len + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut y = vec![vec![0.0; out_len]; cout];
    for o in 0..cout {
        for p in 0..out_len {
            let mut s = b[o];
            for c in 0..cin {
                for tap in 0..k {
                    let i = (p * stride + tap * dil) as isize - pad as isize;
                    if i >= 0 && (i as usize) < len {
                        s += w[(o * cin + c) * k + tap] * x[c][i as usize];
                    }
                }
            }
            y[o][p] = s;
        }
    }
    y
}

/// Transposed conv by scatter: input `i` through tap `t` lands on
/// output `2i − t + pad` of a length `2h − 1 + 2·pad − k + 1` map.
pub fn conv_up_scatter(x: &Mat, w: &[f64], b: &[f64], cout: usize, k: usize, pad: usize) -> Mat {
    let cin = x.len();
    let h = x[0].len();
    let out_len = 2 * h - 1 + 2 * pad - k + 1;
    let mut y: Mat = (0..cout).map(|o| vec![b[o]; out_len]).collect();
    for o in 0..cout {
        for c in 0..cin {
            for i in 0..h {
                for tap in 0..k {
                    let p = (2 * i + pad) as isize - tap as isize;
                    if p >= 0 && (p as usize) < out_len {
                        y[o][p as usize] += w[(o * cin + c) * k + tap] * x[c][i];
                    }
                }
            }
        }
    }
    y
}

pub fn bn(x: &Mat, w: &Weights, prefix: &str) -> Mat {
    let (g, be, m, v) =
        (t(w, &format!("{prefix}.gamma")), t(w, &format!("{prefix}.beta")), t(w, &format!("{prefix}.mean")), t(w, &format!("{prefix}.var")));
    x.iter()
        .enumerate()
        .map(|(c, row)| row.iter().map(|&u| (u - m[c]) / v[c].sqrt() * g[c] + be[c]).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, w: &Weights, prefix: &str) -> Mat {
    let (g, be) = (t(w, &format!("{prefix}.gamma")), t(w, &format!("{prefix}.beta")));
    let ch = x.len();
    let mut y = x.clone();
    for p in 0..x[0].len() {
        let mean = (0..ch).map(|c| x[c][p]).sum::<f64>() / ch as f64;
        let var = (0..ch).map(|c| (x[c][p] - mean).powi(2)).sum::<f64>() / ch as f64;
        for c in 0..ch {
            y[c][p] = (x[c][p] - mean) / (var + 1e-5).sqrt() * g[c] + be[c];
        }
    }
    y
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(x: &Mat, y: &Mat) -> Mat {
    x.iter().zip(y).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

pub fn mul(x: &Mat, y: &Mat) -> Mat {
    x.iter().zip(y).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).collect()).collect()
}

/// conv → BN (unfolded) → optional ReLU from named weights.
pub fn conv_layer(x: &Mat, w: &Weights, prefix: &str, cout: usize, k: usize, stride: usize, dil: usize, pad: usize, bn_on: bool, relu_on: bool) -> Mat {
    let mut y = conv_naive(x, t(w, &format!("{prefix}.w")), t(w, &format!("{prefix}.b")), cout, k, stride, dil, pad);
    if bn_on {
        y = bn(&y, w, &format!("{prefix}.bn"));
    }
    if relu_on {
        y = map(&y, relu);
    }
    y
}

pub fn drb(x: &Mat, w: &Weights, prefix: &str, cfg: &ModelConfig) -> Mat {
    let half = x.len() / 2;
    let mut y: Mat = x[..half].to_vec();
    for (s, &d) in cfg.dilations.iter().enumerate() {
        let pad = (cfg.kernel - 1) / 2 * d;
        let tt = conv_layer(&y, w, &format!("{prefix}.{s}"), half, cfg.kernel, 1, d, pad, true, true);
        y = add(&y, &tt);
    }
    y.extend_from_slice(&x[half..]);
    y
}

/// Softmax-free attention for one head by the defining formula
/// `out[c][i] = scale · Σ_j V[c][j] Σ_m Q[m][i] K[m][j]`.
pub fn attention_head(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    let (w, h) = (q.len(), q[0].len());
    let mut out = vec![vec![0.0; h]; w];
    for c in 0..w {
        for i in 0..h {
            let mut s = 0.0;
            for j in 0..h {
                let mut a = 0.0;
                for m in 0..w {
                    a += q[m][i] * k[m][j];
                }
                s += v[c][j] * a;
            }
            out[c][i] = s * scale;
        }
    }
    out
}

/// Textbook GRU cell at every position: gate order (r, z, n) in the
/// stacked matrices, `h' = (1 − z) n + z h`.
pub fn gru_textbook(x: &Mat, hid: &Mat, w_ih: &[f64], w_hh: &[f64], b_ih: &[f64], b_hh: &[f64]) -> Mat {
    let (e, hd, len) = (x.len(), hid.len(), x[0].len());
    let mut out = hid.clone();
    for p in 0..len {
        let lin = |g: usize, j: usize| {
            let mut a = b_ih[g * hd + j];
            for c in 0..e {
                a += w_ih[(g * hd + j) * e + c] * x[c][p];
            }
            let mut bh = b_hh[g * hd + j];
            for c in 0..hd {
                bh += w_hh[(g * hd + j) * hd + c] * hid[c][p];
            }
            (a, bh)
        };
        for j in 0..hd {
            let (ar, br) = lin(0, j);
            let (az, bz) = lin(1, j);
            let (an, bnn) = lin(2, j);
            let r = sigmoid(ar + br);
            let z = sigmoid(az + bz);
            let n = (an + r * bnn).tanh();
            out[j][p] = (1.0 - z) * n + z * hid[j][p];
        }
    }
    out
}

fn proj(x: &Mat, w: &Weights, prefix: &str, cout: usize, bn_on: bool) -> Mat {
    conv_layer(x, w, prefix, cout, 1, 1, 1, 0, bn_on, false)
}

pub fn transformer_block(x: &Mat, hid: &mut Mat, w: &Weights, cfg: &ModelConfig, i: usize) -> Mat {
    let p = format!("tb{i}");
    let e = cfg.embed_dim;
    let q = proj(x, w, &format!("{p}.q"), e, true);
    let k = proj(x, w, &format!("{p}.k"), e, true);
    let v = proj(x, w, &format!("{p}.v"), e, false);
    let scale = if cfg.attention_scale { 1.0 / cfg.subband_len as f64 } else { 1.0 };
    let mut att = Vec::new();
    for hd in 0..cfg.heads {
        let r = hd * cfg.head_dim..(hd + 1) * cfg.head_dim;
        att.extend(attention_head(&q[r.clone()].to_vec(), &k[r.clone()].to_vec(), &v[r].to_vec(), scale));
    }
    let y = proj(&att, w, &format!("{p}.o"), e, true);
    let norm = |m: &Mat, n: &str| match cfg.norm {
        NormMode::Bn => bn(m, w, &format!("{p}.{n}")),
        NormMode::Ln => layer_norm(m, w, &format!("{p}.{n}")),
    };
    let x1 = norm(&add(x, &y), "norm1");
    *hid = gru_textbook(
        &x1,
        hid,
        t(w, &format!("{p}.gru.w_ih")),
        t(w, &format!("{p}.gru.w_hh")),
        t(w, &format!("{p}.gru.b_ih")),
        t(w, &format!("{p}.gru.b_hh")),
    );
    let f = proj(hid, w, &format!("{p}.ffn"), e, true);
    norm(&add(&x1, &f), "norm2")
}

pub fn mask_module(x: &Mat, w: &Weights, cfg: &ModelConfig) -> Mat {
    let c = cfg.enc_channels;
    let m1 = conv_layer(x, w, "mask.m1", c, 1, 1, 1, 0, false, true);
    conv_layer(&m1, w, "mask.m2", c, 1, 1, 1, 0, false, true)
}

/// Whole network for one frame; `hid` holds one `[H][h]` state per block.
pub fn forward(mag: &[f64], w: &Weights, cfg: &ModelConfig, hid: &mut [Mat]) -> Vec<f64> {
    let (c, half, k) = (cfg.enc_channels, cfg.enc_channels / 2, cfg.kernel);
    let x = vec![mag.to_vec()];
    let x = conv_layer(&x, w, "enc_in", c, 1, 1, 1, 0, true, true);
    let x = conv_layer(&x, w, "enc_down", c, k, 2, 1, (k - 3) / 2, true, true);
    let enc = drb(&x, w, "enc_drb", cfg);
    let mut tr = conv_layer(&enc, w, "tr_in", cfg.embed_dim, 1, 1, 1, 0, true, true);
    for (i, hd) in hid.iter_mut().enumerate() {
        tr = transformer_block(&tr, hd, w, cfg, i);
    }
    let m = mask_module(&tr, w, cfg);
    let d = drb(&mul(&m, &enc), w, "dec_drb", cfg);
    let mut u = conv_up_scatter(&d, t(w, "dec_up.w"), t(w, "dec_up.b"), half, k, (k + 1) / 2);
    u = map(&bn(&u, w, "dec_up.bn"), relu);
    let y = conv_layer(&u, w, "dec_out", 1, 1, 1, 1, 0, false, true);
    y[0].clone()
}

pub fn zero_hidden(cfg: &ModelConfig) -> Vec<Mat> {
    vec![vec![vec![0.0; cfg.subband_len]; cfg.gru_hidden]; cfg.num_transformer_blocks]
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Deterministic noise-like signal from a seeded generator.
pub fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-amp..amp)).collect()
}
