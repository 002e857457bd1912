//! Deployed network (BN folded or not, full precision or quantized) and
//! its forward pass, written once over [`Arith`].
//!
//! Every kernel here fixes the rounding points the accelerator uses:
//! one rounding per conv/matmul output (bias and accumulate-addend
//! included exactly), one per element-wise op, one per activation.

use super::arith::{Arith, Tensor};
use super::config::{AttentionOrder, ModelConfig, NormMode};
use super::weights::Weights;
use super::ModelError;
use crate::numerics::{ActKind, Format};

/// Geometry of one 1-D conv along the frequency axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    /// Zero-insertion factor applied to the input before the conv (transposed conv).
    pub upsample: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn pointwise(cin: usize, cout: usize, len: usize) -> Self {
        Self { cin, cout, k: 1, stride: 1, dilation: 1, pad: 0, upsample: 1, in_len: len, out_len: len }
    }

    /// Same-padded dilated conv.
    pub fn same(ch: usize, k: usize, dilation: usize, len: usize) -> Self {
        Self { cin: ch, cout: ch, k, stride: 1, dilation, pad: (k - 1) / 2 * dilation, upsample: 1, in_len: len, out_len: len }
    }

    /// Input index read by output position `p`, tap `t`; `None` for padding
    /// and inserted zeros.
    #[inline]
    pub fn src(&self, p: usize, t: usize) -> Option<usize> {
        let vi = (p * self.stride + t * self.dilation) as isize - self.pad as isize;
        if vi < 0 {
            return None;
        }
        let vi = vi as usize;
        if vi % self.upsample != 0 {
            return None;
        }
        let i = vi / self.upsample;
        (i < self.in_len).then_some(i)
    }

    pub fn macs(&self) -> u64 {
        (self.cout * self.cin * self.k * self.out_len) as u64
    }
}

/// Per-channel `y = x * scale + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<V> {
    pub scale: Vec<V>,
    pub shift: Vec<V>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<V> {
    pub geom: ConvGeom,
    /// `[cout][cin][k]`
    pub w: Vec<V>,
    pub b: Vec<V>,
    /// Unfolded BN applied as a separate pass.
    pub post: Option<Affine<V>>,
    /// ReLU at the end of the layer (after `post` when present).
    pub relu: bool,
}

impl<V: Copy> Conv<V> {
    #[inline]
    pub fn weight(&self, o: usize, c: usize, t: usize) -> V {
        self.w[(o * self.geom.cin + c) * self.geom.k + t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm<V> {
    /// Batch norm at inference: one affine sweep.
    Affine(Affine<V>),
    /// Layer norm over channels at each position.
    Layer { gamma: Vec<V>, beta: Vec<V> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gru<V> {
    pub hidden: usize,
    /// Input linears for reset, update and new gates stacked: `[3H][E]`.
    pub w_ih: Conv<V>,
    pub w_hr: Conv<V>,
    pub w_hz: Conv<V>,
    pub w_hn: Conv<V>,
}

impl Gru<f64> {
    /// Split the stacked `{prefix}.gru.*` tensors into per-gate linears.
    pub fn from_weights(w: &Weights, prefix: &str, e: usize, hd: usize, len: usize) -> Result<Self, ModelError> {
        let t = |n: &str| -> Result<Vec<f64>, ModelError> { Ok(w.get(&format!("{prefix}.gru.{n}"))?.data.clone()) };
        let (w_ih, w_hh, b_ih, b_hh) = (t("w_ih")?, t("w_hh")?, t("b_ih")?, t("b_hh")?);
        let gate = |g: usize| Conv {
            geom: ConvGeom::pointwise(hd, hd, len),
            w: w_hh[g * hd * hd..(g + 1) * hd * hd].to_vec(),
            b: b_hh[g * hd..(g + 1) * hd].to_vec(),
            post: None,
            relu: false,
        };
        Ok(Gru {
            hidden: hd,
            w_ih: Conv { geom: ConvGeom::pointwise(e, 3 * hd, len), w: w_ih, b: b_ih, post: None, relu: false },
            w_hr: gate(0),
            w_hz: gate(1),
            w_hn: gate(2),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<V> {
    /// Q, K, V projections stacked: `[3E][E]`, Q and K carry their BN.
    pub qkv: Conv<V>,
    /// Output projection with the extra BN.
    pub out: Conv<V>,
    pub norm1: Norm<V>,
    pub gru: Gru<V>,
    pub ffn: Conv<V>,
    pub norm2: Norm<V>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net<V> {
    pub cfg: ModelConfig,
    pub enc_in: Conv<V>,
    pub enc_down: Conv<V>,
    pub enc_drb: Vec<Conv<V>>,
    pub tr_in: Conv<V>,
    pub blocks: Vec<Block<V>>,
    pub mask1: Conv<V>,
    pub mask2: Conv<V>,
    pub dec_drb: Vec<Conv<V>>,
    pub dec_up: Conv<V>,
    pub dec_out: Conv<V>,
    /// Attention score scale (1/h) when enabled.
    pub attn_scale: Option<V>,
    /// 1/E, used by layer norm.
    pub inv_embed: V,
}

/// Fold inference BN into the preceding conv: `conv'(x) = bn(conv(x))`.
pub fn fold_bn(w: &[f64], b: &[f64], cout: usize, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let per = w.len() / cout;
    let mut w2 = w.to_vec();
    let mut b2 = b.to_vec();
    for o in 0..cout {
        if var[o] <= 0.0 {
            return Err(ModelError::NonPositiveVariance(format!("channel {o}")));
        }
        let s = gamma[o] / var[o].sqrt();
        for x in &mut w2[o * per..(o + 1) * per] {
            *x *= s;
        }
        b2[o] = (b[o] - mean[o]) * s + beta[o];
    }
    Ok((w2, b2))
}

/// Inference BN as a per-channel affine.
pub fn bn_affine(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Result<Affine<f64>, ModelError> {
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for o in 0..gamma.len() {
        if var[o] <= 0.0 {
            return Err(ModelError::NonPositiveVariance(format!("channel {o}")));
        }
        let s = gamma[o] / var[o].sqrt();
        scale.push(s);
        shift.push(beta[o] - mean[o] * s);
    }
    Ok(Affine { scale, shift })
}

struct Builder<'a> {
    w: &'a Weights,
    fold: bool,
}

impl Builder<'_> {
    fn t(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        Ok(self.w.get(name)?.data.clone())
    }

    fn bn(&self, prefix: &str) -> Result<[Vec<f64>; 4], ModelError> {
        Ok([
            self.t(&format!("{prefix}.gamma"))?,
            self.t(&format!("{prefix}.beta"))?,
            self.t(&format!("{prefix}.mean"))?,
            self.t(&format!("{prefix}.var"))?,
        ])
    }

    fn conv(&self, prefix: &str, geom: ConvGeom, bn: bool, relu: bool) -> Result<Conv<f64>, ModelError> {
        let w = self.t(&format!("{prefix}.w"))?;
        let b = self.t(&format!("{prefix}.b"))?;
        if !bn {
            return Ok(Conv { geom, w, b, post: None, relu });
        }
        let [g, be, m, v] = self.bn(&format!("{prefix}.bn"))?;
        if self.fold {
            let (w, b) = fold_bn(&w, &b, geom.cout, &g, &be, &m, &v)?;
            Ok(Conv { geom, w, b, post: None, relu })
        } else {
            Ok(Conv { geom, w, b, post: Some(bn_affine(&g, &be, &m, &v)?), relu })
        }
    }

    fn norm(&self, prefix: &str, mode: NormMode) -> Result<Norm<f64>, ModelError> {
        let [g, be, m, v] = self.bn(prefix)?;
        Ok(match mode {
            NormMode::Bn => Norm::Affine(bn_affine(&g, &be, &m, &v)?),
            NormMode::Ln => Norm::Layer { gamma: g, beta: be },
        })
    }
}

impl Net<f64> {
    /// Build the deployed full-precision network from raw weights.
    pub fn from_weights(cfg: &ModelConfig, weights: &Weights) -> Result<Self, ModelError> {
        cfg.validate()?;
        weights.check(cfg)?;
        let b = Builder { w: weights, fold: cfg.fold_bn };
        let (f, h, c, half, e, hd, k) =
            (cfg.freq_bins, cfg.subband_len, cfg.enc_channels, cfg.half_channels(), cfg.embed_dim, cfg.gru_hidden, cfg.kernel);

        let enc_in = b.conv("enc_in", ConvGeom::pointwise(1, c, f), true, true)?;
        let down = ConvGeom { cin: c, cout: c, k, stride: 2, dilation: 1, pad: cfg.down_pad(), upsample: 1, in_len: f, out_len: h };
        let enc_down = b.conv("enc_down", down, true, true)?;
        let drb = |p: &str| -> Result<Vec<Conv<f64>>, ModelError> {
            cfg.dilations
                .iter()
                .enumerate()
                .map(|(s, &d)| b.conv(&format!("{p}.{s}"), ConvGeom::same(half, k, d, h), true, true))
                .collect()
        };
        let enc_drb = drb("enc_drb")?;
        let tr_in = b.conv("tr_in", ConvGeom::pointwise(c, e, h), true, true)?;

        let mut blocks = Vec::new();
        for i in 0..cfg.num_transformer_blocks {
            let p = format!("tb{i}");
            let q = b.conv(&format!("{p}.q"), ConvGeom::pointwise(e, e, h), true, false)?;
            let kk = b.conv(&format!("{p}.k"), ConvGeom::pointwise(e, e, h), true, false)?;
            let v = b.conv(&format!("{p}.v"), ConvGeom::pointwise(e, e, h), false, false)?;
            let qkv = stack(&[q, kk, v], ConvGeom::pointwise(e, 3 * e, h));
            let out = b.conv(&format!("{p}.o"), ConvGeom::pointwise(e, e, h), true, false)?;
            let gru = Gru::from_weights(weights, &p, e, hd, h)?;
            blocks.push(Block {
                qkv,
                out,
                norm1: b.norm(&format!("{p}.norm1"), cfg.norm)?,
                gru,
                ffn: b.conv(&format!("{p}.ffn"), ConvGeom::pointwise(hd, e, h), true, false)?,
                norm2: b.norm(&format!("{p}.norm2"), cfg.norm)?,
            });
        }

        let mask1 = b.conv("mask.m1", ConvGeom::pointwise(e, c, h), false, true)?;
        let mask2 = b.conv("mask.m2", ConvGeom::pointwise(c, c, h), false, true)?;
        let dec_drb = drb("dec_drb")?;
        let up = ConvGeom { cin: c, cout: half, k, stride: 1, dilation: 1, pad: cfg.up_pad(), upsample: 2, in_len: h, out_len: f };
        debug_assert_eq!((h - 1) * 2 + 1 + 2 * cfg.up_pad() - k + 1, f);
        let dec_up = b.conv("dec_up", up, true, true)?;
        let dec_out = b.conv("dec_out", ConvGeom::pointwise(half, 1, f), false, true)?;

        Ok(Net {
            cfg: cfg.clone(),
            enc_in,
            enc_down,
            enc_drb,
            tr_in,
            blocks,
            mask1,
            mask2,
            dec_drb,
            dec_up,
            dec_out,
            attn_scale: cfg.attention_scale.then(|| 1.0 / h as f64),
            inv_embed: 1.0 / e as f64,
        })
    }

    /// Round every deployed parameter into `fmt`.
    pub fn quantize(&self, fmt: Format) -> Net<u16> {
        self.map(&|x| fmt.encode(x))
    }
}

/// Stack pointwise convs along output channels; `post` affines are merged
/// with identity rows for members that have none.
fn stack(parts: &[Conv<f64>], geom: ConvGeom) -> Conv<f64> {
    let mut w = Vec::new();
    let mut b = Vec::new();
    let any_post = parts.iter().any(|p| p.post.is_some());
    let mut scale = Vec::new();
    let mut shift = Vec::new();
    for p in parts {
        w.extend_from_slice(&p.w);
        b.extend_from_slice(&p.b);
        match &p.post {
            Some(a) => {
                scale.extend_from_slice(&a.scale);
                shift.extend_from_slice(&a.shift);
            }
            None => {
                scale.extend(std::iter::repeat(1.0).take(p.geom.cout));
                shift.extend(std::iter::repeat(0.0).take(p.geom.cout));
            }
        }
    }
    Conv { geom, w, b, post: any_post.then_some(Affine { scale, shift }), relu: false }
}

impl<V: Copy> Affine<V> {
    fn map<U>(&self, f: &impl Fn(V) -> U) -> Affine<U> {
        Affine { scale: self.scale.iter().map(|&x| f(x)).collect(), shift: self.shift.iter().map(|&x| f(x)).collect() }
    }
}

impl<V: Copy> Conv<V> {
    fn map<U>(&self, f: &impl Fn(V) -> U) -> Conv<U> {
        Conv {
            geom: self.geom,
            w: self.w.iter().map(|&x| f(x)).collect(),
            b: self.b.iter().map(|&x| f(x)).collect(),
            post: self.post.as_ref().map(|a| a.map(f)),
            relu: self.relu,
        }
    }
}

impl<V: Copy> Norm<V> {
    fn map<U>(&self, f: &impl Fn(V) -> U) -> Norm<U> {
        match self {
            Norm::Affine(a) => Norm::Affine(a.map(f)),
            Norm::Layer { gamma, beta } => {
                Norm::Layer { gamma: gamma.iter().map(|&x| f(x)).collect(), beta: beta.iter().map(|&x| f(x)).collect() }
            }
        }
    }
}

impl<V: Copy> Net<V> {
    pub fn map<U>(&self, f: &impl Fn(V) -> U) -> Net<U> {
        Net {
            cfg: self.cfg.clone(),
            enc_in: self.enc_in.map(f),
            enc_down: self.enc_down.map(f),
            enc_drb: self.enc_drb.iter().map(|c| c.map(f)).collect(),
            tr_in: self.tr_in.map(f),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    qkv: b.qkv.map(f),
                    out: b.out.map(f),
                    norm1: b.norm1.map(f),
                    gru: Gru {
                        hidden: b.gru.hidden,
                        w_ih: b.gru.w_ih.map(f),
                        w_hr: b.gru.w_hr.map(f),
                        w_hz: b.gru.w_hz.map(f),
                        w_hn: b.gru.w_hn.map(f),
                    },
                    ffn: b.ffn.map(f),
                    norm2: b.norm2.map(f),
                })
                .collect(),
            mask1: self.mask1.map(f),
            mask2: self.mask2.map(f),
            dec_drb: self.dec_drb.iter().map(|c| c.map(f)).collect(),
            dec_up: self.dec_up.map(f),
            dec_out: self.dec_out.map(f),
            attn_scale: self.attn_scale.map(f),
            inv_embed: f(self.inv_embed),
        }
    }
}

/// MAC and zero-operand counts of one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerMacs {
    pub macs: u64,
    /// MACs whose activation (broadcast) operand is exactly zero.
    pub zero_operands: u64,
}

/// Per-layer MAC instrumentation, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub layers: Vec<(String, LayerMacs)>,
}

impl MacCounter {
    pub fn layer(&mut self, name: &str) -> &mut LayerMacs {
        if let Some(i) = self.layers.iter().position(|(n, _)| n == name) {
            return &mut self.layers[i].1;
        }
        self.layers.push((name.to_string(), LayerMacs::default()));
        &mut self.layers.last_mut().unwrap().1
    }

    pub fn get(&self, name: &str) -> Option<LayerMacs> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }

    pub fn total(&self) -> LayerMacs {
        self.layers.iter().fold(LayerMacs::default(), |acc, (_, m)| LayerMacs {
            macs: acc.macs + m.macs,
            zero_operands: acc.zero_operands + m.zero_operands,
        })
    }
}

/// Conv with bias, optional exact addend (accumulate mode), optional
/// post affine and ReLU.
pub fn conv<A: Arith>(a: &A, x: &Tensor<A::V>, cv: &Conv<A::V>, addend: Option<&Tensor<A::V>>, cnt: &mut LayerMacs) -> Tensor<A::V> {
    let g = &cv.geom;
    assert_eq!((x.channels, x.len), (g.cin, g.in_len), "conv input shape");
    let mut out = Tensor::filled(g.cout, g.out_len, a.zero());
    let mut zeros_per_pos = vec![0u64; g.out_len];
    for (p, z) in zeros_per_pos.iter_mut().enumerate() {
        for t in 0..g.k {
            match g.src(p, t) {
                Some(i) => *z += (0..g.cin).filter(|&c| a.is_zero(x.at(c, i))).count() as u64,
                None => *z += g.cin as u64,
            }
        }
    }
    for o in 0..g.cout {
        for p in 0..g.out_len {
            let mut acc = a.acc();
            a.add(&mut acc, cv.b[o]);
            if let Some(ad) = addend {
                a.add(&mut acc, ad.at(o, p));
            }
            for t in 0..g.k {
                if let Some(i) = g.src(p, t) {
                    for c in 0..g.cin {
                        let xv = x.at(c, i);
                        if !a.is_zero(xv) {
                            a.mac(&mut acc, cv.weight(o, c, t), xv);
                        }
                    }
                }
            }
            let mut v = a.finish(&acc);
            if cv.relu && cv.post.is_none() {
                v = a.relu(v);
            }
            out.set(o, p, v);
        }
    }
    cnt.macs += g.macs();
    cnt.zero_operands += g.cout as u64 * zeros_per_pos.iter().sum::<u64>();
    match &cv.post {
        Some(aff) => affine(a, &out, aff, cv.relu),
        None => out,
    }
}

/// `y = x * scale[c] + shift[c]`, one rounding, optional ReLU.
pub fn affine<A: Arith>(a: &A, x: &Tensor<A::V>, aff: &Affine<A::V>, relu: bool) -> Tensor<A::V> {
    let mut out = x.clone();
    for c in 0..x.channels {
        for p in 0..x.len {
            let mut acc = a.acc();
            a.mac(&mut acc, x.at(c, p), aff.scale[c]);
            a.add(&mut acc, aff.shift[c]);
            let v = a.finish(&acc);
            out.set(c, p, if relu { a.relu(v) } else { v });
        }
    }
    out
}

/// `x + y` (or `x - y`), one rounding.
pub fn ew_add<A: Arith>(a: &A, x: &Tensor<A::V>, y: &Tensor<A::V>, subtract: bool) -> Tensor<A::V> {
    assert_eq!(x.data.len(), y.data.len());
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&u, &v)| {
            let mut acc = a.acc();
            a.add(&mut acc, u);
            if subtract {
                a.sub(&mut acc, v);
            } else {
                a.add(&mut acc, v);
            }
            a.finish(&acc)
        })
        .collect();
    Tensor::from_vec(x.channels, x.len, data)
}

/// `addend + m * n`, one rounding; `m` is the gated operand.
pub fn ew_mul<A: Arith>(a: &A, m: &Tensor<A::V>, n: &Tensor<A::V>, addend: Option<&Tensor<A::V>>, cnt: &mut LayerMacs) -> Tensor<A::V> {
    assert_eq!(m.data.len(), n.data.len());
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.data.len() {
        let mut acc = a.acc();
        if let Some(ad) = addend {
            a.add(&mut acc, ad.data[i]);
        }
        if a.is_zero(m.data[i]) {
            cnt.zero_operands += 1;
        } else {
            a.mac(&mut acc, m.data[i], n.data[i]);
        }
        data.push(a.finish(&acc));
    }
    cnt.macs += m.data.len() as u64;
    Tensor::from_vec(m.channels, m.len, data)
}

pub fn activation<A: Arith>(a: &A, x: &Tensor<A::V>, kind: ActKind) -> Tensor<A::V> {
    x.map(|v| a.act(kind, v))
}

/// Layer norm over channels at every position: mean, variance and
/// normalize sweeps, each result rounded once.
pub fn layer_norm<A: Arith>(a: &A, x: &Tensor<A::V>, gamma: &[A::V], beta: &[A::V], inv_c: A::V) -> Tensor<A::V> {
    let mut out = x.clone();
    for p in 0..x.len {
        let mut acc = a.acc();
        for c in 0..x.channels {
            a.add(&mut acc, x.at(c, p));
        }
        let mean = a.finish_scaled(&acc, inv_c);
        let dev = |c: usize| {
            let mut d = a.acc();
            a.add(&mut d, x.at(c, p));
            a.sub(&mut d, mean);
            a.finish(&d)
        };
        let mut acc = a.acc();
        for c in 0..x.channels {
            let d = dev(c);
            a.mac(&mut acc, d, d);
        }
        let var = a.finish_scaled(&acc, inv_c);
        let rstd = a.rsqrt_eps(var);
        for c in 0..x.channels {
            let mut n = a.acc();
            a.mac(&mut n, dev(c), rstd);
            let nv = a.finish(&n);
            let mut y = a.acc();
            a.mac(&mut y, nv, gamma[c]);
            a.add(&mut y, beta[c]);
            out.set(c, p, a.finish(&y));
        }
    }
    out
}

pub fn norm<A: Arith>(a: &A, x: &Tensor<A::V>, n: &Norm<A::V>, inv_c: A::V) -> Tensor<A::V> {
    match n {
        Norm::Affine(aff) => affine(a, x, aff, false),
        Norm::Layer { gamma, beta } => layer_norm(a, x, gamma, beta, inv_c),
    }
}

/// Softmax-free multi-head attention on stacked `[Q; K; V]` (`3E × h`).
///
/// Reordered: `S = scale · K Vᵀ` per head (w×w), then `out = Sᵀ Q`.
/// Direct: `A = scale · Qᵀ K` (h×h), then `out = V Aᵀ`.
pub fn attention<A: Arith>(
    a: &A,
    qkv: &Tensor<A::V>,
    heads: usize,
    w: usize,
    scale: Option<A::V>,
    order: AttentionOrder,
    cnt: &mut LayerMacs,
) -> Tensor<A::V> {
    let e = heads * w;
    let h = qkv.len;
    assert_eq!(qkv.channels, 3 * e, "attention input must stack Q, K, V");
    let fin = |acc: &A::Acc| match scale {
        Some(s) => a.finish_scaled(acc, s),
        None => a.finish(acc),
    };
    let mut out = Tensor::filled(e, h, a.zero());
    for hd in 0..heads {
        let (q0, k0, v0) = (hd * w, e + hd * w, 2 * e + hd * w);
        match order {
            AttentionOrder::Reordered => {
                // st[c][m] = sum_j K[m][j] V[c][j]
                let mut st = Tensor::filled(w, w, a.zero());
                for m in 0..w {
                    for c in 0..w {
                        let mut acc = a.acc();
                        for j in 0..h {
                            let kv = qkv.at(k0 + m, j);
                            if !a.is_zero(kv) {
                                a.mac(&mut acc, kv, qkv.at(v0 + c, j));
                            }
                        }
                        st.set(c, m, fin(&acc));
                    }
                    cnt.zero_operands += w as u64 * (0..h).filter(|&j| a.is_zero(qkv.at(k0 + m, j))).count() as u64;
                }
                // out[c][i] = sum_m Q[m][i] st[c][m]
                for i in 0..h {
                    for c in 0..w {
                        let mut acc = a.acc();
                        for m in 0..w {
                            let qv = qkv.at(q0 + m, i);
                            if !a.is_zero(qv) {
                                a.mac(&mut acc, qv, st.at(c, m));
                            }
                        }
                        out.set(q0 + c, i, a.finish(&acc));
                    }
                    cnt.zero_operands += w as u64 * (0..w).filter(|&m| a.is_zero(qkv.at(q0 + m, i))).count() as u64;
                }
                cnt.macs += 2 * (w * w * h) as u64;
            }
            AttentionOrder::Direct => {
                // am[j][i] = sum_m Q[m][i] K[m][j]
                let mut am = Tensor::filled(h, h, a.zero());
                for i in 0..h {
                    for j in 0..h {
                        let mut acc = a.acc();
                        for m in 0..w {
                            let qv = qkv.at(q0 + m, i);
                            if !a.is_zero(qv) {
                                a.mac(&mut acc, qv, qkv.at(k0 + m, j));
                            }
                        }
                        am.set(j, i, fin(&acc));
                    }
                    cnt.zero_operands += h as u64 * (0..w).filter(|&m| a.is_zero(qkv.at(q0 + m, i))).count() as u64;
                }
                // out[c][i] = sum_j am[j][i] V[c][j]
                for i in 0..h {
                    for c in 0..w {
                        let mut acc = a.acc();
                        for j in 0..h {
                            let av = am.at(j, i);
                            if !a.is_zero(av) {
                                a.mac(&mut acc, av, qkv.at(v0 + c, j));
                            }
                        }
                        out.set(q0 + c, i, a.finish(&acc));
                    }
                    cnt.zero_operands += w as u64 * (0..h).filter(|&j| a.is_zero(am.at(j, i))).count() as u64;
                }
                cnt.macs += 2 * (h * h * w) as u64;
            }
        }
    }
    out
}

/// One GRU time step for every subband position, in the five-step order:
/// input linears; reset gate; update gate; new gate; new hidden state.
pub fn gru_layer<A: Arith>(a: &A, x: &Tensor<A::V>, hid: &Tensor<A::V>, g: &Gru<A::V>, cnt: &mut LayerMacs) -> Tensor<A::V> {
    let hd = g.hidden;
    let gi = conv(a, x, &g.w_ih, None, cnt);
    let r = activation(a, &conv(a, hid, &g.w_hr, Some(&gi.rows(0, hd)), cnt), ActKind::Sigmoid);
    let z = activation(a, &conv(a, hid, &g.w_hz, Some(&gi.rows(hd, 2 * hd)), cnt), ActKind::Sigmoid);
    let hn = conv(a, hid, &g.w_hn, None, cnt);
    let n = activation(a, &ew_mul(a, &r, &hn, Some(&gi.rows(2 * hd, 3 * hd)), cnt), ActKind::Tanh);
    let d = ew_add(a, hid, &n, true);
    ew_mul(a, &z, &d, Some(&n), cnt)
}

/// Dilated residual block with channel splitting: the first half of the
/// channels runs through the stages with residual adds, the rest bypass.
pub fn dilated_residual_block<A: Arith>(a: &A, x: &Tensor<A::V>, stages: &[Conv<A::V>], cnt: &mut LayerMacs) -> Result<Tensor<A::V>, ModelError> {
    if x.channels % 2 != 0 {
        return Err(ModelError::OddChannels(x.channels));
    }
    let half = x.channels / 2;
    let mut y = x.rows(0, half);
    for st in stages {
        let t = conv(a, &y, st, None, cnt);
        y = ew_add(a, &y, &t, false);
    }
    let mut out = x.clone();
    out.set_rows(0, &y);
    Ok(out)
}

/// Recurrent state of the network: one `[H, h]` hidden map per block.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState<V> {
    pub hid: Vec<Tensor<V>>,
}

impl<V: Copy> NetState<V> {
    pub fn zeros(cfg: &ModelConfig, zero: V) -> Self {
        Self { hid: (0..cfg.num_transformer_blocks).map(|_| Tensor::filled(cfg.gru_hidden, cfg.subband_len, zero)).collect() }
    }
}

/// Layer outputs recorded during a forward pass, by layer name.
pub type Probe<V> = Vec<(String, Tensor<V>)>;

/// Transformer block: MHA with extra BN and shortcut, norm, GRU + linear
/// with shortcut, norm. Updates `hid` in place.
pub fn transformer_block<A: Arith>(
    a: &A,
    net: &Net<A::V>,
    i: usize,
    x: &Tensor<A::V>,
    hid: &mut Tensor<A::V>,
    cnt: &mut MacCounter,
    mut probe: Option<&mut Probe<A::V>>,
) -> Tensor<A::V> {
    let cfg = &net.cfg;
    let blk = &net.blocks[i];
    let name = |s: &str| format!("tb{i}.{s}");
    let mut rec = |n: String, t: &Tensor<A::V>| {
        if let Some(p) = probe.as_deref_mut() {
            p.push((n, t.clone()));
        }
    };
    let qkv = conv(a, x, &blk.qkv, None, cnt.layer(&name("qkv")));
    rec(name("qkv"), &qkv);
    let att = attention(a, &qkv, cfg.heads, cfg.head_dim, net.attn_scale, cfg.attention_order, cnt.layer(&name("attn")));
    rec(name("attn"), &att);
    let y = conv(a, &att, &blk.out, None, cnt.layer(&name("out_proj")));
    rec(name("out_proj"), &y);
    let x1 = norm(a, &ew_add(a, x, &y, false), &blk.norm1, net.inv_embed);
    rec(name("addnorm1"), &x1);
    *hid = gru_layer(a, &x1, hid, &blk.gru, cnt.layer(&name("gru")));
    rec(name("gru"), hid);
    let f = conv(a, hid, &blk.ffn, None, cnt.layer(&name("ffn")));
    rec(name("ffn"), &f);
    let x2 = norm(a, &ew_add(a, &x1, &f, false), &blk.norm2, net.inv_embed);
    rec(name("addnorm2"), &x2);
    x2
}

/// Mask module: two pointwise convs, ReLU after each. Output is non-negative.
pub fn mask_module<A: Arith>(a: &A, net: &Net<A::V>, x: &Tensor<A::V>, cnt: &mut LayerMacs) -> Tensor<A::V> {
    let m1 = conv(a, x, &net.mask1, None, cnt);
    conv(a, &m1, &net.mask2, None, cnt)
}

/// Network forward for one frame: noisy magnitude `[F]` to enhanced magnitude `[F]`.
pub fn forward<A: Arith>(
    a: &A,
    net: &Net<A::V>,
    input: &[A::V],
    state: &mut NetState<A::V>,
    cnt: &mut MacCounter,
    mut probe: Option<&mut Probe<A::V>>,
) -> Result<Vec<A::V>, ModelError> {
    let cfg = &net.cfg;
    if input.len() != cfg.freq_bins {
        return Err(ModelError::Shape(format!("expected {} bins, got {}", cfg.freq_bins, input.len())));
    }
    macro_rules! rec {
        ($n:expr, $t:expr) => {
            if let Some(p) = probe.as_deref_mut() {
                p.push(($n.to_string(), $t.clone()));
            }
        };
    }
    let x0 = Tensor::from_vec(1, cfg.freq_bins, input.to_vec());
    let x = conv(a, &x0, &net.enc_in, None, cnt.layer("enc_in"));
    rec!("enc_in", x);
    let x = conv(a, &x, &net.enc_down, None, cnt.layer("enc_down"));
    rec!("enc_down", x);
    let enc = dilated_residual_block(a, &x, &net.enc_drb, cnt.layer("enc_drb"))?;
    rec!("enc_drb", enc);
    let mut t = conv(a, &enc, &net.tr_in, None, cnt.layer("tr_in"));
    rec!("tr_in", t);
    for i in 0..net.blocks.len() {
        t = transformer_block(a, net, i, &t, &mut state.hid[i], cnt, probe.as_deref_mut());
    }
    let mc = cnt.layer("mask");
    let mask = mask_module(a, net, &t, mc);
    let masked = ew_mul(a, &mask, &enc, None, mc);
    rec!("mask", masked);
    let d = dilated_residual_block(a, &masked, &net.dec_drb, cnt.layer("dec_drb"))?;
    rec!("dec_drb", d);
    let u = conv(a, &d, &net.dec_up, None, cnt.layer("dec_up"));
    rec!("dec_up", u);
    let y = conv(a, &u, &net.dec_out, None, cnt.layer("dec_out"));
    rec!("dec_out", y);
    Ok(y.data)
}
