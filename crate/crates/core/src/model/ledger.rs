//! Symbolic parameter and MAC ledger, computed from shapes alone.

use std::fmt::Write as _;

use super::config::{AttentionOrder, ModelConfig};
use super::weights::param_specs;
use super::ModelError;

/// Published totals of the compressed model, for side-by-side reading.
pub const TARGET_PARAMS: u64 = 55_920;
pub const TARGET_GMACS_PER_SECOND: f64 = 0.496;
pub const TARGET_MMACS_PER_FRAME: f64 = 15.86;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub block: String,
    pub macs: u64,
}

/// Attention contraction MACs of one layer under both multiplication orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionRow {
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    /// `h·w·h + h·h·w` per head.
    pub direct_per_head: u64,
    /// `w·h·w + h·w·w` per head.
    pub reordered_per_head: u64,
}

impl AttentionRow {
    pub fn new(h: usize, w: usize, heads: usize) -> Self {
        let (h, w) = (h as u64, w as u64);
        Self {
            h: h as usize,
            w: w as usize,
            heads,
            direct_per_head: h * w * h + h * h * w,
            reordered_per_head: w * h * w + h * w * w,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.direct_per_head as f64 / self.reordered_per_head as f64
    }

    pub fn per_layer(&self, order: AttentionOrder) -> u64 {
        self.heads as u64
            * match order {
                AttentionOrder::Direct => self.direct_per_head,
                AttentionOrder::Reordered => self.reordered_per_head,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub params_total: u64,
    pub params_by_block: Vec<(String, u64)>,
    pub layers: Vec<LayerRow>,
    pub macs_per_frame: u64,
    pub frame_rate: f64,
    pub gmacs_per_second: f64,
    pub attention: AttentionRow,
    pub attention_order: AttentionOrder,
}

fn block_of(layer: &str) -> String {
    match layer.split('.').next() {
        Some(b) if b.starts_with("tb") => format!("transformer.{}", &b[2..]),
        Some("enc_in" | "enc_down" | "enc_drb" | "tr_in") => "encoder".into(),
        Some("mask") => "mask".into(),
        _ => "decoder".into(),
    }
}

/// Per-layer MACs per frame, in execution order and with the names the
/// forward pass uses for its counter.
pub fn layer_macs(cfg: &ModelConfig) -> Vec<(String, u64)> {
    let (f, h, c, half, e, hd, k) = (
        cfg.freq_bins as u64,
        cfg.subband_len as u64,
        cfg.enc_channels as u64,
        cfg.half_channels() as u64,
        cfg.embed_dim as u64,
        cfg.gru_hidden as u64,
        cfg.kernel as u64,
    );
    let stages = cfg.dilations.len() as u64;
    let att = AttentionRow::new(cfg.subband_len, cfg.head_dim, cfg.heads);
    let mut v = vec![
        ("enc_in".to_string(), c * f),
        ("enc_down".to_string(), c * c * k * h),
        ("enc_drb".to_string(), stages * half * half * k * h),
        ("tr_in".to_string(), e * c * h),
    ];
    for i in 0..cfg.num_transformer_blocks {
        v.push((format!("tb{i}.qkv"), 3 * e * e * h));
        v.push((format!("tb{i}.attn"), att.per_layer(cfg.attention_order)));
        v.push((format!("tb{i}.out_proj"), e * e * h));
        // input linears, three hidden linears, two gate products
        v.push((format!("tb{i}.gru"), 3 * hd * e * h + 3 * hd * hd * h + 2 * hd * h));
        v.push((format!("tb{i}.ffn"), e * hd * h));
    }
    v.push(("mask".to_string(), c * e * h + c * c * h + c * h));
    v.push(("dec_drb".to_string(), stages * half * half * k * h));
    v.push(("dec_up".to_string(), half * c * k * f));
    v.push(("dec_out".to_string(), half * f));
    v
}

pub fn count_ledger(cfg: &ModelConfig) -> Result<Ledger, ModelError> {
    cfg.validate()?;
    let mut params_by_block: Vec<(String, u64)> = Vec::new();
    for s in param_specs(cfg).iter().filter(|s| s.kind.trainable()) {
        let n = s.numel() as u64;
        match params_by_block.iter_mut().find(|(b, _)| *b == s.block) {
            Some((_, t)) => *t += n,
            None => params_by_block.push((s.block.clone(), n)),
        }
    }
    let layers: Vec<LayerRow> = layer_macs(cfg)
        .into_iter()
        .map(|(name, macs)| LayerRow { block: block_of(&name), name, macs })
        .collect();
    let macs_per_frame = layers.iter().map(|l| l.macs).sum::<u64>();
    let frame_rate = cfg.frame_rate();
    Ok(Ledger {
        params_total: params_by_block.iter().map(|(_, n)| n).sum(),
        params_by_block,
        layers,
        macs_per_frame,
        frame_rate,
        gmacs_per_second: macs_per_frame as f64 * frame_rate / 1e9,
        attention: AttentionRow::new(cfg.subband_len, cfg.head_dim, cfg.heads),
        attention_order: cfg.attention_order,
    })
}

fn pct(ours: f64, target: f64) -> f64 {
    (ours / target - 1.0) * 100.0
}

impl Ledger {
    pub fn macs_by_block(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for l in &self.layers {
            match out.iter_mut().find(|(b, _)| *b == l.block) {
                Some((_, t)) => *t += l.macs,
                None => out.push((l.block.clone(), l.macs)),
            }
        }
        out
    }

    pub fn params_deviation_pct(&self) -> f64 {
        pct(self.params_total as f64, TARGET_PARAMS as f64)
    }

    pub fn gmacs_deviation_pct(&self) -> f64 {
        pct(self.gmacs_per_second, TARGET_GMACS_PER_SECOND)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let macs_by_block = self.macs_by_block();
        let _ = writeln!(s, "{:<16} {:>10} {:>14}", "block", "params", "MACs/frame");
        for (b, p) in &self.params_by_block {
            let m = macs_by_block.iter().find(|(n, _)| n == b).map_or(0, |(_, m)| *m);
            let _ = writeln!(s, "{b:<16} {p:>10} {m:>14}");
        }
        let _ = writeln!(s, "\n{:<16} {:>14}", "layer", "MACs/frame");
        for l in &self.layers {
            let _ = writeln!(s, "{:<16} {:>14}", l.name, l.macs);
        }
        let a = &self.attention;
        let _ = writeln!(s, "\nattention (h={}, w={}, heads={}, order={}):", a.h, a.w, a.heads, self.attention_order);
        let _ = writeln!(s, "  direct MACs/head     {}", a.direct_per_head);
        let _ = writeln!(s, "  reordered MACs/head  {}", a.reordered_per_head);
        let _ = writeln!(s, "  ratio (h/w)          {:.1}", a.ratio());
        let ops = 2 * self.macs_per_frame;
        let _ = writeln!(s, "\ntotals:");
        let _ = writeln!(s, "  params               {}", self.params_total);
        let _ = writeln!(s, "  MACs/frame           {}", self.macs_per_frame);
        let _ = writeln!(s, "  ops/frame (2x MACs)  {ops}");
        let _ = writeln!(s, "  frames/s             {}", self.frame_rate);
        let _ = writeln!(s, "  GMAC/s               {:.4}", self.gmacs_per_second);
        let _ = writeln!(s, "  Gops/s (2x MACs)     {:.4}", 2.0 * self.gmacs_per_second);
        let _ = writeln!(s, "\nreference targets:");
        let _ = writeln!(s, "  params               {} ({:+.1}%)", TARGET_PARAMS, self.params_deviation_pct());
        let _ = writeln!(s, "  GMAC/s               {} ({:+.1}%)", TARGET_GMACS_PER_SECOND, self.gmacs_deviation_pct());
        let _ = writeln!(
            s,
            "  MMAC/frame           {} (ours: {:.3} MMAC, {:.3} Mops)",
            TARGET_MMACS_PER_FRAME,
            self.macs_per_frame as f64 / 1e6,
            ops as f64 / 1e6
        );
        s
    }
}
