//! Model hyperparameters and the plain-text `key = value` config format.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Normalization used after the two residual additions of each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormMode {
    Bn,
    Ln,
}

/// Multiplication order of the softmax-free attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionOrder {
    /// `S = K Vᵀ` first (w×w), then `Sᵀ Q`.
    Reordered,
    /// `A = Qᵀ K` first (h×h), then `V Aᵀ`.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sample_rate: usize,
    pub fft_len: usize,
    pub hop: usize,
    pub freq_bins: usize,
    pub subband_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub enc_channels: usize,
    pub num_res_blocks: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub num_transformer_blocks: usize,
    pub gru_hidden: usize,
    pub loss_alpha: f64,
    pub loss: LossKind,
    /// Scale attention scores by 1/h (otherwise unscaled).
    pub attention_scale: bool,
    pub norm: NormMode,
    pub fold_bn: bool,
    pub attention_order: AttentionOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            fft_len: 512,
            hop: 128,
            freq_bins: 257,
            subband_len: 128,
            embed_dim: 16,
            heads: 2,
            head_dim: 8,
            enc_channels: 48,
            num_res_blocks: 4,
            dilations: vec![1, 2, 4, 8],
            kernel: 5,
            num_transformer_blocks: 2,
            gru_hidden: 16,
            loss_alpha: 0.2,
            loss: LossKind::Mae,
            attention_scale: true,
            norm: NormMode::Bn,
            fold_bn: true,
            attention_order: AttentionOrder::Reordered,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.fft_len == 0 || self.hop == 0 || self.fft_len % self.hop != 0 {
            return bad(format!("hop {} must divide fft_len {}", self.hop, self.fft_len));
        }
        if self.freq_bins != self.fft_len / 2 + 1 {
            return bad(format!("freq_bins must be fft_len/2+1 = {}", self.fft_len / 2 + 1));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return bad("kernel must be odd and at least 3".into());
        }
        if self.freq_bins < self.kernel {
            return bad("freq_bins smaller than the kernel".into());
        }
        let h = self.down_len();
        if self.subband_len != h {
            return bad(format!("subband_len must equal the downsampled length {h}"));
        }
        if self.embed_dim != self.heads * self.head_dim || self.heads == 0 || self.head_dim == 0 {
            return bad("embed_dim must equal heads * head_dim".into());
        }
        if self.enc_channels < 2 || self.enc_channels % 2 != 0 {
            return Err(ModelError::OddChannels(self.enc_channels));
        }
        if self.gru_hidden == 0 || self.num_transformer_blocks == 0 {
            return bad("gru_hidden and num_transformer_blocks must be positive".into());
        }
        if self.dilations.len() != self.num_res_blocks || self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must list one positive rate per residual stage".into());
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return bad("loss_alpha must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Padding of the stride-2 downsampling conv.
    pub fn down_pad(&self) -> usize {
        (self.kernel - 3) / 2
    }

    /// Padding of the upsampling conv applied to the zero-inserted signal.
    pub fn up_pad(&self) -> usize {
        (self.kernel + 1) / 2
    }

    /// Length after the stride-2 frequency conv.
    pub fn down_len(&self) -> usize {
        (self.freq_bins + 2 * self.down_pad() - self.kernel) / 2 + 1
    }

    pub fn half_channels(&self) -> usize {
        self.enc_channels / 2
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| ModelError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}`"))
        }
        match key {
            "sample_rate" => self.sample_rate = num(v)?,
            "fft_len" => self.fft_len = num(v)?,
            "hop" => self.hop = num(v)?,
            "freq_bins" => self.freq_bins = num(v)?,
            "subband_len" => self.subband_len = num(v)?,
            "embed_dim" => self.embed_dim = num(v)?,
            "heads" => self.heads = num(v)?,
            "head_dim" => self.head_dim = num(v)?,
            "enc_channels" => self.enc_channels = num(v)?,
            "num_res_blocks" => self.num_res_blocks = num(v)?,
            "dilations" => {
                self.dilations = v
                    .trim_matches(|c| c == '[' || c == ']' || c == '{' || c == '}')
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "kernel" => {
                let t = v.trim_matches(|c| c == '(' || c == ')');
                let parts: Vec<&str> = t.split(|c| c == ',' || c == 'x').map(str::trim).collect();
                match parts.as_slice() {
                    [k] => self.kernel = num(k)?,
                    ["1", k] => self.kernel = num(k)?,
                    _ => return Err(format!("kernel must be (1,k), got `{v}`")),
                }
            }
            "num_transformer_blocks" => self.num_transformer_blocks = num(v)?,
            "gru_hidden" => self.gru_hidden = num(v)?,
            "loss_alpha" => self.loss_alpha = num(v)?,
            "loss" => {
                self.loss = match v {
                    "mae" => LossKind::Mae,
                    "mse" => LossKind::Mse,
                    _ => return Err(format!("loss must be mae or mse, got `{v}`")),
                }
            }
            "attention_scale" => {
                self.attention_scale = match v {
                    "inv_h" | "true" => true,
                    "none" | "false" => false,
                    _ => return Err(format!("attention_scale must be inv_h or none, got `{v}`")),
                }
            }
            "norm" => self.norm = v.parse()?,
            "fold_bn" => self.fold_bn = num(v)?,
            "attention_order" => self.attention_order = v.parse()?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "fft_len = {}", self.fft_len);
        let _ = writeln!(s, "hop = {}", self.hop);
        let _ = writeln!(s, "freq_bins = {}", self.freq_bins);
        let _ = writeln!(s, "subband_len = {}", self.subband_len);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "head_dim = {}", self.head_dim);
        let _ = writeln!(s, "enc_channels = {}", self.enc_channels);
        let _ = writeln!(s, "num_res_blocks = {}", self.num_res_blocks);
        let _ = writeln!(s, "dilations = {}", d.join(","));
        let _ = writeln!(s, "kernel = 1,{}", self.kernel);
        let _ = writeln!(s, "num_transformer_blocks = {}", self.num_transformer_blocks);
        let _ = writeln!(s, "gru_hidden = {}", self.gru_hidden);
        let _ = writeln!(s, "loss_alpha = {}", self.loss_alpha);
        let _ = writeln!(s, "loss = {}", if self.loss == LossKind::Mae { "mae" } else { "mse" });
        let _ = writeln!(s, "attention_scale = {}", if self.attention_scale { "inv_h" } else { "none" });
        let _ = writeln!(s, "norm = {}", self.norm);
        let _ = writeln!(s, "fold_bn = {}", self.fold_bn);
        let _ = writeln!(s, "attention_order = {}", self.attention_order);
        s
    }
}

impl FromStr for NormMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormMode::Bn),
            "ln" => Ok(NormMode::Ln),
            _ => Err(format!("norm must be bn or ln, got `{s}`")),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Bn => "bn",
            NormMode::Ln => "ln",
        })
    }
}

impl FromStr for AttentionOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "reordered" => Ok(AttentionOrder::Reordered),
            "direct" => Ok(AttentionOrder::Direct),
            _ => Err(format!("attention order must be reordered or direct, got `{s}`")),
        }
    }
}

impl std::fmt::Display for AttentionOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionOrder::Reordered => "reordered",
            AttentionOrder::Direct => "direct",
        })
    }
}
