//! Parameter tensors: shapes derived from the config, seeded random
//! initialization and the little-endian weight container file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ModelError;
use crate::numerics::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    GruWeight,
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
}

impl ParamKind {
    /// Running statistics are not trainable.
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamKind::Mean | ParamKind::Var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Ledger block this tensor belongs to.
    pub block: String,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
    block: String,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.specs.push(ParamSpec { name, shape, kind, block: self.block.clone() });
    }

    fn norm(&mut self, prefix: &str, ch: usize) {
        self.push(format!("{prefix}.gamma"), vec![ch], ParamKind::Gamma);
        self.push(format!("{prefix}.beta"), vec![ch], ParamKind::Beta);
        self.push(format!("{prefix}.mean"), vec![ch], ParamKind::Mean);
        self.push(format!("{prefix}.var"), vec![ch], ParamKind::Var);
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bn: bool) {
        self.push(format!("{prefix}.w"), vec![cout, cin, k], ParamKind::Weight { fan_in: cin * k });
        self.push(format!("{prefix}.b"), vec![cout], ParamKind::Bias);
        if bn {
            self.norm(&format!("{prefix}.bn"), cout);
        }
    }
}

/// Every parameter tensor of the model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, half, e, hd, k) = (cfg.enc_channels, cfg.half_channels(), cfg.embed_dim, cfg.gru_hidden, cfg.kernel);
    let mut b = SpecBuilder { specs: Vec::new(), block: "encoder".into() };
    b.conv("enc_in", c, 1, 1, true);
    b.conv("enc_down", c, c, k, true);
    for s in 0..cfg.num_res_blocks {
        b.conv(&format!("enc_drb.{s}"), half, half, k, true);
    }
    b.conv("tr_in", e, c, 1, true);
    for i in 0..cfg.num_transformer_blocks {
        b.block = format!("transformer.{i}");
        b.conv(&format!("tb{i}.q"), e, e, 1, true);
        b.conv(&format!("tb{i}.k"), e, e, 1, true);
        b.conv(&format!("tb{i}.v"), e, e, 1, false);
        b.conv(&format!("tb{i}.o"), e, e, 1, true);
        b.norm(&format!("tb{i}.norm1"), e);
        b.push(format!("tb{i}.gru.w_ih"), vec![3 * hd, e], ParamKind::GruWeight);
        b.push(format!("tb{i}.gru.w_hh"), vec![3 * hd, hd], ParamKind::GruWeight);
        b.push(format!("tb{i}.gru.b_ih"), vec![3 * hd], ParamKind::Bias);
        b.push(format!("tb{i}.gru.b_hh"), vec![3 * hd], ParamKind::Bias);
        b.conv(&format!("tb{i}.ffn"), e, hd, 1, true);
        b.norm(&format!("tb{i}.norm2"), e);
    }
    b.block = "mask".into();
    b.conv("mask.m1", c, e, 1, false);
    b.conv("mask.m2", c, c, 1, false);
    b.block = "decoder".into();
    for s in 0..cfg.num_res_blocks {
        b.conv(&format!("dec_drb.{s}"), half, half, k, true);
    }
    b.conv("dec_up", half, c, k, true);
    b.conv("dec_out", 1, half, 1, false);
    b.specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Raw (unfolded) parameter values by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub tensors: BTreeMap<String, Param>,
}

const MAGIC: &[u8; 4] = b"TFTW";
const VERSION: u32 = 1;

impl Weights {
    /// Seeded random weights: He-uniform convs, PyTorch-style GRU ranges,
    /// near-identity BN statistics.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru_a = 1.0 / (cfg.gru_hidden as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n = spec.numel();
            let data: Vec<f64> = (0..n)
                .map(|_| match spec.kind {
                    ParamKind::Weight { fan_in } => {
                        let a = (6.0 / fan_in as f64).sqrt();
                        rng.gen_range(-a..a)
                    }
                    ParamKind::GruWeight => rng.gen_range(-gru_a..gru_a),
                    ParamKind::Bias => rng.gen_range(-0.05..0.05),
                    ParamKind::Gamma => rng.gen_range(0.8..1.2),
                    ParamKind::Beta => rng.gen_range(-0.1..0.1),
                    ParamKind::Mean => rng.gen_range(-0.1..0.1),
                    ParamKind::Var => rng.gen_range(0.6..1.4),
                })
                .collect();
            tensors.insert(spec.name, Param { shape: spec.shape, data });
        }
        Self { tensors }
    }

    /// All-zero conv/linear weights and biases with identity norms.
    pub fn identity_norms(cfg: &ModelConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let v = match spec.kind {
                ParamKind::Gamma | ParamKind::Var => 1.0,
                _ => 0.0,
            };
            let data = vec![v; spec.numel()];
            tensors.insert(spec.name, Param { data, shape: spec.shape });
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Param, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, ModelError> {
        self.tensors.get_mut(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    /// Check names and shapes against the config.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        for s in &specs {
            let p = self.get(&s.name)?;
            if p.shape != s.shape || p.data.len() != s.numel() {
                return Err(ModelError::Shape(format!("{}: expected {:?}, found {:?}", s.name, s.shape, p.shape)));
            }
            if matches!(s.kind, ParamKind::Var) && p.data.iter().any(|&v| v <= 0.0) {
                return Err(ModelError::NonPositiveVariance(s.name.clone()));
            }
        }
        if self.tensors.len() != specs.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Round every value through `fmt`.
    pub fn quantized(&self, fmt: Format) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, p)| {
                let data = p.data.iter().map(|&v| fmt.decode(fmt.encode(v))).collect();
                (k.clone(), Param { shape: p.shape.clone(), data })
            })
            .collect();
        Self { tensors }
    }

    /// Write the container; `fmt = None` stores 32-bit floats.
    pub fn write_to<W: Write>(&self, mut out: W, fmt: Option<Format>) -> Result<(), ModelError> {
        let desc = fmt.map_or_else(|| "f32".to_string(), |f| f.to_string());
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(desc.len() as u16).to_le_bytes());
        head.extend_from_slice(desc.as_bytes());
        head.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, p) in &self.tensors {
            head.extend_from_slice(&(name.len() as u16).to_le_bytes());
            head.extend_from_slice(name.as_bytes());
            head.push(p.shape.len() as u8);
            for &d in &p.shape {
                head.extend_from_slice(&(d as u32).to_le_bytes());
            }
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            for &v in &p.data {
                match fmt {
                    Some(f) => payload.extend_from_slice(&f.encode(v).to_le_bytes()),
                    None => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out.write_all(&head)?;
        out.write_all(&payload)?;
        Ok(())
    }

    /// Read a container; returns the weights and the declared code format.
    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, Option<Format>), ModelError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Cursor { b: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::BadFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::BadFile(format!("unsupported version {version}")));
        }
        let dlen = r.u16()? as usize;
        let desc = String::from_utf8(r.take(dlen)?.to_vec()).map_err(|_| ModelError::BadFile("format".into()))?;
        let fmt = if desc == "f32" {
            None
        } else {
            Some(desc.parse::<Format>().map_err(|e| ModelError::BadFile(e.to_string()))?)
        };
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| ModelError::BadFile("name".into()))?;
            let nd = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let off = r.u64()? as usize;
            table.push((name, shape, off));
        }
        let payload = &bytes[r.pos..];
        let elem = if fmt.is_some() { 2 } else { 4 };
        let mut tensors = BTreeMap::new();
        for (name, shape, off) in table {
            let n: usize = shape.iter().product();
            let end = off + n * elem;
            if end > payload.len() {
                return Err(ModelError::BadFile(format!("tensor {name} runs past the payload")));
            }
            let raw = &payload[off..end];
            let data = match fmt {
                Some(f) => raw.chunks_exact(2).map(|c| f.decode(u16::from_le_bytes([c[0], c[1]]))).collect(),
                None => raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect(),
            };
            tensors.insert(name, Param { shape, data });
        }
        Ok((Self { tensors }, fmt))
    }

    /// Values rounded through f32, as stored by the full-precision container.
    pub fn as_f32(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, p)| (k.clone(), Param { shape: p.shape.clone(), data: p.data.iter().map(|&v| v as f32 as f64).collect() }))
            .collect();
        Self { tensors }
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.b.len() {
            return Err(ModelError::BadFile("truncated header".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
