//! Operand descriptors referenced by the micro-op pattern fields.
//!
//! A micro-op carries three 17-bit descriptor ids; the descriptor table of
//! the program holds the addressing (bank placement, base, extents) and the
//! loop shape each operand needs.

use serde::{Deserialize, Serialize};

use super::pattern::{AddressPattern, BankSelect, Geometry, Sram, DATA_BANKS};
use crate::model::ConvGeom;
use crate::numerics::ActKind;

/// A `[channels, len]` feature map in the data SRAM. Channel `c` lives in
/// bank `(offset + c mod nbanks) mod 8`, row `c div nbanks` of the bank's
/// slice starting at `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alloc {
    pub offset: u8,
    pub nbanks: u8,
    pub base: u32,
    pub channels: u32,
    pub len: u32,
}

impl Alloc {
    pub fn rows_per_bank(&self) -> u32 {
        self.channels.div_ceil(self.nbanks as u32)
    }

    /// Words reserved in each of its banks.
    pub fn words_per_bank(&self) -> u32 {
        self.rows_per_bank() * self.len
    }

    pub fn bank_of(&self, c: u32) -> usize {
        (self.offset as usize + (c % self.nbanks as u32) as usize) % DATA_BANKS
    }

    #[inline]
    pub fn locate(&self, c: u32, p: u32) -> (usize, u32) {
        (self.bank_of(c), self.base + (c / self.nbanks as u32) * self.len + p)
    }

    pub fn banks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nbanks.min(self.channels.max(1) as u8) as u32).map(|c| self.bank_of(c))
    }

    pub fn view(&self) -> MapView {
        MapView { alloc: *self, c0: 0, channels: self.channels, p0: 0, len: self.len, transposed: false, negate: false }
    }
}

/// Rectangular window of an [`Alloc`], optionally read transposed or negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapView {
    pub alloc: Alloc,
    pub c0: u32,
    pub channels: u32,
    pub p0: u32,
    pub len: u32,
    /// Logical element `(r, s)` is stored at channel `s`, position `r`.
    pub transposed: bool,
    /// Reads return the negated value (exact sign flip).
    pub negate: bool,
}

impl MapView {
    pub fn rows(&self) -> u32 {
        if self.transposed {
            self.len
        } else {
            self.channels
        }
    }

    pub fn cols(&self) -> u32 {
        if self.transposed {
            self.channels
        } else {
            self.len
        }
    }

    /// Bank and address of logical element `(r, s)`.
    #[inline]
    pub fn locate(&self, r: u32, s: u32) -> (usize, u32) {
        let (c, p) = if self.transposed { (s, r) } else { (r, s) };
        self.alloc.locate(self.c0 + c, self.p0 + p)
    }

    /// Channels `lo..lo+n` of an untransposed view.
    pub fn channel_range(&self, lo: u32, n: u32) -> MapView {
        MapView { c0: self.c0 + lo, channels: n, ..*self }
    }

    /// Positions `lo..lo+n` of an untransposed view.
    pub fn position_range(&self, lo: u32, n: u32) -> MapView {
        MapView { p0: self.p0 + lo, len: n, ..*self }
    }

    pub fn transposed(self) -> MapView {
        MapView { transposed: !self.transposed, ..self }
    }

    pub fn negated(self) -> MapView {
        MapView { negate: !self.negate, ..self }
    }

    /// One address pattern per channel row of the window.
    pub fn patterns(&self, dilation: u32) -> Vec<AddressPattern> {
        (0..self.channels)
            .map(|c| {
                let (bank, base) = self.alloc.locate(self.c0 + c, self.p0);
                AddressPattern {
                    bank: BankSelect::Bank { sram: Sram::Data, bank: bank as u8 },
                    base,
                    stride: 1,
                    dilation_stride: dilation.max(1),
                    count: self.len,
                }
            })
            .collect()
    }

    /// Half-open address range touched in each bank.
    pub fn footprint(&self) -> Vec<(usize, u32, u32)> {
        let mut out: Vec<(usize, u32, u32)> = Vec::new();
        for c in 0..self.channels {
            let (bank, lo) = self.alloc.locate(self.c0 + c, self.p0);
            let hi = lo + self.len;
            match out.iter_mut().find(|(b, _, _)| *b == bank) {
                Some(e) => {
                    e.1 = e.1.min(lo);
                    e.2 = e.2.max(hi);
                }
                None => out.push((bank, lo, hi)),
            }
        }
        out
    }
}

/// Contiguous words of one ping/pong half of the weight or bias SRAM,
/// interleaved across the banks word by word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub sram: Sram,
    pub half: u8,
    pub base: u32,
    pub count: u32,
}

impl Region {
    #[inline]
    pub fn locate(&self, i: u32, geo: &Geometry) -> (usize, u32) {
        let w = self.base + i;
        let nb = self.sram.banks() as u32;
        ((w % nb) as usize, self.half as u32 * geo.half_words(self.sram) + w / nb)
    }

    pub fn patterns(&self, geo: &Geometry) -> Vec<AddressPattern> {
        let nb = self.sram.banks() as u32;
        (0..nb.min(self.count))
            .map(|i| {
                let (bank, base) = self.locate(i, geo);
                let count = (self.count - i).div_ceil(nb);
                AddressPattern::run(BankSelect::Bank { sram: self.sram, bank: bank as u8 }, base, count)
            })
            .collect()
    }
}

/// Off-chip side of a DMA transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    /// Parameter image shipped with the program, from this word offset.
    Image { offset: u32 },
    /// Frame input feature words.
    Input,
    /// Frame output words.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtRef {
    pub stream: Stream,
    pub count: u32,
}

/// Conv loop shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub cin: u32,
    pub cout: u32,
    pub k: u32,
    pub stride: u32,
    pub dilation: u32,
    pub pad: u32,
    pub upsample: u32,
    pub in_len: u32,
    pub out_len: u32,
}

impl From<ConvGeom> for ConvShape {
    fn from(g: ConvGeom) -> Self {
        Self {
            cin: g.cin as u32,
            cout: g.cout as u32,
            k: g.k as u32,
            stride: g.stride as u32,
            dilation: g.dilation as u32,
            pad: g.pad as u32,
            upsample: g.upsample as u32,
            in_len: g.in_len as u32,
            out_len: g.out_len as u32,
        }
    }
}

impl From<ConvShape> for ConvGeom {
    fn from(s: ConvShape) -> Self {
        Self {
            cin: s.cin as usize,
            cout: s.cout as usize,
            k: s.k as usize,
            stride: s.stride as usize,
            dilation: s.dilation as usize,
            pad: s.pad as usize,
            upsample: s.upsample as usize,
            in_len: s.in_len as usize,
            out_len: s.out_len as usize,
        }
    }
}

/// The three sweeps of a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormPass {
    Mean,
    Var,
    Normalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Descriptor {
    Map(MapView),
    Region(Region),
    Ext(ExtRef),
    /// Conv weights `[cout][cin][k]` and bias `[cout]`.
    Conv { shape: ConvShape, weights: Region, bias: Region, relu: bool },
    /// Matmul destination with an optional scale applied at the single rounding.
    Scaled { out: MapView, scale: Option<Region> },
    /// Per-channel `x·scale + shift`: `params` holds all scales then all shifts.
    Affine { params: Region, relu: bool },
    /// One layer-norm sweep; `stats` rows are mean and rstd, `params` holds
    /// gamma then beta, `inv_c` the 1/channels constant.
    Norm { pass: NormPass, stats: MapView, params: Region, inv_c: Region },
    Lut(ActKind),
}

impl Descriptor {
    /// Every SRAM address pattern the descriptor can touch.
    pub fn patterns(&self, geo: &Geometry) -> Vec<AddressPattern> {
        match self {
            Descriptor::Map(v) => v.patterns(1),
            Descriptor::Region(r) => r.patterns(geo),
            Descriptor::Ext(_) | Descriptor::Lut(_) => Vec::new(),
            Descriptor::Conv { weights, bias, .. } => [weights.patterns(geo), bias.patterns(geo)].concat(),
            Descriptor::Scaled { out, scale } => {
                let mut v = out.patterns(1);
                if let Some(s) = scale {
                    v.extend(s.patterns(geo));
                }
                v
            }
            Descriptor::Affine { params, .. } => params.patterns(geo),
            Descriptor::Norm { stats, params, inv_c, .. } => [stats.patterns(1), params.patterns(geo), inv_c.patterns(geo)].concat(),
        }
    }

    pub fn as_map(&self) -> Option<&MapView> {
        match self {
            Descriptor::Map(v) => Some(v),
            _ => None,
        }
    }
}
