//! Machine geometry and SRAM address patterns.

use serde::{Deserialize, Serialize};

use super::IsaError;
use crate::numerics::Format;

/// PE blocks in the array.
pub const BLOCKS: usize = 2;
/// PE cells (lanes) per block.
pub const LANES: usize = 8;
/// Machine-wide MAC issue width.
pub const MAX_MACS_PER_CYCLE: usize = BLOCKS * LANES;

pub const DATA_BANKS: usize = 8;
pub const DATA_BANK_BYTES: usize = 3584;
pub const WEIGHT_BANKS: usize = 4;
pub const WEIGHT_BANK_BYTES: usize = 5120;
pub const BIAS_BANKS: usize = 2;
pub const BIAS_BANK_BYTES: usize = 2944;

pub const REG_BUFFERS: usize = 10;
pub const REG_BUFFER_BITS: usize = 160;
/// Width of one memory-controller beat per direction.
pub const BEAT_BITS: usize = 80;

/// Total modeled SRAM in bytes.
pub const fn total_sram_bytes() -> usize {
    DATA_BANKS * DATA_BANK_BYTES + WEIGHT_BANKS * WEIGHT_BANK_BYTES + BIAS_BANKS * BIAS_BANK_BYTES
}

/// Beats needed to move `words` values of `width` bits.
pub fn beats(words: usize, width: u32) -> u64 {
    (words as u64 * width as u64).div_ceil(BEAT_BITS as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sram {
    Data,
    Weight,
    Bias,
}

impl Sram {
    pub fn banks(self) -> usize {
        match self {
            Sram::Data => DATA_BANKS,
            Sram::Weight => WEIGHT_BANKS,
            Sram::Bias => BIAS_BANKS,
        }
    }

    pub fn bank_bytes(self) -> usize {
        match self {
            Sram::Data => DATA_BANK_BYTES,
            Sram::Weight => WEIGHT_BANK_BYTES,
            Sram::Bias => BIAS_BANK_BYTES,
        }
    }

    /// Weight and bias banks are split into ping/pong halves.
    pub fn is_ping_pong(self) -> bool {
        !matches!(self, Sram::Data)
    }
}

/// Bank capacities in words of one number format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub width: u32,
    pub data_words: u32,
    pub weight_words: u32,
    pub bias_words: u32,
}

impl Geometry {
    pub fn for_format(fmt: Format) -> Self {
        let width = fmt.width();
        let words = |s: Sram| (s.bank_bytes() as u32 * 8) / width;
        Self { width, data_words: words(Sram::Data), weight_words: words(Sram::Weight), bias_words: words(Sram::Bias) }
    }

    /// Words per bank.
    pub fn bank_words(&self, s: Sram) -> u32 {
        match s {
            Sram::Data => self.data_words,
            Sram::Weight => self.weight_words,
            Sram::Bias => self.bias_words,
        }
    }

    /// Words per bank in one ping/pong half.
    pub fn half_words(&self, s: Sram) -> u32 {
        self.bank_words(s) / 2
    }

    /// Words in one half across all banks of a ping-pong SRAM.
    pub fn half_capacity(&self, s: Sram) -> u32 {
        self.half_words(s) * s.banks() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BankSelect {
    Bank { sram: Sram, bank: u8 },
    /// The same addresses in every bank of the SRAM.
    Broadcast(Sram),
}

impl BankSelect {
    pub fn sram(&self) -> Sram {
        match *self {
            BankSelect::Bank { sram, .. } | BankSelect::Broadcast(sram) => sram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AddressPattern {
    pub bank: BankSelect,
    pub base: u32,
    pub stride: u32,
    pub dilation_stride: u32,
    pub count: u32,
}

impl AddressPattern {
    /// Unit-stride run of `count` words.
    pub fn run(bank: BankSelect, base: u32, count: u32) -> Self {
        Self { bank, base, stride: 1, dilation_stride: 1, count }
    }
}

/// `a_i = base + i·stride` (`dilation_stride` when `dilated`), checked
/// against the bank capacity.
pub fn gen_addresses(p: &AddressPattern, dilated: bool, geo: &Geometry) -> Result<Vec<u32>, IsaError> {
    if p.stride == 0 || p.dilation_stride == 0 {
        return Err(IsaError::BadPattern("stride and dilation stride must be positive".into()));
    }
    let sram = p.bank.sram();
    if let BankSelect::Bank { bank, .. } = p.bank {
        if bank as usize >= sram.banks() {
            return Err(IsaError::BadPattern(format!("{sram:?} bank {bank} does not exist")));
        }
    }
    let step = if dilated { p.dilation_stride } else { p.stride } as u64;
    let cap = geo.bank_words(sram) as u64;
    if p.count > 0 {
        let last = p.base as u64 + (p.count as u64 - 1) * step;
        if last >= cap {
            return Err(IsaError::OutOfBank { sram, addr: last, capacity: cap });
        }
    }
    Ok((0..p.count as u64).map(|i| (p.base as u64 + i * step) as u32).collect())
}
