//! Micro-ops and their 64-bit instruction words.
//!
//! Layout, most significant first: kind(4) | flags(4) | lane_count(5) |
//! src0(17) | src1(17) | dst(17). Descriptor id 0 means "no operand";
//! id `n` refers to entry `n - 1` of the program's descriptor table.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::IsaError;

/// Largest descriptor id a pattern field can hold.
pub const MAX_DESC_ID: u32 = (1 << 17) - 1;
/// Largest lane count an op may declare.
pub const MAX_LANES: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    ConvFlow,
    MmFlow,
    EwAdd,
    EwMul,
    ActLut,
    NormPass,
    DmaLoad,
    DmaStore,
    Barrier,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::ConvFlow,
        OpKind::MmFlow,
        OpKind::EwAdd,
        OpKind::EwMul,
        OpKind::ActLut,
        OpKind::NormPass,
        OpKind::DmaLoad,
        OpKind::DmaStore,
        OpKind::Barrier,
    ];

    pub fn code(self) -> u8 {
        match self {
            OpKind::ConvFlow => 1,
            OpKind::MmFlow => 2,
            OpKind::EwAdd => 3,
            OpKind::EwMul => 4,
            OpKind::ActLut => 5,
            OpKind::NormPass => 6,
            OpKind::DmaLoad => 7,
            OpKind::DmaStore => 8,
            OpKind::Barrier => 9,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, IsaError> {
        Self::ALL.into_iter().find(|k| k.code() == c).ok_or(IsaError::BadKind(c))
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::ConvFlow => "CONV_FLOW",
            OpKind::MmFlow => "MM_FLOW",
            OpKind::EwAdd => "EW_ADD",
            OpKind::EwMul => "EW_MUL",
            OpKind::ActLut => "ACT_LUT",
            OpKind::NormPass => "NORM_PASS",
            OpKind::DmaLoad => "DMA_LOAD",
            OpKind::DmaStore => "DMA_STORE",
            OpKind::Barrier => "BARRIER",
        }
    }

    pub fn is_dma(self) -> bool {
        matches!(self, OpKind::DmaLoad | OpKind::DmaStore)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub zero_skip: bool,
    pub accumulate: bool,
    pub finalize_round: bool,
    /// Address generation uses the dilation stride.
    pub dilated: bool,
}

impl Flags {
    pub fn bits(self) -> u8 {
        self.zero_skip as u8 | (self.accumulate as u8) << 1 | (self.finalize_round as u8) << 2 | (self.dilated as u8) << 3
    }

    pub fn from_bits(b: u8) -> Self {
        Self { zero_skip: b & 1 != 0, accumulate: b & 2 != 0, finalize_round: b & 4 != 0, dilated: b & 8 != 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MicroOp {
    pub kind: OpKind,
    pub flags: Flags,
    pub lanes: u8,
    pub src0: u32,
    pub src1: u32,
    pub dst: u32,
}

impl MicroOp {
    pub fn barrier() -> Self {
        Self { kind: OpKind::Barrier, flags: Flags::default(), lanes: 0, src0: 0, src1: 0, dst: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InstructionWord(pub u64);

pub fn assemble(op: &MicroOp) -> Result<InstructionWord, IsaError> {
    if op.lanes > MAX_LANES {
        return Err(IsaError::FieldOverflow { field: "lane_count", value: op.lanes as u64 });
    }
    for (field, v) in [("src0", op.src0), ("src1", op.src1), ("dst", op.dst)] {
        if v > MAX_DESC_ID {
            return Err(IsaError::FieldOverflow { field, value: v as u64 });
        }
    }
    let w = (op.kind.code() as u64) << 60
        | (op.flags.bits() as u64) << 56
        | (op.lanes as u64) << 51
        | (op.src0 as u64) << 34
        | (op.src1 as u64) << 17
        | op.dst as u64;
    Ok(InstructionWord(w))
}

pub fn disassemble(w: InstructionWord) -> Result<MicroOp, IsaError> {
    let w = w.0;
    let kind = OpKind::from_code((w >> 60) as u8)?;
    let lanes = ((w >> 51) & 0x1f) as u8;
    if lanes > MAX_LANES {
        return Err(IsaError::FieldOverflow { field: "lane_count", value: lanes as u64 });
    }
    let m = MAX_DESC_ID as u64;
    Ok(MicroOp {
        kind,
        flags: Flags::from_bits(((w >> 56) & 0xf) as u8),
        lanes,
        src0: ((w >> 34) & m) as u32,
        src1: ((w >> 17) & m) as u32,
        dst: (w & m) as u32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn any_op() -> impl Strategy<Value = MicroOp> {
        (0..9usize, 0..16u8, 0..=16u8, 0..=MAX_DESC_ID, 0..=MAX_DESC_ID, 0..=MAX_DESC_ID).prop_map(|(k, f, lanes, a, b, d)| {
            MicroOp { kind: OpKind::ALL[k], flags: Flags::from_bits(f), lanes, src0: a, src1: b, dst: d }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn round_trip(op in any_op()) {
            prop_assert_eq!(disassemble(assemble(&op).unwrap()).unwrap(), op);
        }
    }

    #[test]
    fn barrier_fields_are_zero() {
        let w = assemble(&MicroOp::barrier()).unwrap().0;
        assert_eq!(w & ((1 << 51) - 1), 0);
        assert_eq!(w >> 60, 9);
    }

    #[test]
    fn malformed() {
        assert!(matches!(disassemble(InstructionWord(0)), Err(IsaError::BadKind(0))));
        assert!(matches!(disassemble(InstructionWord(0xf << 60)), Err(IsaError::BadKind(15))));
        let over = MicroOp { lanes: 17, ..MicroOp::barrier() };
        assert!(assemble(&over).is_err());
        let big = MicroOp { dst: MAX_DESC_ID + 1, ..MicroOp::barrier() };
        assert!(assemble(&big).is_err());
        assert!(disassemble(InstructionWord(9 << 60 | 17 << 51)).is_err());
    }
}
