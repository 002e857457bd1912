//! Micro-op ISA: machine geometry, address patterns, descriptors, the
//! 64-bit instruction encoding, programs and the compiler.

mod compile;
mod desc;
mod op;
mod pattern;
mod program;

pub use compile::{compile, compile_net, CompileOptions};
pub use desc::{Alloc, ConvShape, Descriptor, ExtRef, MapView, NormPass, Region, Stream};
pub use op::{assemble, disassemble, Flags, InstructionWord, MicroOp, OpKind, MAX_DESC_ID, MAX_LANES};
pub use pattern::{
    beats, gen_addresses, total_sram_bytes, AddressPattern, BankSelect, Geometry, Sram, BEAT_BITS, BIAS_BANKS,
    BIAS_BANK_BYTES, BLOCKS, DATA_BANKS, DATA_BANK_BYTES, LANES, MAX_MACS_PER_CYCLE, REG_BUFFERS, REG_BUFFER_BITS,
    WEIGHT_BANKS, WEIGHT_BANK_BYTES,
};
pub use program::{describe, op_line, GroupSpan, LayerSpan, Program, ProgramMeta};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum IsaError {
    #[error("unknown op kind code {0}")]
    BadKind(u8),
    #[error("{field} value {value} does not fit its field")]
    FieldOverflow { field: &'static str, value: u64 },
    #[error("bad address pattern: {0}")]
    BadPattern(String),
    #[error("address {addr} outside {sram:?} bank of {capacity} words")]
    OutOfBank { sram: Sram, addr: u64, capacity: u64 },
    #[error("bad descriptor: {0}")]
    BadDescriptor(String),
    #[error("does not fit on chip: {0}")]
    Capacity(String),
    #[error("bad program file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
