//! Cycle-accurate machine: 2 PE blocks × 8 cells with exact accumulators,
//! banked ping-pong SRAM, register buffers and an 80-bit-per-direction
//! memory controller, executing compiled programs one clock at a time.

mod engine;
mod machine;
mod report;
mod state;

pub use engine::{kernel_program, norm_mode_compare, run_kernel, BnMode, SimEngine, KERNEL_LAYER};
pub use machine::{Machine, IO_LAYER, RSQRT_LATENCY, SWEEP_LANES};
pub use report::{BarrierWait, CycleReport, LayerCounters, SramCounts};
pub use state::{
    ConvExec, DmaWindow, ElemExec, ElemKind, Exec, LoadDst, MachineState, MmExec, NormExec, PeBlock, PeMode, Transfer,
    TransferKind, REG_WORDS,
};

use crate::isa::{IsaError, Sram};
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("op {op}: {reason}")]
    BadOp { op: usize, reason: String },
    #[error("op {op} touches memory with a load in flight")]
    Hazard { op: usize },
    #[error("op {op}: {sram:?} half {half} is owned by compute")]
    Ownership { op: usize, sram: Sram, half: u8 },
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("frame input: {0}")]
    Input(String),
    #[error("deadlock at op {pc}: no progress for {cycles} cycles")]
    Deadlock { pc: usize, cycles: u64 },
}

#[cfg(test)]
mod tests;
