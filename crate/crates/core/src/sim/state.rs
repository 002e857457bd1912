//! Architectural state of the machine.

use std::collections::VecDeque;

use super::report::CycleReport;
use crate::isa::{ConvShape, Geometry, MapView, NormPass, Region, Sram, BLOCKS, LANES, REG_BUFFERS};
use crate::model::ConvGeom;
use crate::numerics::{ActKind, ExtAcc};

/// Words of one 160-bit register buffer at the widest lane count.
pub const REG_WORDS: usize = 2 * LANES;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PeMode {
    #[default]
    Idle,
    MulAcc,
    EwAdd,
    EwMul,
    Bypass,
}

/// One PE block: 8 cells feeding a tree adder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeBlock {
    pub mode: PeMode,
    /// Cells holding a valid operand pair this cycle.
    pub active: u8,
    /// Active cells data-gated because their gated operand is zero.
    pub skip: u8,
}

/// Where a load lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadDst {
    Region(Region),
    Map(MapView),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferKind {
    /// `words` is `None` until the frame input is available.
    Load { dst: LoadDst, words: Option<Vec<u16>>, from_input: bool },
    Store { words: Vec<u16> },
}

/// One queued memory-controller transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub op: usize,
    pub kind: TransferKind,
    pub count: u32,
    pub beats: u64,
    pub done: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvExec {
    pub src: MapView,
    pub dst: MapView,
    pub shape: ConvShape,
    pub geom: ConvGeom,
    pub weights: Region,
    pub bias: Region,
    pub relu: bool,
    pub accumulate: bool,
    pub zero_skip: bool,
    pub pair: u32,
    pub p: u32,
    pub t: u32,
    pub cg: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmExec {
    pub a: MapView,
    pub b: MapView,
    pub out: MapView,
    pub scale: Option<u16>,
    pub zero_skip: bool,
    pub xp: u32,
    pub yg: u32,
    pub j: u32,
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    /// `src0 + src1`; a raw copy of `src0` when there is no `src1`.
    Add { copy: bool },
    /// `[dst +] src0 · src1`, `src0` gated.
    Mul { accumulate: bool },
    Act(ActKind),
    Affine { params: Region, relu: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElemExec {
    pub kind: ElemKind,
    pub s0: MapView,
    pub s1: Option<MapView>,
    pub dst: MapView,
    pub zero_skip: bool,
    pub row: u32,
    pub chunk: u32,
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormExec {
    pub pass: NormPass,
    pub x: MapView,
    pub stats: MapView,
    pub params: Region,
    pub inv_c: u16,
    pub chunk: u32,
    pub ch: u32,
    /// Remaining fixed-latency cycles after the sweep.
    pub tail: u32,
}

/// The op occupying the issue slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Barrier { beats: u64, window: u64, stall: u64 },
    Conv(ConvExec),
    Mm(MmExec),
    Elem(ElemExec),
    Norm(NormExec),
}

/// DMA issued since the last barrier: first issue cycle and total beats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DmaWindow {
    pub first: u64,
    pub beats: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub cycle: u64,
    pub pc: usize,
    pub data: Vec<Vec<u16>>,
    pub weight: Vec<Vec<u16>>,
    pub bias: Vec<Vec<u16>>,
    pub reg_buffers: [[u16; REG_WORDS]; REG_BUFFERS],
    pub pe: [PeBlock; BLOCKS],
    /// One extended-precision accumulator per PE cell.
    pub acc: Vec<ExtAcc>,
    pub dma_in: VecDeque<Transfer>,
    pub dma_out: VecDeque<Transfer>,
    pub window: Option<DmaWindow>,
    /// Ping/pong halves read by compute since the last barrier.
    pub owned: Vec<(Sram, u8)>,
    pub exec: Option<Exec>,
    /// Frame input waiting at the memory controller.
    pub input: Option<Vec<u16>>,
    pub output: Vec<u16>,
    pub report: CycleReport,
    /// Consecutive cycles without progress.
    pub idle: u64,
}

impl MachineState {
    /// Cleared SRAM and an empty pipeline.
    pub fn new(geo: &Geometry) -> Self {
        let banks = |s: Sram| vec![vec![0u16; geo.bank_words(s) as usize]; s.banks()];
        Self {
            cycle: 0,
            pc: 0,
            data: banks(Sram::Data),
            weight: banks(Sram::Weight),
            bias: banks(Sram::Bias),
            reg_buffers: [[0; REG_WORDS]; REG_BUFFERS],
            pe: [PeBlock::default(); BLOCKS],
            acc: vec![ExtAcc::new(); BLOCKS * LANES],
            dma_in: VecDeque::new(),
            dma_out: VecDeque::new(),
            window: None,
            owned: Vec::new(),
            exec: None,
            input: None,
            output: Vec::new(),
            report: CycleReport::default(),
            idle: 0,
        }
    }

    pub fn bank(&self, s: Sram) -> &Vec<Vec<u16>> {
        match s {
            Sram::Data => &self.data,
            Sram::Weight => &self.weight,
            Sram::Bias => &self.bias,
        }
    }

    pub fn bank_mut(&mut self, s: Sram) -> &mut Vec<Vec<u16>> {
        match s {
            Sram::Data => &mut self.data,
            Sram::Weight => &mut self.weight,
            Sram::Bias => &mut self.bias,
        }
    }

    pub fn dma_pending(&self) -> bool {
        !self.dma_in.is_empty() || !self.dma_out.is_empty()
    }
}
