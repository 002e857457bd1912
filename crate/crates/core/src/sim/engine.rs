//! Frame-level drivers: the simulator as a magnitude engine, single-kernel
//! programs and the LN/BN schedule comparison.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::machine::Machine;
use super::report::CycleReport;
use super::SimError;
use crate::isa::{
    compile, Alloc, CompileOptions, ConvShape, Descriptor, ExtRef, Flags, IsaError, LayerSpan, MicroOp, NormPass, OpKind,
    Program, ProgramMeta, Region, Sram, Stream, DATA_BANKS,
};
use crate::model::{fold_bn, MagnitudeEngine, ModelConfig, Weights};
use crate::numerics::Format;

/// Layer span name of the ops in a [`kernel_program`].
pub const KERNEL_LAYER: &str = "kernel";

/// The cycle-accurate machine running the compiled network frame by frame.
#[derive(Debug, Clone)]
pub struct SimEngine {
    pub machine: Machine,
    pub last_report: Option<CycleReport>,
    pub frames: u64,
}

impl SimEngine {
    pub fn new(cfg: &ModelConfig, weights: &Weights, fmt: Format, opts: &CompileOptions) -> Result<Self, SimError> {
        Self::from_program(Arc::new(compile(cfg, weights, fmt, opts)?))
    }

    pub fn from_program(prog: Arc<Program>) -> Result<Self, SimError> {
        Ok(Self { machine: Machine::new(prog)?, last_report: None, frames: 0 })
    }

    /// One frame on already-encoded codes.
    pub fn step_codes(&mut self, input: &[u16]) -> Result<Vec<u16>, SimError> {
        let (out, report) = self.machine.run_program(input)?;
        self.last_report = Some(report);
        self.frames += 1;
        Ok(out)
    }
}

impl MagnitudeEngine for SimEngine {
    type Error = SimError;

    fn enhance_magnitude(&mut self, noisy: &[f64]) -> Result<Vec<f64>, SimError> {
        let fmt = self.machine.format();
        let codes: Vec<u16> = noisy.iter().map(|&x| fmt.encode(x)).collect();
        Ok(self.step_codes(&codes)?.iter().map(|&c| fmt.decode(c)).collect())
    }

    fn reset(&mut self) {
        self.machine.reset();
    }
}

/// A program that loads `weights` and `bias` into the ping halves, waits,
/// then runs `kernel` as layer [`KERNEL_LAYER`]. Descriptor ids in
/// `kernel` index `descriptors`.
pub fn kernel_program(fmt: Format, descriptors: Vec<Descriptor>, kernel: Vec<MicroOp>, weights: &[u16], bias: &[u16]) -> Result<Program, IsaError> {
    let mut prog = Program {
        meta: ProgramMeta { format: fmt.to_string(), model_hash: String::new(), config: String::new(), weight_groups: 1 },
        descriptors,
        ops: Vec::new(),
        layers: Vec::new(),
        groups: Vec::new(),
        image: Vec::new(),
    };
    for (sram, words) in [(Sram::Weight, weights), (Sram::Bias, bias)] {
        if words.is_empty() {
            continue;
        }
        let offset = prog.image.len() as u32;
        prog.image.extend_from_slice(words);
        let count = words.len() as u32;
        let src0 = prog.push_desc(Descriptor::Ext(ExtRef { stream: Stream::Image { offset }, count }))?;
        let dst = prog.push_desc(Descriptor::Region(Region { sram, half: 0, base: 0, count }))?;
        prog.ops.push(MicroOp { kind: OpKind::DmaLoad, flags: Flags::default(), lanes: 0, src0, src1: 0, dst });
    }
    prog.ops.push(MicroOp::barrier());
    let start = prog.ops.len();
    prog.ops.extend(kernel);
    prog.layers.push(LayerSpan { name: KERNEL_LAYER.into(), start, end: prog.ops.len() });
    Ok(prog)
}

/// Run a kernel program once on `data` written into `maps`; returns the machine.
pub fn run_kernel(prog: Program, maps: &[(Alloc, Vec<u16>)]) -> Result<Machine, SimError> {
    let mut m = Machine::new(Arc::new(prog))?;
    for (a, words) in maps {
        m.write_map(&a.view(), words)?;
    }
    m.begin_frame(&[])?;
    m.run_to_end()?;
    Ok(m)
}

fn kernel_cycles(m: &Machine) -> u64 {
    m.state.report.layer(KERNEL_LAYER).map_or(0, |l| l.cycles)
}

/// How batch norm is deployed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Folded into the preceding conv's weights and bias.
    Folded,
    /// A separate per-channel affine sweep.
    Unfolded,
}

fn random_codes(fmt: Format, rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<u16> {
    (0..n).map(|_| fmt.encode(rng.gen_range(lo..hi))).collect()
}

/// Cycles a `[channels, len]` layer spends normalizing: layer norm (three
/// sweeps) versus batch norm in `mode`. Folded BN is measured as the extra
/// cycles of the BN-folded conv over the bare conv.
pub fn norm_mode_compare(channels: usize, len: usize, mode: BnMode, fmt: Format) -> Result<(u64, u64), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e4f524d);
    let (c, n) = (channels as u32, len as u32);
    let x = Alloc { offset: 0, nbanks: DATA_BANKS as u8, base: 0, channels: c, len: n };
    let xs = random_codes(fmt, &mut rng, channels * len, -2.0, 2.0);
    let gamma = random_codes(fmt, &mut rng, channels, 0.5, 1.5);
    let beta = random_codes(fmt, &mut rng, channels, -0.5, 0.5);
    let flags = Flags { finalize_round: true, ..Flags::default() };

    let stats = Alloc { offset: 4, nbanks: DATA_BANKS as u8, base: x.words_per_bank(), channels: 2, len: n };
    let inv = Region { sram: Sram::Bias, half: 0, base: 0, count: 1 };
    let params = Region { sram: Sram::Bias, half: 0, base: 1, count: 2 * c };
    let none = Region { sram: Sram::Bias, half: 0, base: 0, count: 0 };
    let norm = |pass, params| Descriptor::Norm { pass, stats: stats.view(), params, inv_c: inv };
    let descs = vec![Descriptor::Map(x.view()), norm(NormPass::Mean, none), norm(NormPass::Var, none), norm(NormPass::Normalize, params)];
    let pass = |src1, dst| MicroOp { kind: OpKind::NormPass, flags, lanes: 16, src0: 1, src1, dst };
    let mut bias = vec![fmt.encode(1.0 / channels as f64)];
    bias.extend(&gamma);
    bias.extend(&beta);
    let ln = kernel_program(fmt, descs, vec![pass(2, 0), pass(3, 0), pass(4, 1)], &[], &bias)?;
    let ln_cycles = kernel_cycles(&run_kernel(ln, &[(x, xs.clone())])?);

    let bn_cycles = match mode {
        BnMode::Unfolded => {
            let params = Region { sram: Sram::Bias, half: 0, base: 0, count: 2 * c };
            let descs = vec![Descriptor::Map(x.view()), Descriptor::Affine { params, relu: false }];
            let prog = kernel_program(fmt, descs, vec![pass(2, 1)], &[], &[gamma.clone(), beta.clone()].concat())?;
            kernel_cycles(&run_kernel(prog, &[(x, xs)])?)
        }
        BnMode::Folded => {
            let w: Vec<f64> = (0..channels * channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let b: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let mean: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let var: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect();
            let g: Vec<f64> = gamma.iter().map(|&v| fmt.decode(v)).collect();
            let be: Vec<f64> = beta.iter().map(|&v| fmt.decode(v)).collect();
            let (wf, bf) = fold_bn(&w, &b, channels, &g, &be, &mean, &var)?;
            let y = Alloc { offset: 4, nbanks: DATA_BANKS as u8, base: x.words_per_bank(), channels: c, len: n };
            let conv = |w: &[f64], b: &[f64]| -> Result<u64, SimError> {
                let shape = ConvShape { cin: c, cout: c, k: 1, stride: 1, dilation: 1, pad: 0, upsample: 1, in_len: n, out_len: n };
                let weights = Region { sram: Sram::Weight, half: 0, base: 0, count: c * c };
                let bias = Region { sram: Sram::Bias, half: 0, base: 0, count: c };
                let descs = vec![
                    Descriptor::Map(x.view()),
                    Descriptor::Conv { shape, weights, bias, relu: false },
                    Descriptor::Map(y.view()),
                ];
                let op = MicroOp { kind: OpKind::ConvFlow, flags: Flags { zero_skip: true, ..flags }, lanes: 16, src0: 1, src1: 2, dst: 3 };
                let enc = |v: &[f64]| v.iter().map(|&a| fmt.encode(a)).collect::<Vec<_>>();
                let prog = kernel_program(fmt, descs, vec![op], &enc(w), &enc(b))?;
                Ok(kernel_cycles(&run_kernel(prog, &[(x, xs.clone())])?))
            };
            conv(&wf, &bf)? - conv(&w, &b)?
        }
    };
    Ok((ln_cycles, bn_cycles))
}
