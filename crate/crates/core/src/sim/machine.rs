//! Cycle-by-cycle execution of a program.
//!
//! Each `step` is one clock: the op in the issue slot does one cycle of
//! work (or stalls), then the memory controller moves at most one beat in
//! each direction. Compute ops hold the issue slot until their last cycle;
//! DMA ops take one issue cycle and run in the background until a BARRIER.

use std::sync::Arc;

use super::report::{BarrierWait, CycleReport};
use super::state::{ConvExec, ElemExec, ElemKind, Exec, LoadDst, MachineState, MmExec, NormExec, PeMode, Transfer, TransferKind};
use super::SimError;
use crate::isa::{beats, Descriptor, ExtRef, Geometry, MapView, MicroOp, NormPass, OpKind, Program, Region, Sram, Stream, BLOCKS, LANES};
use crate::model::rsqrt_code;
use crate::numerics::{mul_codes, ActLut, ExtAcc, ExtendedProduct, Format, Rounded};

/// Fixed cycles the reciprocal square root adds to a variance sweep.
pub const RSQRT_LATENCY: u32 = 2;
/// Elements per cycle of an element-wise or norm sweep.
pub const SWEEP_LANES: u32 = (BLOCKS * LANES) as u32;
/// Layer name for cycles spent outside every layer span.
pub const IO_LAYER: &str = "io";

/// What one cycle did.
#[derive(Debug, Clone, Copy, Default)]
struct Activity {
    issued: u64,
    skipped: u64,
    progress: bool,
    stall: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct Machine {
    prog: Arc<Program>,
    fmt: Format,
    geo: Geometry,
    names: Vec<String>,
    layer_of_op: Vec<usize>,
    input_words: Option<u32>,
    pub state: MachineState,
    trace: Option<Vec<String>>,
}

impl Machine {
    pub fn new(prog: Arc<Program>) -> Result<Self, SimError> {
        let fmt = prog.format()?;
        let geo = Geometry::for_format(fmt);
        prog.check_addresses()?;
        let mut names: Vec<String> = Vec::new();
        for l in &prog.layers {
            if !names.contains(&l.name) {
                names.push(l.name.clone());
            }
        }
        names.push(IO_LAYER.into());
        let io = names.len() - 1;
        let layer_of_op =
            (0..prog.ops.len()).map(|i| prog.layer_of(i).and_then(|n| names.iter().position(|m| m == n)).unwrap_or(io)).collect();
        let mut input_words = None;
        for op in prog.ops.iter().filter(|o| o.kind == OpKind::DmaLoad) {
            if let Ok(Some(Descriptor::Ext(ExtRef { stream: Stream::Input, count }))) = prog.desc(op.src0) {
                input_words = Some(*count);
            }
        }
        let mut state = MachineState::new(&geo);
        state.report = CycleReport::with_layers(&names);
        Ok(Self { prog, fmt, geo, names, layer_of_op, input_words, state, trace: None })
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.prog
    }

    pub fn format(&self) -> Format {
        self.fmt
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    /// Words the program reads from the frame input, if any.
    pub fn input_words(&self) -> Option<u32> {
        self.input_words
    }

    /// Record one line per cycle.
    pub fn set_trace(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Clear all SRAM, including recurrent state.
    pub fn reset(&mut self) {
        self.state = MachineState::new(&self.geo);
        self.state.report = CycleReport::with_layers(&self.names);
    }

    /// Rewind to the first op with a fresh report and stage `input`.
    pub fn begin_frame(&mut self, input: &[u16]) -> Result<(), SimError> {
        if let Some(n) = self.input_words {
            if input.len() != n as usize {
                return Err(SimError::Input(format!("expected {n} words, got {}", input.len())));
            }
        }
        if self.state.exec.is_some() {
            return Err(SimError::Input("previous frame still running".into()));
        }
        let st = &mut self.state;
        st.pc = 0;
        st.report = CycleReport::with_layers(&self.names);
        st.output.clear();
        st.input = self.input_words.map(|_| input.to_vec());
        st.window = None;
        st.owned.clear();
        st.idle = 0;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.state.pc >= self.prog.ops.len() && !self.state.dma_pending()
    }

    /// Advance one cycle; `false` when the program had already finished.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.done() {
            return Ok(false);
        }
        let pc = self.state.pc;
        let layer = self.layer_of_op.get(pc).copied().unwrap_or(self.names.len() - 1);
        let mut act = Activity::default();
        self.compute(&mut act)?;
        self.memory(&mut act)?;

        let st = &mut self.state;
        st.cycle += 1;
        let r = &mut st.report;
        r.cycles_total += 1;
        r.macs_issued += act.issued;
        r.macs_skipped += act.skipped;
        r.max_macs_per_cycle = r.max_macs_per_cycle.max(act.issued);
        let l = &mut r.layers[layer];
        l.cycles += 1;
        l.macs_issued += act.issued;
        l.macs_skipped += act.skipped;
        if act.progress {
            st.idle = 0;
        } else {
            st.idle += 1;
            if st.idle > self.geo.data_words as u64 {
                return Err(SimError::Deadlock { pc, cycles: st.idle });
            }
        }
        if let Some(t) = self.trace.as_mut() {
            let kind = self.prog.ops.get(pc).map_or("-", |o| o.kind.mnemonic());
            t.push(format!(
                "{} pc={} {} layer={} issued={} skipped={} stall={} dma_in={} dma_out={}",
                st.cycle - 1,
                pc,
                kind,
                self.names[layer],
                act.issued,
                act.skipped,
                act.stall.unwrap_or("-"),
                st.dma_in.len(),
                st.dma_out.len()
            ));
        }
        Ok(true)
    }

    /// Step up to `n` cycles; returns the cycles actually run.
    pub fn run_cycles(&mut self, n: u64) -> Result<u64, SimError> {
        let mut k = 0;
        while k < n && self.step()? {
            k += 1;
        }
        Ok(k)
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Execute one frame: output codes and that frame's report.
    pub fn run_program(&mut self, input: &[u16]) -> Result<(Vec<u16>, CycleReport), SimError> {
        self.begin_frame(input)?;
        self.run_to_end()?;
        Ok((std::mem::take(&mut self.state.output), self.state.report.clone()))
    }

    /// Queue a parameter transfer into an idle ping/pong half.
    pub fn load_stream(&mut self, words: &[u16], dst: Region) -> Result<u64, SimError> {
        if dst.count as usize != words.len() {
            return Err(SimError::Capacity(format!("{} words for a region of {}", words.len(), dst.count)));
        }
        self.check_load_region(usize::MAX, &dst)?;
        let kind = TransferKind::Load { dst: LoadDst::Region(dst), words: Some(words.to_vec()), from_input: false };
        Ok(self.enqueue(usize::MAX, kind, dst.count))
    }

    /// Write a feature map directly (debug access, no cycles).
    pub fn write_map(&mut self, v: &MapView, words: &[u16]) -> Result<(), SimError> {
        let cols = v.cols();
        if words.len() != (v.rows() * cols) as usize {
            return Err(SimError::Input(format!("{} words for a {}x{} map", words.len(), v.rows(), cols)));
        }
        for (i, &w) in words.iter().enumerate() {
            let (b, a) = v.locate(i as u32 / cols, i as u32 % cols);
            self.state.data[b][a as usize] = w;
        }
        Ok(())
    }

    /// Read a feature map directly (debug access, no cycles).
    pub fn read_map(&self, v: &MapView) -> Vec<u16> {
        let mut out = Vec::with_capacity((v.rows() * v.cols()) as usize);
        for r in 0..v.rows() {
            for s in 0..v.cols() {
                let (b, a) = v.locate(r, s);
                let w = self.state.data[b][a as usize];
                out.push(if v.negate { self.fmt.negate(w) } else { w });
            }
        }
        out
    }

    // ---- operand access ----

    #[inline]
    fn rd(&mut self, v: &MapView, r: u32, s: u32) -> u16 {
        let (b, a) = v.locate(r, s);
        self.state.report.sram_reads.data += 1;
        let w = self.state.data[b][a as usize];
        if v.negate {
            self.fmt.negate(w)
        } else {
            w
        }
    }

    #[inline]
    fn wr(&mut self, v: &MapView, r: u32, s: u32, w: u16) {
        let (b, a) = v.locate(r, s);
        self.state.report.sram_writes.data += 1;
        self.state.data[b][a as usize] = w;
    }

    #[inline]
    fn rd_param(&mut self, reg: &Region, i: u32) -> u16 {
        let (b, a) = reg.locate(i, &self.geo);
        let r = &mut self.state.report.sram_reads;
        match reg.sram {
            Sram::Data => r.data += 1,
            Sram::Weight => r.weight += 1,
            Sram::Bias => r.bias += 1,
        }
        self.state.bank(reg.sram)[b][a as usize]
    }

    #[inline]
    fn round(&mut self, r: Rounded) -> u16 {
        if r.saturated {
            self.state.report.saturation_events += 1;
        }
        r.bits
    }

    fn fin(&mut self, acc: &ExtAcc) -> u16 {
        let r = acc.finalize(self.fmt);
        self.round(r)
    }

    // ---- issue slot ----

    fn compute(&mut self, act: &mut Activity) -> Result<(), SimError> {
        let pc = self.state.pc;
        let Some(&op) = self.prog.ops.get(pc) else {
            return Ok(());
        };
        if self.state.exec.is_none() {
            match op.kind {
                OpKind::DmaLoad | OpKind::DmaStore => {
                    self.issue_dma(pc, &op)?;
                    self.state.pc += 1;
                    act.progress = true;
                    return Ok(());
                }
                OpKind::Barrier => {
                    let (beats, window) = match self.state.window {
                        Some(w) => (w.beats, self.state.cycle - w.first),
                        None => (0, 0),
                    };
                    self.state.exec = Some(Exec::Barrier { beats, window, stall: 0 });
                }
                _ => {
                    let e = self.start(pc, &op)?;
                    self.state.exec = Some(e);
                }
            }
        }
        let mut exec = self.state.exec.expect("op in issue slot");
        let finished = match &mut exec {
            Exec::Barrier { beats, window, stall } => {
                if self.state.dma_pending() {
                    *stall += 1;
                    self.state.report.stalls_dma += 1;
                    act.stall = Some("dma");
                    false
                } else {
                    if *beats > 0 {
                        self.state.report.barrier_waits.push(BarrierWait { op: pc, beats: *beats, window: *window, stall: *stall });
                    }
                    self.state.window = None;
                    self.state.owned.clear();
                    act.progress = true;
                    true
                }
            }
            Exec::Conv(e) => self.conv_cycle(e, act),
            Exec::Mm(e) => self.mm_cycle(e, act),
            Exec::Elem(e) => self.elem_cycle(e, act),
            Exec::Norm(e) => self.norm_cycle(e, act),
        };
        if finished {
            self.state.exec = None;
            self.state.pc += 1;
            self.state.pe = Default::default();
        } else {
            self.state.exec = Some(exec);
        }
        Ok(())
    }

    fn map(&self, pc: usize, id: u32) -> Result<MapView, SimError> {
        self.prog.map(id).copied().map_err(|e| SimError::BadOp { op: pc, reason: e.to_string() })
    }

    fn desc(&self, pc: usize, id: u32) -> Result<Descriptor, SimError> {
        match self.prog.desc(id) {
            Ok(Some(d)) => Ok(d.clone()),
            Ok(None) => Err(SimError::BadOp { op: pc, reason: "missing operand".into() }),
            Err(e) => Err(SimError::BadOp { op: pc, reason: e.to_string() }),
        }
    }

    /// Decode and validate a compute op, check hazards and claim its halves.
    fn start(&mut self, pc: usize, op: &MicroOp) -> Result<Exec, SimError> {
        let bad = |reason: String| SimError::BadOp { op: pc, reason };
        if !op.flags.finalize_round && !matches!(op.kind, OpKind::EwAdd) {
            return Err(bad("every compute op must round its results".into()));
        }
        let same = |a: &MapView, b: &MapView| a.rows() == b.rows() && a.cols() == b.cols();
        let zero_skip = op.flags.zero_skip;
        let (exec, maps, regions): (Exec, Vec<MapView>, Vec<Region>) = match op.kind {
            OpKind::ConvFlow => {
                let (src, dst) = (self.map(pc, op.src0)?, self.map(pc, op.dst)?);
                let Descriptor::Conv { shape, weights, bias, relu } = self.desc(pc, op.src1)? else {
                    return Err(bad("conv needs a conv descriptor".into()));
                };
                let s = shape;
                if s.cin == 0 || s.cout == 0 || s.k == 0 || s.out_len == 0 {
                    return Err(bad("empty conv".into()));
                }
                if src.transposed || dst.transposed || src.rows() != s.cin || src.cols() != s.in_len || dst.rows() != s.cout || dst.cols() != s.out_len {
                    return Err(bad("conv operand shapes disagree with the conv shape".into()));
                }
                if weights.count != s.cout * s.cin * s.k || bias.count != s.cout {
                    return Err(bad("conv parameter regions have the wrong size".into()));
                }
                if (s.dilation > 1) != op.flags.dilated {
                    return Err(bad("dilated flag disagrees with the conv shape".into()));
                }
                let e = ConvExec {
                    src,
                    dst,
                    shape: s,
                    geom: s.into(),
                    weights,
                    bias,
                    relu,
                    accumulate: op.flags.accumulate,
                    zero_skip,
                    pair: 0,
                    p: 0,
                    t: 0,
                    cg: 0,
                };
                (Exec::Conv(e), vec![src, dst], vec![weights, bias])
            }
            OpKind::MmFlow => {
                let (a, b) = (self.map(pc, op.src0)?, self.map(pc, op.src1)?);
                let Descriptor::Scaled { out, scale } = self.desc(pc, op.dst)? else {
                    return Err(bad("matmul needs a scaled destination".into()));
                };
                if a.cols() != b.cols() || out.rows() != b.rows() || out.cols() != a.rows() || a.cols() == 0 {
                    return Err(bad("matmul operand shapes disagree".into()));
                }
                let regions: Vec<Region> = scale.into_iter().collect();
                self.guard(pc, &[a, b, out], &regions)?;
                let scale = match scale {
                    Some(r) => Some(self.rd_param(&r, 0)),
                    None => None,
                };
                let e = MmExec { a, b, out, scale, zero_skip, xp: 0, yg: 0, j: 0, stalled: false };
                return Ok(Exec::Mm(e));
            }
            OpKind::EwAdd | OpKind::EwMul | OpKind::ActLut => {
                let (s0, dst) = (self.map(pc, op.src0)?, self.map(pc, op.dst)?);
                let (kind, s1) = match op.kind {
                    OpKind::EwAdd if op.src1 == 0 => (ElemKind::Add { copy: true }, None),
                    OpKind::EwAdd => (ElemKind::Add { copy: false }, Some(self.map(pc, op.src1)?)),
                    OpKind::EwMul => (ElemKind::Mul { accumulate: op.flags.accumulate }, Some(self.map(pc, op.src1)?)),
                    _ => match self.desc(pc, op.src1)? {
                        Descriptor::Lut(k) => (ElemKind::Act(k), None),
                        _ => return Err(bad("activation needs a LUT descriptor".into())),
                    },
                };
                if !same(&s0, &dst) || s1.is_some_and(|v| !same(&v, &s0)) {
                    return Err(bad("element-wise operand shapes disagree".into()));
                }
                let mut maps = vec![s0, dst];
                maps.extend(s1);
                let e = ElemExec { kind, s0, s1, dst, zero_skip, row: 0, chunk: 0, stalled: false };
                (Exec::Elem(e), maps, Vec::new())
            }
            OpKind::NormPass => {
                let (x, dst) = (self.map(pc, op.src0)?, if op.dst == 0 { None } else { Some(self.map(pc, op.dst)?) });
                self.state.report.norm_passes += 1;
                match self.desc(pc, op.src1)? {
                    Descriptor::Affine { params, relu } => {
                        let dst = dst.ok_or_else(|| bad("affine pass needs a destination".into()))?;
                        if !same(&x, &dst) || params.count != 2 * x.rows() {
                            return Err(bad("affine pass shapes disagree".into()));
                        }
                        let e = ElemExec { kind: ElemKind::Affine { params, relu }, s0: x, s1: None, dst, zero_skip, row: 0, chunk: 0, stalled: false };
                        (Exec::Elem(e), vec![x, dst], vec![params])
                    }
                    Descriptor::Norm { pass, stats, params, inv_c } => {
                        if x.transposed || stats.rows() != 2 || stats.cols() != x.cols() || inv_c.count != 1 {
                            return Err(bad("norm pass shapes disagree".into()));
                        }
                        if pass == NormPass::Normalize && (params.count != 2 * x.rows() || dst != Some(x)) {
                            return Err(bad("normalize pass writes its input in place with gamma and beta".into()));
                        }
                        self.guard(pc, &[x, stats], &[params, inv_c])?;
                        let inv = self.rd_param(&inv_c, 0);
                        let e = NormExec { pass, x, stats, params, inv_c: inv, chunk: 0, ch: 0, tail: 0 };
                        return Ok(Exec::Norm(e));
                    }
                    _ => return Err(bad("norm pass needs an affine or norm descriptor".into())),
                }
            }
            OpKind::DmaLoad | OpKind::DmaStore | OpKind::Barrier => unreachable!("handled at issue"),
        };
        self.guard(pc, &maps, &regions)?;
        Ok(exec)
    }

    /// Fault on operands with a load in flight; claim parameter halves.
    fn guard(&mut self, pc: usize, maps: &[MapView], regions: &[Region]) -> Result<(), SimError> {
        for t in &self.state.dma_in {
            let TransferKind::Load { dst, .. } = &t.kind else { continue };
            let clash = match dst {
                LoadDst::Region(d) => regions
                    .iter()
                    .any(|r| r.sram == d.sram && r.half == d.half && r.base < d.base + d.count && d.base < r.base + r.count),
                LoadDst::Map(d) => {
                    let fd = d.footprint();
                    maps.iter().any(|m| m.footprint().iter().any(|&(b, lo, hi)| fd.iter().any(|&(b2, lo2, hi2)| b == b2 && lo < hi2 && lo2 < hi)))
                }
            };
            if clash {
                return Err(SimError::Hazard { op: pc });
            }
        }
        for r in regions {
            if !self.state.owned.contains(&(r.sram, r.half)) {
                self.state.owned.push((r.sram, r.half));
            }
        }
        Ok(())
    }

    // ---- memory controller ----

    fn check_load_region(&self, pc: usize, r: &Region) -> Result<(), SimError> {
        if !r.sram.is_ping_pong() || r.half > 1 {
            return Err(SimError::BadOp { op: pc, reason: "parameter loads target a weight or bias half".into() });
        }
        let cap = self.geo.half_capacity(r.sram);
        if r.base as u64 + r.count as u64 > cap as u64 {
            return Err(SimError::Capacity(format!("{} words at {} overflow a {:?} half of {cap}", r.count, r.base, r.sram)));
        }
        if self.state.owned.contains(&(r.sram, r.half)) {
            return Err(SimError::Ownership { op: pc, sram: r.sram, half: r.half });
        }
        Ok(())
    }

    fn enqueue(&mut self, pc: usize, kind: TransferKind, count: u32) -> u64 {
        let n = beats(count as usize, self.geo.width);
        let w = self.state.window.get_or_insert(super::state::DmaWindow { first: self.state.cycle, beats: 0 });
        w.beats += n;
        let t = Transfer { op: pc, kind, count, beats: n, done: 0 };
        if n == 0 {
            return 0;
        }
        match t.kind {
            TransferKind::Load { .. } => self.state.dma_in.push_back(t),
            TransferKind::Store { .. } => self.state.dma_out.push_back(t),
        }
        n
    }

    fn issue_dma(&mut self, pc: usize, op: &MicroOp) -> Result<(), SimError> {
        let bad = |reason: &str| SimError::BadOp { op: pc, reason: reason.into() };
        match op.kind {
            OpKind::DmaLoad => {
                let Descriptor::Ext(ExtRef { stream, count }) = self.desc(pc, op.src0)? else {
                    return Err(bad("load source must be external"));
                };
                let dst = match self.desc(pc, op.dst)? {
                    Descriptor::Region(r) => {
                        if r.count != count {
                            return Err(bad("load length disagrees with its region"));
                        }
                        self.check_load_region(pc, &r)?;
                        LoadDst::Region(r)
                    }
                    Descriptor::Map(v) => {
                        if v.rows() * v.cols() != count {
                            return Err(bad("load length disagrees with its map"));
                        }
                        LoadDst::Map(v)
                    }
                    _ => return Err(bad("load destination must be a region or a map")),
                };
                let (words, from_input) = match stream {
                    Stream::Image { offset } => {
                        let w = self.prog.image.get(offset as usize..(offset + count) as usize).ok_or_else(|| bad("load runs past the parameter image"))?;
                        (Some(w.to_vec()), false)
                    }
                    Stream::Input => (None, true),
                    Stream::Output => return Err(bad("cannot load from the output stream")),
                };
                self.enqueue(pc, TransferKind::Load { dst, words, from_input }, count);
            }
            OpKind::DmaStore => {
                let v = self.map(pc, op.src0)?;
                let Descriptor::Ext(ExtRef { stream: Stream::Output, count }) = self.desc(pc, op.dst)? else {
                    return Err(bad("store destination must be the output stream"));
                };
                if v.rows() * v.cols() != count {
                    return Err(bad("store length disagrees with its map"));
                }
                self.guard(pc, &[v], &[])?;
                let words = self.read_map(&v);
                self.state.report.sram_reads.data += words.len() as u64;
                self.enqueue(pc, TransferKind::Store { words }, count);
            }
            _ => unreachable!("not a DMA op"),
        }
        Ok(())
    }

    fn memory(&mut self, act: &mut Activity) -> Result<(), SimError> {
        let st = &mut self.state;
        if let Some(t) = st.dma_in.front_mut() {
            let ready = match &mut t.kind {
                TransferKind::Load { words: w @ None, .. } => match st.input.take() {
                    Some(inp) => {
                        if inp.len() != t.count as usize {
                            return Err(SimError::Input(format!("expected {} words, got {}", t.count, inp.len())));
                        }
                        *w = Some(inp);
                        true
                    }
                    None => false,
                },
                _ => true,
            };
            if ready {
                t.done += 1;
                st.report.dma_beats_in += 1;
                act.progress = true;
                if t.done == t.beats {
                    let t = st.dma_in.pop_front().expect("front transfer");
                    self.commit(t);
                }
            } else {
                act.stall = act.stall.or(Some("input"));
            }
        }
        let st = &mut self.state;
        if let Some(t) = st.dma_out.front_mut() {
            t.done += 1;
            st.report.dma_beats_out += 1;
            act.progress = true;
            if t.done == t.beats {
                if let Some(Transfer { kind: TransferKind::Store { words }, .. }) = st.dma_out.pop_front() {
                    st.output.extend(words);
                }
            }
        }
        Ok(())
    }

    fn commit(&mut self, t: Transfer) {
        let TransferKind::Load { dst, words: Some(words), .. } = t.kind else { return };
        match dst {
            LoadDst::Region(r) => {
                for (i, &w) in words.iter().enumerate() {
                    let (b, a) = r.locate(i as u32, &self.geo);
                    self.state.bank_mut(r.sram)[b][a as usize] = w;
                }
                let c = &mut self.state.report.sram_writes;
                match r.sram {
                    Sram::Data => c.data += words.len() as u64,
                    Sram::Weight => c.weight += words.len() as u64,
                    Sram::Bias => c.bias += words.len() as u64,
                }
            }
            LoadDst::Map(v) => {
                let cols = v.cols();
                for (i, &w) in words.iter().enumerate() {
                    self.wr(&v, i as u32 / cols, i as u32 % cols, w);
                }
            }
        }
    }

    // ---- datapath ----

    /// Output channel pair × position × tap × 8-channel group, one per cycle.
    /// Block `b` computes output channel `2·pair + b`; both blocks share the
    /// activation operands.
    fn conv_cycle(&mut self, e: &mut ConvExec, act: &mut Activity) -> bool {
        let fmt = self.fmt;
        let s = e.shape;
        let groups = s.cin.div_ceil(LANES as u32);
        let pos = e.geom.src(e.p as usize, e.t as usize);
        let mut xs = [0u16; LANES];
        let (mut valid, mut live) = (0u8, 0u8);
        for l in 0..LANES as u32 {
            let c = e.cg * LANES as u32 + l;
            if c >= s.cin {
                break;
            }
            valid |= 1 << l;
            if let Some(i) = pos {
                let x = self.rd(&e.src, c, i as u32);
                xs[l as usize] = x;
                if !(e.zero_skip && fmt.is_zero(x)) {
                    live |= 1 << l;
                }
            }
        }
        self.state.reg_buffers[0][..LANES].copy_from_slice(&xs);
        let first = e.t == 0 && e.cg == 0;
        let last = e.t + 1 == s.k && e.cg + 1 == groups;
        for b in 0..BLOCKS as u32 {
            let o = 2 * e.pair + b;
            let cell = b as usize * LANES;
            if o >= s.cout {
                self.state.pe[b as usize] = Default::default();
                continue;
            }
            if first {
                let mut acc = ExtAcc::new();
                let bias = self.rd_param(&e.bias, o);
                acc.add_code(fmt, bias);
                if e.accumulate {
                    let ad = self.rd(&e.dst, o, e.p);
                    acc.add_code(fmt, ad);
                }
                self.state.acc[cell] = acc;
            }
            let mut prods = [ExtendedProduct::ZERO; LANES];
            for l in 0..LANES as u32 {
                if valid & (1 << l) == 0 {
                    break;
                }
                if live & (1 << l) != 0 {
                    let c = e.cg * LANES as u32 + l;
                    let w = self.rd_param(&e.weights, (o * s.cin + c) * s.k + e.t);
                    self.state.reg_buffers[1 + b as usize][l as usize] = w;
                    prods[l as usize] = mul_codes(fmt, w, xs[l as usize]);
                    act.issued += 1;
                } else {
                    act.skipped += 1;
                }
            }
            for p in prods {
                self.state.acc[cell].add_product(p);
            }
            self.state.pe[b as usize] = super::state::PeBlock { mode: PeMode::MulAcc, active: valid, skip: valid & !live };
            if last {
                let acc = std::mem::take(&mut self.state.acc[cell]);
                let mut v = self.fin(&acc);
                if e.relu {
                    v = fmt.relu(v);
                }
                self.wr(&e.dst, o, e.p, v);
            }
        }
        act.progress = true;
        e.cg += 1;
        if e.cg < groups {
            return false;
        }
        e.cg = 0;
        e.t += 1;
        if e.t < s.k {
            return false;
        }
        e.t = 0;
        e.p += 1;
        if e.p < s.out_len {
            return false;
        }
        e.p = 0;
        e.pair += 1;
        e.pair >= s.cout.div_ceil(2)
    }

    /// `out(y, x) = Σ_j a(x, j)·b(y, j)`: block `b` broadcasts `a(2·xp + b, j)`
    /// to its 8 cells, which hold `b(8·yg + l, j)`; partial sums stay in the
    /// cell accumulators until `j` wraps.
    fn mm_cycle(&mut self, e: &mut MmExec, act: &mut Activity) -> bool {
        let fmt = self.fmt;
        let (xn, yn, jn) = (e.a.rows(), e.b.rows(), e.a.cols());
        let (x0, y0) = (2 * e.xp, LANES as u32 * e.yg);
        let xs = x0..(x0 + BLOCKS as u32).min(xn);
        let ys = y0..(y0 + LANES as u32).min(yn);
        act.progress = true;
        if !e.stalled {
            let conflict = xs.clone().any(|x| {
                let ba = e.a.locate(x, e.j).0;
                ys.clone().any(|y| e.b.locate(y, e.j).0 == ba)
            });
            if conflict {
                e.stalled = true;
                self.state.report.stalls_conflict += 1;
                act.stall = Some("bank");
                return false;
            }
        }
        e.stalled = false;
        if e.j == 0 {
            for a in self.state.acc.iter_mut() {
                *a = ExtAcc::new();
            }
        }
        let mut bs = [0u16; LANES];
        for y in ys.clone() {
            bs[(y - y0) as usize] = self.rd(&e.b, y, e.j);
        }
        let valid = ((1u16 << ys.len()) - 1) as u8;
        for bi in 0..BLOCKS as u32 {
            let x = x0 + bi;
            if x >= xn {
                self.state.pe[bi as usize] = Default::default();
                continue;
            }
            let av = self.rd(&e.a, x, e.j);
            let gated = e.zero_skip && fmt.is_zero(av);
            for (l, y) in ys.clone().enumerate() {
                if gated {
                    act.skipped += 1;
                } else {
                    act.issued += 1;
                    self.state.acc[bi as usize * LANES + l].add_product(mul_codes(fmt, av, bs[(y - y0) as usize]));
                }
            }
            let skip = if gated { valid } else { 0 };
            self.state.pe[bi as usize] = super::state::PeBlock { mode: PeMode::MulAcc, active: valid, skip };
        }
        self.state.reg_buffers[1][..LANES].copy_from_slice(&bs);
        if e.j + 1 == jn {
            for x in xs {
                for (l, y) in ys.clone().enumerate() {
                    let acc = std::mem::take(&mut self.state.acc[(x - x0) as usize * LANES + l]);
                    let r = match e.scale {
                        Some(s) => acc.finalize_scaled(fmt, s),
                        None => acc.finalize(fmt),
                    };
                    let v = self.round(r);
                    self.wr(&e.out, y, x, v);
                }
            }
        }
        e.j += 1;
        if e.j < jn {
            return false;
        }
        e.j = 0;
        e.yg += 1;
        if e.yg < yn.div_ceil(LANES as u32) {
            return false;
        }
        e.yg = 0;
        e.xp += 1;
        e.xp >= xn.div_ceil(BLOCKS as u32)
    }

    /// 16 elements of one row per cycle.
    fn elem_cycle(&mut self, e: &mut ElemExec, act: &mut Activity) -> bool {
        let fmt = self.fmt;
        let (rows, cols) = (e.s0.rows(), e.s0.cols());
        let c0 = e.chunk * SWEEP_LANES;
        let n = SWEEP_LANES.min(cols - c0);
        act.progress = true;
        if let (Some(s1), false) = (e.s1, e.stalled) {
            let conflict = (c0..c0 + n).any(|s| e.s0.locate(e.row, s).0 == s1.locate(e.row, s).0);
            if conflict {
                e.stalled = true;
                self.state.report.stalls_conflict += 1;
                act.stall = Some("bank");
                return false;
            }
        }
        e.stalled = false;
        let params = match e.kind {
            ElemKind::Affine { params, .. } => Some((self.rd_param(&params, e.row), self.rd_param(&params, rows + e.row))),
            _ => None,
        };
        let mut skip = 0u16;
        for k in 0..n {
            let s = c0 + k;
            let x = self.rd(&e.s0, e.row, s);
            self.state.reg_buffers[0][k as usize] = x;
            let v = match e.kind {
                ElemKind::Add { copy: true } => x,
                ElemKind::Add { copy: false } => {
                    let y = self.rd(&e.s1.expect("second operand"), e.row, s);
                    let mut acc = ExtAcc::new();
                    acc.add_code(fmt, x);
                    acc.add_code(fmt, y);
                    self.fin(&acc)
                }
                ElemKind::Mul { accumulate } => {
                    let y = self.rd(&e.s1.expect("second operand"), e.row, s);
                    let mut acc = ExtAcc::new();
                    if accumulate {
                        let ad = self.rd(&e.dst, e.row, s);
                        acc.add_code(fmt, ad);
                    }
                    if e.zero_skip && fmt.is_zero(x) {
                        act.skipped += 1;
                        skip |= 1 << k;
                    } else {
                        act.issued += 1;
                        acc.add_product(mul_codes(fmt, x, y));
                    }
                    self.fin(&acc)
                }
                ElemKind::Act(kind) => ActLut::get(kind).apply(fmt, x),
                ElemKind::Affine { relu, .. } => {
                    let (scale, shift) = params.expect("affine parameters");
                    let mut acc = ExtAcc::new();
                    acc.add_product(mul_codes(fmt, x, scale));
                    acc.add_code(fmt, shift);
                    let v = self.fin(&acc);
                    if relu {
                        fmt.relu(v)
                    } else {
                        v
                    }
                }
            };
            self.wr(&e.dst, e.row, s, v);
        }
        let mode = match e.kind {
            ElemKind::Add { copy: true } => PeMode::Bypass,
            ElemKind::Add { .. } => PeMode::EwAdd,
            ElemKind::Mul { .. } => PeMode::EwMul,
            ElemKind::Act(_) => PeMode::Bypass,
            ElemKind::Affine { .. } => PeMode::MulAcc,
        };
        let active = ((1u32 << n) - 1) as u16;
        for b in 0..BLOCKS {
            let sh = b * LANES;
            self.state.pe[b] = super::state::PeBlock { mode, active: (active >> sh) as u8, skip: (skip >> sh) as u8 };
        }
        e.chunk += 1;
        if e.chunk < cols.div_ceil(SWEEP_LANES) {
            return false;
        }
        e.chunk = 0;
        e.row += 1;
        e.row >= rows
    }

    /// One channel of a 16-position chunk per cycle; stats for the chunk
    /// sit in register buffers 3 (mean) and 4 (rstd).
    fn norm_cycle(&mut self, e: &mut NormExec, act: &mut Activity) -> bool {
        let fmt = self.fmt;
        act.progress = true;
        let (c, len) = (e.x.rows(), e.x.cols());
        let chunks = len.div_ceil(SWEEP_LANES);
        if e.chunk >= chunks {
            e.tail -= 1;
            return e.tail == 0;
        }
        let p0 = e.chunk * SWEEP_LANES;
        let n = SWEEP_LANES.min(len - p0);
        let (first, last) = (e.ch == 0, e.ch + 1 == c);
        if first {
            for a in self.state.acc.iter_mut() {
                *a = ExtAcc::new();
            }
            if e.pass != NormPass::Mean {
                for k in 0..n {
                    self.state.reg_buffers[3][k as usize] = self.rd(&e.stats, 0, p0 + k);
                    if e.pass == NormPass::Normalize {
                        self.state.reg_buffers[4][k as usize] = self.rd(&e.stats, 1, p0 + k);
                    }
                }
            }
        }
        let gb = match e.pass {
            NormPass::Normalize => Some((self.rd_param(&e.params, e.ch), self.rd_param(&e.params, c + e.ch))),
            _ => None,
        };
        for k in 0..n {
            let p = p0 + k;
            let x = self.rd(&e.x, e.ch, p);
            let ku = k as usize;
            let dev = |m: &mut Self| {
                let mut d = ExtAcc::new();
                d.add_code(fmt, x);
                d.sub_code(fmt, m.state.reg_buffers[3][ku]);
                m.fin(&d)
            };
            match e.pass {
                NormPass::Mean => {
                    self.state.acc[ku].add_code(fmt, x);
                    if last {
                        let acc = std::mem::take(&mut self.state.acc[ku]);
                        let r = acc.finalize_scaled(fmt, e.inv_c);
                        let v = self.round(r);
                        self.wr(&e.stats, 0, p, v);
                    }
                }
                NormPass::Var => {
                    let d = dev(self);
                    self.state.acc[ku].add_product(mul_codes(fmt, d, d));
                    if last {
                        let acc = std::mem::take(&mut self.state.acc[ku]);
                        let r = acc.finalize_scaled(fmt, e.inv_c);
                        let var = self.round(r);
                        self.wr(&e.stats, 1, p, rsqrt_code(fmt, var));
                    }
                }
                NormPass::Normalize => {
                    let (gamma, beta) = gb.expect("normalize parameters");
                    let d = dev(self);
                    let mut a = ExtAcc::new();
                    a.add_product(mul_codes(fmt, d, self.state.reg_buffers[4][ku]));
                    let nv = self.fin(&a);
                    let mut y = ExtAcc::new();
                    y.add_product(mul_codes(fmt, nv, gamma));
                    y.add_code(fmt, beta);
                    let v = self.fin(&y);
                    self.wr(&e.x, e.ch, p, v);
                }
            }
        }
        let active = ((1u32 << n) - 1) as u16;
        for b in 0..BLOCKS {
            self.state.pe[b] = super::state::PeBlock { mode: PeMode::MulAcc, active: (active >> (b * LANES)) as u8, skip: 0 };
        }
        e.ch += 1;
        if e.ch < c {
            return false;
        }
        e.ch = 0;
        e.chunk += 1;
        if e.chunk < chunks {
            return false;
        }
        if e.pass == NormPass::Var && RSQRT_LATENCY > 0 {
            e.tail = RSQRT_LATENCY;
            return false;
        }
        true
    }
}
