use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::isa::{
    Alloc, ConvShape, Descriptor, ExtRef, Flags, MapView, MicroOp, NormPass, OpKind, Program, ProgramMeta, Region, Sram, Stream,
};
use crate::model::{conv, layer_norm, Conv, ConvGeom, LayerMacs, QuantArith, Tensor};
use crate::numerics::{Format, ExtAcc};

const FMT: Format = Format::FP10;

fn rflags(zero_skip: bool) -> Flags {
    Flags { zero_skip, finalize_round: true, ..Flags::default() }
}

fn codes(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, zero_frac: f64) -> Vec<u16> {
    (0..n).map(|_| if rng.gen_bool(zero_frac) { 0 } else { FMT.encode(rng.gen_range(lo..hi)) }).collect()
}

fn empty_program(ops: Vec<MicroOp>) -> Program {
    Program {
        meta: ProgramMeta { format: FMT.to_string(), model_hash: String::new(), config: String::new(), weight_groups: 0 },
        descriptors: Vec::new(),
        ops,
        layers: Vec::new(),
        groups: Vec::new(),
        image: Vec::new(),
    }
}

struct ConvCase {
    x: Alloc,
    y: Alloc,
    xs: Vec<u16>,
    conv: Conv<u16>,
    prog: Program,
}

/// `cin -> cout`, kernel `k`, "same" padding, `len` positions.
fn conv_case(cin: usize, cout: usize, k: usize, len: usize, zero_frac: f64, zero_skip: bool, seed: u64) -> ConvCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = ConvGeom::same(cin, k, 1, len);
    let geom = ConvGeom { cout, ..geom };
    let w = codes(&mut rng, cout * cin * k, -1.0, 1.0, 0.0);
    let b = codes(&mut rng, cout, -0.5, 0.5, 0.0);
    let xs = codes(&mut rng, cin * len, -2.0, 2.0, zero_frac);
    let x = Alloc { offset: 0, nbanks: 8, base: 0, channels: cin as u32, len: len as u32 };
    let y = Alloc { offset: 4, nbanks: 8, base: x.words_per_bank(), channels: cout as u32, len: len as u32 };
    let shape = ConvShape::from(geom);
    let weights = Region { sram: Sram::Weight, half: 0, base: 0, count: w.len() as u32 };
    let bias = Region { sram: Sram::Bias, half: 0, base: 0, count: cout as u32 };
    let descs = vec![Descriptor::Map(x.view()), Descriptor::Conv { shape, weights, bias, relu: false }, Descriptor::Map(y.view())];
    let op = MicroOp { kind: OpKind::ConvFlow, flags: rflags(zero_skip), lanes: 16, src0: 1, src1: 2, dst: 3 };
    let prog = kernel_program(FMT, descs, vec![op], &w, &b).unwrap();
    ConvCase { x, y, xs, conv: Conv { geom, w, b, post: None, relu: false }, prog }
}

fn kernel(m: &Machine) -> LayerCounters {
    m.state.report.layer(KERNEL_LAYER).unwrap().clone()
}

/// Zero or padding activation operands, counted tap by tap.
fn zero_operand_count(c: &ConvCase) -> u64 {
    let g = c.conv.geom;
    let mut n = 0;
    for _o in 0..g.cout {
        for p in 0..g.out_len {
            for t in 0..g.k {
                let vi = p as isize + t as isize - g.pad as isize;
                for ch in 0..g.cin {
                    if vi < 0 || vi >= g.in_len as isize || FMT.is_zero(c.xs[ch * g.in_len + vi as usize]) {
                        n += 1;
                    }
                }
            }
        }
    }
    n
}

#[test]
fn empty_program_runs_zero_cycles() {
    let mut m = Machine::new(Arc::new(empty_program(Vec::new()))).unwrap();
    let (out, r) = m.run_program(&[]).unwrap();
    assert!(out.is_empty());
    assert_eq!(r, CycleReport::with_layers(&[IO_LAYER.into()]));
    assert_eq!(r.cycles_total, 0);
}

#[test]
fn barrier_step_advances_one_cycle_only() {
    let mut m = Machine::new(Arc::new(empty_program(vec![MicroOp::barrier(), MicroOp::barrier()]))).unwrap();
    m.begin_frame(&[]).unwrap();
    let before = m.state.clone();
    assert!(m.step().unwrap());
    let mut want = before;
    want.cycle += 1;
    want.pc += 1;
    want.report.cycles_total += 1;
    want.report.layers[0].cycles += 1;
    assert_eq!(m.state, want);
}

#[test]
fn conv_8x8_k5_h128() {
    let c = conv_case(8, 8, 5, 128, 0.0, true, 1);
    let m = run_kernel(c.prog.clone(), &[(c.x, c.xs.clone())]).unwrap();
    let k = kernel(&m);
    assert_eq!(k.macs_issued + k.macs_skipped, 8 * 8 * 5 * 128);
    // 4 output-channel pairs x 128 positions x 5 taps x 1 channel group
    assert_eq!(k.cycles, 4 * 128 * 5);
    assert_eq!(k.macs_skipped, zero_operand_count(&c));
    assert!(m.state.report.max_macs_per_cycle <= 16);
}

#[test]
fn conv_matches_golden_kernel() {
    for (cin, cout, k, zf) in [(8, 8, 5, 0.3), (13, 7, 3, 0.5), (1, 5, 1, 0.0), (20, 3, 5, 0.9)] {
        let c = conv_case(cin, cout, k, 37, zf, true, cin as u64);
        let m = run_kernel(c.prog.clone(), &[(c.x, c.xs.clone())]).unwrap();
        let a = QuantArith::new(FMT);
        let mut cnt = LayerMacs::default();
        let want = conv(&a, &Tensor::from_vec(cin, 37, c.xs.clone()), &c.conv, None, &mut cnt);
        assert_eq!(m.read_map(&c.y.view()), want.data);
        let kc = kernel(&m);
        assert_eq!(kc.macs_skipped, cnt.zero_operands);
        assert_eq!(kc.macs_skipped, zero_operand_count(&c));
        assert_eq!(kc.cycles, (cout.div_ceil(2) * 37 * k * cin.div_ceil(8)) as u64);
    }
}

#[test]
fn zero_skip_changes_counters_only() {
    let on = conv_case(16, 6, 5, 64, 0.4, true, 5);
    let off = conv_case(16, 6, 5, 64, 0.4, false, 5);
    let mon = run_kernel(on.prog.clone(), &[(on.x, on.xs.clone())]).unwrap();
    let moff = run_kernel(off.prog.clone(), &[(off.x, off.xs.clone())]).unwrap();
    assert_eq!(mon.read_map(&on.y.view()), moff.read_map(&off.y.view()));
    let (kon, koff) = (kernel(&mon), kernel(&moff));
    assert_eq!(kon.cycles, koff.cycles);
    assert_eq!(kon.macs_skipped, zero_operand_count(&on));
    // without gating only padding taps are skipped: 2+1 taps at each edge
    assert_eq!(koff.macs_skipped, 6 * 16 * 6);
}

#[test]
fn all_zero_activations_skip_every_lane() {
    let mut c = conv_case(8, 2, 1, 16, 0.0, true, 9);
    c.xs.iter_mut().for_each(|x| *x = 0);
    let m = run_kernel(c.prog.clone(), &[(c.x, c.xs.clone())]).unwrap();
    let k = kernel(&m);
    assert_eq!((k.macs_issued, k.macs_skipped), (0, 2 * 8 * 16));
    // the output is the bias alone
    let want: Vec<u16> = (0..2).flat_map(|o| vec![c.conv.b[o]; 16]).collect();
    assert_eq!(m.read_map(&c.y.view()), want);
}

/// `out(y, x) = Σ_j a(x, j) b(y, j)` with A and B placed by the caller.
fn mm_case(xn: u32, yn: u32, jn: u32, a: Alloc, b: Alloc, seed: u64) -> (Machine, Vec<u16>, Vec<u16>, Alloc) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let av = codes(&mut rng, (xn * jn) as usize, 0.5, 2.0, 0.25);
    let bv = codes(&mut rng, (yn * jn) as usize, 0.5, 2.0, 0.0);
    let out = Alloc { offset: 0, nbanks: 8, base: 1000, channels: yn, len: xn };
    let descs = vec![Descriptor::Map(a.view()), Descriptor::Map(b.view()), Descriptor::Scaled { out: out.view(), scale: None }];
    let op = MicroOp { kind: OpKind::MmFlow, flags: rflags(true), lanes: 16, src0: 1, src1: 2, dst: 3 };
    let prog = kernel_program(FMT, descs, vec![op], &[], &[]).unwrap();
    let m = run_kernel(prog, &[(a, av.clone()), (b, bv.clone())]).unwrap();
    (m, av, bv, out)
}

#[test]
fn mm_8x8x8_takes_32_cycles_and_matches_f64() {
    let a = Alloc { offset: 0, nbanks: 4, base: 0, channels: 8, len: 8 };
    let b = Alloc { offset: 4, nbanks: 4, base: 0, channels: 8, len: 8 };
    let (m, av, bv, out) = mm_case(8, 8, 8, a, b, 3);
    let k = kernel(&m);
    assert_eq!(k.cycles, 32);
    assert_eq!(k.macs_issued + k.macs_skipped, 512);
    assert_eq!(k.macs_skipped, 8 * av.iter().filter(|&&x| x == 0).count() as u64);
    let r = &m.state.report;
    assert_eq!(r.partial_sum_writes, 0);
    assert_eq!(r.sram_writes.data, 64);
    assert_eq!(r.stalls_conflict, 0);
    let got = m.read_map(&out.view());
    for y in 0..8 {
        for x in 0..8 {
            // products of codes in [0.5, 2) and their sums of 8 are exact in f64
            let s: f64 = (0..8).map(|j| FMT.decode(av[x * 8 + j]) * FMT.decode(bv[y * 8 + j])).sum();
            assert_eq!(got[y * 8 + x], FMT.encode(s), "({y}, {x})");
        }
    }
}

#[test]
fn same_bank_operands_stall_once_per_cycle() {
    let a = Alloc { offset: 2, nbanks: 1, base: 0, channels: 4, len: 8 };
    let b = Alloc { offset: 2, nbanks: 1, base: 100, channels: 8, len: 8 };
    let (m, ..) = mm_case(4, 8, 8, a, b, 4);
    let k = kernel(&m);
    let base = 2 * 1 * 8;
    assert_eq!(m.state.report.stalls_conflict, base);
    assert_eq!(k.cycles, 2 * base);
}

fn ln_case(c: usize, len: usize) -> (Program, Alloc, Vec<u16>, Vec<u16>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
    let xs = codes(&mut rng, c * len, -2.0, 2.0, 0.1);
    let gamma = codes(&mut rng, c, 0.5, 1.5, 0.0);
    let beta = codes(&mut rng, c, -0.5, 0.5, 0.0);
    let x = Alloc { offset: 0, nbanks: 8, base: 0, channels: c as u32, len: len as u32 };
    let stats = Alloc { offset: 3, nbanks: 8, base: x.words_per_bank(), channels: 2, len: len as u32 };
    let inv = Region { sram: Sram::Bias, half: 0, base: 0, count: 1 };
    let params = Region { sram: Sram::Bias, half: 0, base: 1, count: 2 * c as u32 };
    let none = Region { count: 0, ..inv };
    let norm = |pass, params| Descriptor::Norm { pass, stats: stats.view(), params, inv_c: inv };
    let descs = vec![Descriptor::Map(x.view()), norm(NormPass::Mean, none), norm(NormPass::Var, none), norm(NormPass::Normalize, params)];
    let pass = |src1, dst| MicroOp { kind: OpKind::NormPass, flags: rflags(false), lanes: 16, src0: 1, src1, dst };
    let bias = [vec![FMT.encode(1.0 / c as f64)], gamma.clone(), beta.clone()].concat();
    let prog = kernel_program(FMT, descs, vec![pass(2, 0), pass(3, 0), pass(4, 1)], &[], &bias).unwrap();
    (prog, x, xs, gamma, beta)
}

#[test]
fn layer_norm_matches_golden_and_sweep_arithmetic() {
    for (c, len) in [(16, 128), (5, 37), (1, 128)] {
        let (prog, x, xs, gamma, beta) = ln_case(c, len);
        let m = run_kernel(prog, &[(x, xs.clone())]).unwrap();
        let a = QuantArith::new(FMT);
        let want = layer_norm(&a, &Tensor::from_vec(c, len, xs), &gamma, &beta, FMT.encode(1.0 / c as f64));
        assert_eq!(m.read_map(&x.view()), want.data);
        let sweep = (c * len.div_ceil(16)) as u64;
        assert_eq!(kernel(&m).cycles, 3 * sweep + RSQRT_LATENCY as u64);
        assert_eq!(m.state.report.norm_passes, 3);
    }
}

#[test]
fn norm_mode_cycles() {
    let (ln, bn) = norm_mode_compare(1, 128, BnMode::Unfolded, FMT).unwrap();
    assert_eq!((ln, bn), (3 * 8 + RSQRT_LATENCY as u64, 8));
    let (ln, bn) = norm_mode_compare(16, 128, BnMode::Unfolded, FMT).unwrap();
    assert_eq!(bn, 16 * 8);
    let r = ln as f64 / bn as f64;
    assert!((2.7..=3.3).contains(&r), "{r}");
    assert_eq!(norm_mode_compare(16, 128, BnMode::Folded, FMT).unwrap().1, 0);
}

#[test]
fn stepping_is_deterministic_and_prefix_equivalent() {
    let c = conv_case(9, 5, 3, 20, 0.3, true, 11);
    let mut a = Machine::new(Arc::new(c.prog.clone())).unwrap();
    a.write_map(&c.x.view(), &c.xs).unwrap();
    let mut b = a.clone();
    a.begin_frame(&[]).unwrap();
    b.begin_frame(&[]).unwrap();
    for n in [0u64, 1, 2, 7, 40, 100] {
        let mut s = a.clone();
        for _ in 0..n {
            s.step().unwrap();
        }
        let mut r = a.clone();
        assert_eq!(r.run_cycles(n).unwrap(), n);
        assert_eq!(s.state, r.state);
    }
    a.run_to_end().unwrap();
    let mut steps = 0;
    while b.step().unwrap() {
        steps += 1;
    }
    assert_eq!(a.state, b.state);
    assert_eq!(steps, a.state.report.cycles_total);
}

#[test]
fn dma_beats() {
    let mut m = Machine::new(Arc::new(empty_program(vec![MicroOp::barrier()]))).unwrap();
    m.begin_frame(&[]).unwrap();
    let r = Region { sram: Sram::Weight, half: 1, base: 0, count: 8 };
    assert_eq!(m.load_stream(&[FMT.encode(1.0); 8], r).unwrap(), 1);
    assert_eq!(m.load_stream(&[FMT.encode(2.0); 100], Region { count: 100, base: 8, ..r }).unwrap(), 13);
    m.run_to_end().unwrap();
    let rep = &m.state.report;
    assert_eq!(rep.dma_beats_in, 14);
    // the barrier waits for all 14 beats, then retires
    assert_eq!(rep.stalls_dma, 14);
    assert_eq!(rep.cycles_total, 15);
    assert_eq!(rep.sram_writes.weight, 108);
    let big = Region { sram: Sram::Bias, half: 0, base: 0, count: 5000 };
    assert!(matches!(m.load_stream(&vec![0; 5000], big), Err(SimError::Capacity(_))));
}

#[test]
fn loads_into_a_compute_owned_half_fail() {
    let c = conv_case(4, 2, 1, 8, 0.0, true, 2);
    let mut p = c.prog.clone();
    p.ops.push(MicroOp::barrier());
    let mut m = Machine::new(Arc::new(p)).unwrap();
    m.begin_frame(&[]).unwrap();
    while m.state.pc < 4 {
        m.step().unwrap();
    }
    let r = Region { sram: Sram::Weight, half: 0, base: 0, count: 8 };
    assert!(matches!(m.load_stream(&[0; 8], r), Err(SimError::Ownership { half: 0, .. })));
    m.load_stream(&[0; 8], Region { half: 1, ..r }).unwrap();
    m.run_to_end().unwrap();
    // the barrier hands the half back
    m.load_stream(&[0; 8], r).unwrap();
}

#[test]
fn reading_a_region_with_a_load_in_flight_faults() {
    let c = conv_case(16, 8, 5, 8, 0.0, true, 2);
    let mut p = c.prog.clone();
    let bar = p.ops.iter().position(|o| o.kind == OpKind::Barrier).unwrap();
    p.ops.remove(bar);
    p.layers[0].start -= 1;
    p.layers[0].end -= 1;
    let mut m = Machine::new(Arc::new(p)).unwrap();
    assert!(matches!(m.run_program(&[]), Err(SimError::Hazard { .. })));
}

#[test]
fn missing_input_is_a_deadlock() {
    let y = Alloc { offset: 0, nbanks: 1, base: 0, channels: 1, len: 4 };
    let mut p = empty_program(Vec::new());
    let s = p.push_desc(Descriptor::Ext(ExtRef { stream: Stream::Input, count: 4 })).unwrap();
    let d = p.push_desc(Descriptor::Map(y.view())).unwrap();
    p.ops = vec![MicroOp { kind: OpKind::DmaLoad, flags: Flags::default(), lanes: 0, src0: s, src1: 0, dst: d }, MicroOp::barrier()];
    let mut m = Machine::new(Arc::new(p)).unwrap();
    assert!(matches!(m.begin_frame(&[1, 2]), Err(SimError::Input(_))));
    m.begin_frame(&[1, 2, 3, 4]).unwrap();
    m.state.input = None;
    assert!(matches!(m.run_to_end(), Err(SimError::Deadlock { .. })));
    let mut m = Machine::new(m.program().clone()).unwrap();
    m.run_program(&[1, 2, 3, 4]).unwrap();
    assert_eq!(m.read_map(&y.view()), vec![1, 2, 3, 4]);
}

#[test]
fn trace_has_one_line_per_cycle() {
    let c = conv_case(8, 2, 1, 4, 0.0, true, 6);
    let mut m = Machine::new(Arc::new(c.prog)).unwrap();
    m.set_trace(true);
    let (_, r) = m.run_program(&[]).unwrap();
    let t = m.take_trace();
    assert_eq!(t.len() as u64, r.cycles_total);
    assert!(t.iter().any(|l| l.contains("CONV_FLOW") && l.contains("layer=kernel")));
}

#[test]
fn ew_views_negate_and_copy() {
    let a = Alloc { offset: 0, nbanks: 8, base: 0, channels: 3, len: 20 };
    let b = Alloc { offset: 4, nbanks: 8, base: 0, channels: 3, len: 20 };
    let d = Alloc { offset: 0, nbanks: 8, base: 100, channels: 3, len: 20 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (av, bv) = (codes(&mut rng, 60, -2.0, 2.0, 0.2), codes(&mut rng, 60, -2.0, 2.0, 0.2));
    let descs: Vec<Descriptor> = [a.view(), b.view().negated(), d.view()].map(Descriptor::Map).into();
    let sub = MicroOp { kind: OpKind::EwAdd, flags: rflags(false), lanes: 16, src0: 1, src1: 2, dst: 3 };
    let copy = MicroOp { kind: OpKind::EwAdd, flags: Flags::default(), lanes: 16, src0: 3, src1: 0, dst: 1 };
    let prog = kernel_program(FMT, descs, vec![sub, copy], &[], &[]).unwrap();
    let m = run_kernel(prog, &[(a, av.clone()), (b, bv.clone())]).unwrap();
    let want: Vec<u16> = av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| {
            let mut acc = ExtAcc::new();
            acc.add_code(FMT, x);
            acc.sub_code(FMT, y);
            acc.finalize(FMT).bits
        })
        .collect();
    assert_eq!(m.read_map(&d.view()), want);
    assert_eq!(m.read_map(&a.view()), want);
    // 3 rows x 2 chunks per op
    assert_eq!(kernel(&m).cycles, 12);
}

#[test]
fn views_are_consistent() {
    let v: MapView = Alloc { offset: 1, nbanks: 2, base: 0, channels: 4, len: 3 }.view();
    assert_eq!(v.transposed().locate(2, 3), v.locate(3, 2));
}
