//! The cycle simulator against the quantized golden model.

use std::sync::Arc;

use tftnn_core::isa::{compile, CompileOptions, Program};
use tftnn_core::model::{
    count_ledger, noise_frames, AttentionOrder, GoldenQuant, MacCounter, ModelConfig, NormMode, Weights,
};
use tftnn_core::numerics::Format;
use tftnn_core::sim::{CycleReport, SimEngine};

fn encode(fmt: Format, frame: &[f64]) -> Vec<u16> {
    frame.iter().map(|&x| fmt.encode(x)).collect()
}

struct Run {
    outputs: Vec<Vec<u16>>,
    reports: Vec<CycleReport>,
}

fn simulate(prog: Program, frames: &[Vec<u16>]) -> Run {
    let mut sim = SimEngine::from_program(Arc::new(prog)).unwrap();
    let mut run = Run { outputs: Vec::new(), reports: Vec::new() };
    for f in frames {
        run.outputs.push(sim.step_codes(f).unwrap());
        run.reports.push(sim.last_report.clone().unwrap());
    }
    run
}

/// Runs `frames` frames on both and checks outputs and MAC counters layer by layer.
fn check_against_golden(cfg: &ModelConfig, fmt: Format, frames: usize, seed: u64) -> Run {
    let w = Weights::calibrated(cfg, 3).unwrap();
    let prog = compile(cfg, &w, fmt, &CompileOptions::default()).unwrap();
    let input: Vec<Vec<u16>> = noise_frames(cfg, seed, frames, 0.5).iter().map(|f| encode(fmt, f)).collect();
    let run = simulate(prog, &input);
    let mut gold = GoldenQuant::new(cfg, &w, fmt).unwrap();
    for (i, f) in input.iter().enumerate() {
        gold.macs = MacCounter::default();
        assert_eq!(run.outputs[i], gold.step_codes(f).unwrap(), "frame {i}");
        let r = &run.reports[i];
        for (name, g) in &gold.macs.layers {
            let l = r.layer(name).unwrap_or_else(|| panic!("no layer {name}"));
            assert_eq!(l.macs_issued + l.macs_skipped, g.macs, "{name}");
            assert_eq!(l.macs_skipped, g.zero_operands, "{name}");
        }
        let t = gold.macs.total();
        assert_eq!((r.macs_total(), r.macs_skipped), (t.macs, t.zero_operands));
    }
    run
}

#[test]
fn default_config_is_bit_exact_and_conserves_macs() {
    let cfg = ModelConfig::default();
    let run = check_against_golden(&cfg, Format::FP10, 3, 21);
    let ledger = count_ledger(&cfg).unwrap();
    for r in &run.reports {
        assert_eq!(r.macs_total(), ledger.macs_per_frame);
        assert_eq!(r.cycles_by_layer().iter().map(|(_, c)| c).sum::<u64>(), r.cycles_total);
        assert!(r.cycles_total <= 1_000_000, "{}", r.cycles_total);
        assert!(r.max_macs_per_cycle <= 16);
        assert!(r.macs_skipped > 0);
        assert_eq!(r.partial_sum_writes, 0);
        assert!(!r.barrier_waits.is_empty());
        for b in &r.barrier_waits {
            assert_eq!(b.stall, b.beats.saturating_sub(b.window), "{b:?}");
        }
        // prefetches hidden behind compute never stall
        assert!(r.barrier_waits.iter().any(|b| b.beats <= b.window && b.stall == 0));
        assert_eq!(r.barrier_waits.iter().map(|b| b.stall).sum::<u64>(), r.stalls_dma);
    }
}

#[test]
fn other_configs_and_formats_are_bit_exact() {
    let base = ModelConfig::default();
    check_against_golden(&ModelConfig { attention_order: AttentionOrder::Direct, ..base.clone() }, Format::FP10, 1, 5);
    check_against_golden(&ModelConfig { norm: NormMode::Ln, ..base.clone() }, Format::FP10, 1, 6);
    check_against_golden(&ModelConfig { fold_bn: false, ..base.clone() }, Format::FP10, 1, 7);
    check_against_golden(&base, Format::FP8, 1, 8);
    check_against_golden(&base, Format::FP9, 1, 9);
}

#[test]
fn zero_skip_off_changes_no_output_bit() {
    let cfg = ModelConfig::default();
    let fmt = Format::FP10;
    let w = Weights::calibrated(&cfg, 4).unwrap();
    let input: Vec<Vec<u16>> = noise_frames(&cfg, 30, 2, 0.5).iter().map(|f| encode(fmt, f)).collect();
    let on = simulate(compile(&cfg, &w, fmt, &CompileOptions { zero_skip: true }).unwrap(), &input);
    let off = simulate(compile(&cfg, &w, fmt, &CompileOptions { zero_skip: false }).unwrap(), &input);
    assert_eq!(on.outputs, off.outputs);
    for (a, b) in on.reports.iter().zip(&off.reports) {
        assert_eq!(a.macs_total(), b.macs_total());
        assert!(a.macs_skipped > b.macs_skipped);
        assert_eq!(a.cycles_total, b.cycles_total);
    }
}

#[test]
fn serialized_program_runs_identically() {
    let cfg = ModelConfig::default();
    let fmt = Format::FP10;
    let w = Weights::calibrated(&cfg, 3).unwrap();
    let prog = compile(&cfg, &w, fmt, &CompileOptions::default()).unwrap();
    let mut bytes = Vec::new();
    prog.write_to(&mut bytes).unwrap();
    let back = Program::read_from(bytes.as_slice()).unwrap();
    let input = vec![encode(fmt, &noise_frames(&cfg, 2, 1, 0.5)[0])];
    let a = simulate(prog, &input);
    let b = simulate(back, &input);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.reports, b.reports);
}
