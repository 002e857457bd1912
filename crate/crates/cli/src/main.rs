//! `tftnn`: enhance audio through the golden models or the simulator, compare
//! two runs, and print the parameter/MAC ledger.
//!
//! Exit status: 0 ok, 1 tolerance failure, 2 I/O or config error.

mod audio;
mod run;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tftnn_core::model::{count_ledger, snr, AttentionOrder, ModelConfig, NormMode, Weights};
use tftnn_core::numerics::Format;

use run::{EngineKind, RunOutput, RunSpec, WeightSource};

/// Real-time frame budget of the accelerator in cycles.
const CYCLE_BUDGET: u64 = 1_000_000;
/// Agreement bound between the two attention orders in full precision.
const ORDER_TOLERANCE: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "tftnn", version, about = "Streaming speech-enhancement golden model and accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance an 8 kHz mono PCM16 WAV file.
    Enhance(EnhanceArgs),
    /// Enhance on the simulator and write the cycle report.
    Simulate(EnhanceArgs),
    /// Print parameters and MACs per block with the reference targets.
    Ledger(ModelArgs),
    /// Run two specs on one input and check they agree.
    Compare(CompareArgs),
    /// Write seeded, calibrated random weights to a file.
    InitWeights(InitArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Normalization in the transformer blocks; overrides the config.
    #[arg(long)]
    norm: Option<NormMode>,
    /// Attention multiplication order; overrides the config.
    #[arg(long)]
    attention: Option<AttentionOrder>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                ModelConfig::parse(&text).with_context(|| format!("bad config {}", p.display()))?
            }
            None => ModelConfig::default(),
        };
        if let Some(n) = self.norm {
            cfg.norm = n;
        }
        if let Some(o) = self.attention {
            cfg.attention_order = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct WeightArgs {
    /// Weights file; seeded calibrated random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for the random weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl WeightArgs {
    fn source(&self) -> WeightSource<'_> {
        match &self.weights {
            Some(p) => WeightSource::File(p),
            None => WeightSource::Calibrated(self.seed),
        }
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long, value_enum, default_value_t = EngineKind::GoldenQuant)]
    engine: EngineKind,
    /// Number format, e.g. `fp10` or `fp:1:5:4`.
    #[arg(long, default_value = "fp10")]
    format: Format,
    /// Turn off zero-skip data gating in the simulator.
    #[arg(long)]
    no_zero_skip: bool,
    /// Cycle report path; `.csv` writes the per-layer table, anything else text.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long, value_enum, default_value_t = EngineKind::Sim)]
    engine_a: EngineKind,
    #[arg(long, value_enum, default_value_t = EngineKind::GoldenQuant)]
    engine_b: EngineKind,
    #[arg(long, default_value = "fp10")]
    format_a: Format,
    #[arg(long, default_value = "fp10")]
    format_b: Format,
    #[arg(long)]
    norm_a: Option<NormMode>,
    #[arg(long)]
    norm_b: Option<NormMode>,
    #[arg(long)]
    attention_a: Option<AttentionOrder>,
    #[arg(long)]
    attention_b: Option<AttentionOrder>,
    /// Largest allowed absolute sample difference. Without it, identical
    /// quantized specs must agree bit for bit, full-precision runs that differ
    /// only in attention order within 1e-8, and anything else is report-only.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store codes of this format instead of 32-bit floats.
    #[arg(long)]
    format: Option<Format>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Enhance(a) => enhance(&a, false),
        Command::Simulate(a) => enhance(&a, true),
        Command::Ledger(a) => ledger(&a),
        Command::Compare(a) => compare(&a),
        Command::InitWeights(a) => init_weights(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_input(cfg: &ModelConfig, path: &Path) -> Result<Vec<f64>> {
    audio::read_wav(path, cfg.sample_rate as u32)
}

fn print_frames(cfg: &ModelConfig, len: usize, out: &RunOutput) {
    let full = len / cfg.hop;
    let tail = usize::from(len % cfg.hop != 0);
    let flush = out.frames - full - tail;
    println!("frames: {} ({full} full hops, {tail} padded tail hop, {flush} flush hops)", out.frames);
    println!("frames/s: {:.1}", out.frames as f64 / out.seconds.max(1e-9));
    if let Some((mean, max)) = out.cycles_per_frame() {
        println!("cycles/frame: mean {mean:.1} max {max} (budget {CYCLE_BUDGET})");
    }
}

fn report_text(out: &RunOutput, total: &tftnn_core::sim::CycleReport) -> String {
    let (mean, max) = out.cycles_per_frame().unwrap_or_default();
    format!("frames: {}\ncycles_per_frame_mean: {mean:.1}\ncycles_per_frame_max: {max}\n{}", out.reports.len(), total.to_text())
}

fn enhance(a: &EnhanceArgs, simulate: bool) -> Result<bool> {
    let cfg = a.model.load()?;
    let spec = RunSpec {
        engine: if simulate { EngineKind::Sim } else { a.engine },
        format: a.format,
        norm: cfg.norm,
        order: cfg.attention_order,
        zero_skip: !a.no_zero_skip,
    };
    let x = read_input(&cfg, &a.input)?;
    let out = run::run(&cfg, &a.weights.source(), &spec, &x)?;
    audio::write_wav(&a.output, &out.samples, cfg.sample_rate as u32)?;
    println!("{}", spec.describe());
    print_frames(&cfg, x.len(), &out);
    let total = out.total_report();
    match (&a.report, &total) {
        (Some(p), Some(t)) => {
            let body = if p.extension().is_some_and(|e| e == "csv") { t.to_csv() } else { report_text(&out, t) };
            fs::write(p, body).with_context(|| format!("cannot write {}", p.display()))?;
        }
        (Some(_), None) => eprintln!("note: cycle reports exist only for the sim engine"),
        (None, Some(t)) if simulate => print!("{}", report_text(&out, t)),
        _ => {}
    }
    Ok(true)
}

fn ledger(a: &ModelArgs) -> Result<bool> {
    let cfg = a.load()?;
    let l = count_ledger(&cfg)?;
    println!("config: norm={} attention={} fold_bn={}\n", cfg.norm, cfg.attention_order, cfg.fold_bn);
    print!("{}", l.to_text());
    Ok(true)
}

fn default_tolerance(a: &RunSpec, b: &RunSpec) -> Option<f64> {
    let quantized = |s: &RunSpec| s.engine != EngineKind::GoldenFp32;
    let same_model = a.norm == b.norm && a.order == b.order;
    if a == b || (quantized(a) && quantized(b) && a.format == b.format && same_model) {
        Some(0.0)
    } else if a.engine == EngineKind::GoldenFp32 && b.engine == EngineKind::GoldenFp32 && a.norm == b.norm {
        Some(ORDER_TOLERANCE)
    } else {
        None
    }
}

fn compare(a: &CompareArgs) -> Result<bool> {
    let cfg = a.model.load()?;
    let spec = |engine, format, norm: Option<NormMode>, order: Option<AttentionOrder>| RunSpec {
        engine,
        format,
        norm: norm.unwrap_or(cfg.norm),
        order: order.unwrap_or(cfg.attention_order),
        zero_skip: true,
    };
    let sa = spec(a.engine_a, a.format_a, a.norm_a, a.attention_a);
    let sb = spec(a.engine_b, a.format_b, a.norm_b, a.attention_b);
    let x = read_input(&cfg, &a.input)?;
    let src = a.weights.source();
    let (ra, rb) = (run::run(&cfg, &src, &sa, &x)?, run::run(&cfg, &src, &sb, &x)?);
    anyhow::ensure!(ra.samples.len() == rb.samples.len(), "outputs differ in length");

    println!("A: {}", sa.describe());
    println!("B: {}", sb.describe());
    let differing = ra.samples.iter().zip(&rb.samples).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    let max_diff = ra.samples.iter().zip(&rb.samples).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    println!("max abs sample difference: {max_diff:.3e} ({differing} of {} samples differ)", ra.samples.len());
    match snr(&rb.samples, &ra.samples) {
        Ok(db) => println!("SNR of B against A: {db:.2} dB"),
        Err(_) => println!("SNR of B against A: n/a (A is silent)"),
    }
    let (att_a, att_b) = (ra.macs_matching(".attn"), rb.macs_matching(".attn"));
    if att_a > 0 && att_b > 0 {
        let ratio = att_a.max(att_b) as f64 / att_a.min(att_b) as f64;
        println!("attention MACs: A {att_a}, B {att_b}, larger/smaller {ratio:.2}");
    }
    if let (Some((ca, _)), Some((cb, _))) = (ra.cycles_per_frame(), rb.cycles_per_frame()) {
        println!("cycles/frame: A {ca:.1}, B {cb:.1}, delta {:+.1}", cb - ca);
        let norm_cycles = |r: &RunOutput| -> u64 {
            r.reports.iter().flat_map(|t| &t.layers).filter(|l| l.name.contains("addnorm")).map(|l| l.cycles).sum()
        };
        let (na, nb) = (norm_cycles(&ra), norm_cycles(&rb));
        if nb > 0 {
            println!("add+norm layer cycles: A {na}, B {nb}, ratio {:.3}", na as f64 / nb as f64);
        }
    }
    let pass = match a.tolerance.or_else(|| default_tolerance(&sa, &sb)) {
        Some(0.0) => {
            println!("tolerance: bit-identical");
            differing == 0
        }
        Some(t) => {
            println!("tolerance: {t:e}");
            max_diff <= t
        }
        None => {
            println!("tolerance: none (report only)");
            true
        }
    };
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn init_weights(a: &InitArgs) -> Result<bool> {
    let cfg = a.model.load()?;
    let w: Weights = WeightSource::Calibrated(a.seed).load(&cfg)?;
    let f = File::create(&a.output).with_context(|| format!("cannot write {}", a.output.display()))?;
    w.write_to(BufWriter::new(f), a.format)?;
    Ok(true)
}
