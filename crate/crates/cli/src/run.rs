//! One enhancement run: engine selection, weights and per-frame statistics.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::ValueEnum;
use tftnn_core::isa::CompileOptions;
use tftnn_core::model::{
    AttentionOrder, Enhancer, GoldenF64, GoldenQuant, MacCounter, MagnitudeEngine, ModelConfig, NormMode, Weights,
};
use tftnn_core::numerics::Format;
use tftnn_core::sim::{CycleReport, SimEngine, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineKind {
    /// Full-precision golden model on f32-stored weights.
    GoldenFp32,
    /// Bit-exact quantized golden model.
    GoldenQuant,
    /// Cycle-accurate simulator running the compiled program.
    Sim,
}

/// Everything that selects what a run computes, apart from the shared model
/// config and weights source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub engine: EngineKind,
    pub format: Format,
    pub norm: NormMode,
    pub order: AttentionOrder,
    pub zero_skip: bool,
}

impl RunSpec {
    pub fn config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { norm: self.norm, attention_order: self.order, ..base.clone() }
    }

    pub fn describe(&self) -> String {
        let engine = self.engine.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string());
        match self.engine {
            EngineKind::GoldenFp32 => format!("engine={engine} norm={} attention={}", self.norm, self.order),
            _ => format!("engine={engine} format={} norm={} attention={}", self.format, self.norm, self.order),
        }
    }
}

/// Where weights come from.
#[derive(Debug, Clone)]
pub enum WeightSource<'a> {
    File(&'a Path),
    /// Seeded random weights with BN statistics calibrated on noise.
    Calibrated(u64),
}

impl WeightSource<'_> {
    pub fn load(&self, cfg: &ModelConfig) -> Result<Weights> {
        match self {
            WeightSource::File(p) => {
                let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
                let (w, _) = Weights::read_from(BufReader::new(f)).with_context(|| format!("cannot read {}", p.display()))?;
                w.check(cfg).with_context(|| format!("{} does not match the config", p.display()))?;
                Ok(w)
            }
            // calibration runs in full precision, where both attention orders agree
            WeightSource::Calibrated(seed) => {
                let c = ModelConfig { attention_order: AttentionOrder::Reordered, ..cfg.clone() };
                Ok(Weights::calibrated(&c, *seed)?)
            }
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub samples: Vec<f64>,
    pub frames: usize,
    pub seconds: f64,
    /// MACs per layer summed over all frames.
    pub macs: Vec<(String, u64)>,
    /// One report per frame, simulator only.
    pub reports: Vec<CycleReport>,
}

impl RunOutput {
    pub fn total_report(&self) -> Option<CycleReport> {
        let (first, rest) = self.reports.split_first()?;
        let mut t = first.clone();
        t.barrier_waits.clear();
        rest.iter().for_each(|r| t.accumulate(r));
        Some(t)
    }

    pub fn cycles_per_frame(&self) -> Option<(f64, u64)> {
        let n = self.reports.len();
        let max = self.reports.iter().map(|r| r.cycles_total).max()?;
        let sum: u64 = self.reports.iter().map(|r| r.cycles_total).sum();
        Some((sum as f64 / n as f64, max))
    }

    /// MACs of the layers whose name contains `part`.
    pub fn macs_matching(&self, part: &str) -> u64 {
        self.macs.iter().filter(|(n, _)| n.contains(part)).map(|(_, m)| m).sum()
    }
}

/// The simulator, keeping every frame's report.
struct Recording {
    sim: SimEngine,
    reports: Vec<CycleReport>,
}

impl MagnitudeEngine for Recording {
    type Error = SimError;

    fn enhance_magnitude(&mut self, noisy: &[f64]) -> Result<Vec<f64>, SimError> {
        let y = self.sim.enhance_magnitude(noisy)?;
        self.reports.extend(self.sim.last_report.take());
        Ok(y)
    }

    fn reset(&mut self) {
        self.sim.reset();
        self.reports.clear();
    }
}

fn stream<E>(cfg: &ModelConfig, engine: E, samples: &[f64]) -> Result<(Vec<f64>, E)>
where
    E: MagnitudeEngine,
    E::Error: std::error::Error + Send + Sync + 'static,
{
    let mut e = Enhancer::new(cfg, engine);
    let y = e.process(samples)?;
    Ok((y, e.engine))
}

fn layer_macs(c: &MacCounter) -> Vec<(String, u64)> {
    c.layers.iter().map(|(n, m)| (n.clone(), m.macs)).collect()
}

/// Number of hops pushed through the engine for `len` samples.
pub fn hops(cfg: &ModelConfig, len: usize) -> usize {
    len.div_ceil(cfg.hop) + (cfg.fft_len - cfg.hop) / cfg.hop
}

pub fn run(base: &ModelConfig, weights: &WeightSource, spec: &RunSpec, samples: &[f64]) -> Result<RunOutput> {
    let cfg = spec.config(base);
    let w = weights.load(&cfg)?;
    let start = Instant::now();
    let (samples, macs, reports) = match spec.engine {
        EngineKind::GoldenFp32 => {
            let (y, e) = stream(&cfg, GoldenF64::new(&cfg, &w.as_f32())?, samples)?;
            (y, layer_macs(&e.macs), Vec::new())
        }
        EngineKind::GoldenQuant => {
            let (y, e) = stream(&cfg, GoldenQuant::new(&cfg, &w, spec.format)?, samples)?;
            (y, layer_macs(&e.macs), Vec::new())
        }
        EngineKind::Sim => {
            let sim = SimEngine::new(&cfg, &w, spec.format, &CompileOptions { zero_skip: spec.zero_skip })
                .context("cannot compile the network for the simulator")?;
            let (y, e) = stream(&cfg, Recording { sim, reports: Vec::new() }, samples)?;
            let mut macs: Vec<(String, u64)> = Vec::new();
            for r in &e.reports {
                for l in &r.layers {
                    match macs.iter_mut().find(|(n, _)| *n == l.name) {
                        Some(m) => m.1 += l.macs_issued + l.macs_skipped,
                        None => macs.push((l.name.clone(), l.macs_issued + l.macs_skipped)),
                    }
                }
            }
            (y, macs, e.reports)
        }
    };
    Ok(RunOutput { frames: hops(&cfg, samples.len()), samples, seconds: start.elapsed().as_secs_f64(), macs, reports })
}
