//! Activity counters collected while a frame runs.

use std::fmt::Write as _;

use serde::Serialize;

/// Word accesses per SRAM type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SramCounts {
    pub data: u64,
    pub weight: u64,
    pub bias: u64,
}

impl SramCounts {
    pub fn total(&self) -> u64 {
        self.data + self.weight + self.bias
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerCounters {
    pub name: String,
    pub cycles: u64,
    pub macs_issued: u64,
    pub macs_skipped: u64,
}

/// One BARRIER that had transfers issued since the previous one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BarrierWait {
    /// Op index of the barrier.
    pub op: usize,
    /// Beats issued since the previous barrier.
    pub beats: u64,
    /// Cycles from the first of those issues up to the barrier; the first beat
    /// moves in its issue cycle.
    pub window: u64,
    /// Cycles the barrier stalled.
    pub stall: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub cycles_total: u64,
    /// Per ledger layer in program order; ops outside any layer count as `io`.
    pub layers: Vec<LayerCounters>,
    pub macs_issued: u64,
    /// MACs whose gated operand was zero or padding.
    pub macs_skipped: u64,
    pub sram_reads: SramCounts,
    pub sram_writes: SramCounts,
    pub dma_beats_in: u64,
    pub dma_beats_out: u64,
    pub norm_passes: u64,
    /// Cycles a BARRIER waited on the memory controller.
    pub stalls_dma: u64,
    /// Cycles lost to two operand streams reading one data bank.
    pub stalls_conflict: u64,
    /// Roundings that saturated to the largest finite value.
    pub saturation_events: u64,
    /// Partial sums spilled to data SRAM; they stay in the register buffers.
    pub partial_sum_writes: u64,
    pub max_macs_per_cycle: u64,
    pub barrier_waits: Vec<BarrierWait>,
}

impl CycleReport {
    pub fn with_layers(names: &[String]) -> Self {
        Self {
            layers: names.iter().map(|n| LayerCounters { name: n.clone(), ..LayerCounters::default() }).collect(),
            ..Self::default()
        }
    }

    /// Sticky saturation flag.
    pub fn saturated(&self) -> bool {
        self.saturation_events > 0
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCounters> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn cycles_by_layer(&self) -> Vec<(&str, u64)> {
        self.layers.iter().map(|l| (l.name.as_str(), l.cycles)).collect()
    }

    pub fn macs_total(&self) -> u64 {
        self.macs_issued + self.macs_skipped
    }

    /// Add another frame's counters; layers are matched by name and the
    /// per-barrier records are not kept.
    pub fn accumulate(&mut self, other: &CycleReport) {
        self.cycles_total += other.cycles_total;
        for l in &other.layers {
            match self.layers.iter_mut().find(|m| m.name == l.name) {
                Some(m) => {
                    m.cycles += l.cycles;
                    m.macs_issued += l.macs_issued;
                    m.macs_skipped += l.macs_skipped;
                }
                None => self.layers.push(l.clone()),
            }
        }
        self.macs_issued += other.macs_issued;
        self.macs_skipped += other.macs_skipped;
        for (a, b) in [(&mut self.sram_reads, &other.sram_reads), (&mut self.sram_writes, &other.sram_writes)] {
            a.data += b.data;
            a.weight += b.weight;
            a.bias += b.bias;
        }
        self.dma_beats_in += other.dma_beats_in;
        self.dma_beats_out += other.dma_beats_out;
        self.norm_passes += other.norm_passes;
        self.stalls_dma += other.stalls_dma;
        self.stalls_conflict += other.stalls_conflict;
        self.saturation_events += other.saturation_events;
        self.partial_sum_writes += other.partial_sum_writes;
        self.max_macs_per_cycle = self.max_macs_per_cycle.max(other.max_macs_per_cycle);
    }

    /// `key: value` per counter.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("cycles_total", self.cycles_total.to_string());
        kv("macs_issued", self.macs_issued.to_string());
        kv("macs_skipped", self.macs_skipped.to_string());
        kv("max_macs_per_cycle", self.max_macs_per_cycle.to_string());
        for (name, c) in [("reads", &self.sram_reads), ("writes", &self.sram_writes)] {
            kv(&format!("sram_{name}_data"), c.data.to_string());
            kv(&format!("sram_{name}_weight"), c.weight.to_string());
            kv(&format!("sram_{name}_bias"), c.bias.to_string());
        }
        kv("dma_beats_in", self.dma_beats_in.to_string());
        kv("dma_beats_out", self.dma_beats_out.to_string());
        kv("norm_passes", self.norm_passes.to_string());
        kv("stalls_dma", self.stalls_dma.to_string());
        kv("stalls_conflict", self.stalls_conflict.to_string());
        kv("saturation_events", self.saturation_events.to_string());
        kv("saturated", self.saturated().to_string());
        kv("partial_sum_writes", self.partial_sum_writes.to_string());
        kv("barriers_waited", self.barrier_waits.iter().filter(|b| b.stall > 0).count().to_string());
        for l in &self.layers {
            kv(&format!("cycles.{}", l.name), l.cycles.to_string());
        }
        s
    }

    /// Per-layer table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,cycles,macs_issued,macs_skipped\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.name, l.cycles, l.macs_issued, l.macs_skipped);
        }
        let _ = writeln!(s, "total,{},{},{}", self.cycles_total, self.macs_issued, self.macs_skipped);
        s
    }
}
