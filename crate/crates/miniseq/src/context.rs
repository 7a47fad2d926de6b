//! Per-run execution context: the pool pair, transfer ledger, snapshot
//! recorder, and FLOP counters.
//!
//! One `RunCtx` belongs to exactly one experiment run. Distinct runs get
//! fully disjoint contexts, which is what makes concurrent experiments safe.

use serde::{Deserialize, Serialize};

use crate::memtrack::{self, MemSnapshot, MemoryPool, Tier, TransferLedger};

/// Which phase the run is in; routes FLOP counts into the right bucket and
/// silences per-layer snapshots during decode (decode snapshots once per
/// generated token instead).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prefill,
    /// The last block's MLP plus the LM head (the part mini-sequence
    /// processing collapses to a single token).
    FinalBlock,
    Decode,
}

/// Matmul-equivalent FLOPs (2·m·k·n per product), split by phase.
///
/// The attention bucket holds only the score/value products that grow
/// quadratically with sequence length; the q/k/v/o projections are linear in
/// sequence length and counted separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub prefill_attention: u64,
    pub prefill_projections: u64,
    pub prefill_mlp: u64,
    pub final_mlp_head: u64,
    pub decode: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.prefill_attention
            + self.prefill_projections
            + self.prefill_mlp
            + self.final_mlp_head
            + self.decode
    }
}

/// Execution context for one run.
pub struct RunCtx {
    pub device: MemoryPool,
    pub host: MemoryPool,
    pub ledger: TransferLedger,
    pub snapshots: Vec<MemSnapshot>,
    pub flops: FlopBreakdown,
    pub stage: Stage,
    /// Device-resident KV bytes, kept current by whoever mutates the cache;
    /// recorded into every snapshot.
    pub kv_device_bytes: u64,
    /// Largest transient (scope delta) seen across block MLP calls.
    pub mlp_transient_peak: u64,
}

impl RunCtx {
    pub fn new(device_budget: u64, host_budget: u64, bandwidth: u64) -> Self {
        Self {
            device: MemoryPool::with_capacity(Tier::Device, device_budget),
            host: MemoryPool::with_capacity(Tier::Host, host_budget),
            ledger: TransferLedger::new(bandwidth),
            snapshots: Vec::new(),
            flops: FlopBreakdown::default(),
            stage: Stage::Prefill,
            kv_device_bytes: 0,
            mlp_transient_peak: 0,
        }
    }

    /// Unbounded pools, default bandwidth; convenient for tests.
    pub fn unbounded() -> Self {
        Self::new(u64::MAX, u64::MAX, memtrack::DEFAULT_BANDWIDTH)
    }

    /// Capture a labelled snapshot of both pools.
    pub fn snap(&mut self, label: &str) {
        self.snapshots.push(memtrack::capture(
            label,
            &self.device,
            &self.host,
            self.kv_device_bytes,
        ));
    }

    pub fn note_mlp_transient(&mut self, delta: u64) {
        if delta > self.mlp_transient_peak {
            self.mlp_transient_peak = delta;
        }
    }

    /// Count `2·m·k·n` FLOPs for a projection-shaped matmul (q/k/v/o).
    pub fn add_projection_flops(&mut self, m: usize, k: usize, n: usize) {
        let f = 2 * (m as u64) * (k as u64) * (n as u64);
        match self.stage {
            Stage::Decode => self.flops.decode += f,
            _ => self.flops.prefill_projections += f,
        }
    }

    /// Count attention score/value products for `rows` queries starting at
    /// absolute position `start`, each query attending its full causal
    /// prefix: `4·d·Σ(start+i+1)`.
    pub fn add_attention_core_flops(&mut self, rows: usize, start: usize, d: usize) {
        let n = rows as u64;
        let keys: u64 = n * start as u64 + n * (n + 1) / 2;
        let f = 4 * d as u64 * keys;
        match self.stage {
            Stage::Decode => self.flops.decode += f,
            _ => self.flops.prefill_attention += f,
        }
    }

    /// Count the three MLP matmuls over `rows` rows: `6·rows·d·i`.
    pub fn add_mlp_flops(&mut self, rows: usize, d: usize, i: usize) {
        let f = 6 * (rows as u64) * (d as u64) * (i as u64);
        match self.stage {
            Stage::Decode => self.flops.decode += f,
            Stage::FinalBlock => self.flops.final_mlp_head += f,
            Stage::Prefill => self.flops.prefill_mlp += f,
        }
    }

    /// Count the LM head matmul over `rows` rows: `2·rows·d·v`.
    pub fn add_head_flops(&mut self, rows: usize, d: usize, v: usize) {
        let f = 2 * (rows as u64) * (d as u64) * (v as u64);
        match self.stage {
            Stage::Decode => self.flops.decode += f,
            _ => self.flops.final_mlp_head += f,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_route_by_stage() {
        let mut ctx = RunCtx::unbounded();
        ctx.add_mlp_flops(2, 3, 5);
        assert_eq!(ctx.flops.prefill_mlp, 6 * 2 * 3 * 5);
        ctx.stage = Stage::FinalBlock;
        ctx.add_mlp_flops(1, 3, 5);
        assert_eq!(ctx.flops.final_mlp_head, 6 * 3 * 5);
        ctx.stage = Stage::Decode;
        ctx.add_mlp_flops(1, 3, 5);
        ctx.add_head_flops(1, 3, 7);
        assert_eq!(ctx.flops.decode, 6 * 3 * 5 + 2 * 3 * 7);
    }

    #[test]
    fn attention_core_formula() {
        let mut ctx = RunCtx::unbounded();
        // 3 rows starting at position 4: keys seen = 5 + 6 + 7 = 18.
        ctx.add_attention_core_flops(3, 4, 8);
        assert_eq!(ctx.flops.prefill_attention, 4 * 8 * 18);
    }
}
