//! Closed-form memory model, maximum-context prediction, and FLOP counts.
//!
//! These are the oracles measured runs are validated against. The peak
//! memory for a full-width prefill decomposes as
//!
//! ```text
//! total = weights + 2*S*d_kv*L*w  +  max(S*d, S*I, V) * w
//!          (model)   (KV cache)      (transient intermediate)
//! ```
//!
//! Partitioning the MLP into `M` mini-sequences shrinks the transient term
//! to `ceil(S/M) * I * w`, and offloading removes the KV term from the
//! device during prefill at the price of reloading it before decode — which
//! turns the decode-stage cache into the binding constraint for the
//! maximum context length.
//!
//! Everything here is a pure function; `d_kv` defaults to `d` so the
//! classic formula is reproduced verbatim, with grouped-query widths
//! available by setting it lower.

use serde::{Deserialize, Serialize};

use crate::context::FlopBreakdown;
use crate::model::ModelConfig;
use crate::strategies::{StrategyConfig, StrategyKind};

/// Inputs to the closed forms. Zero dimensions are tolerated so degenerate
/// what-if questions (e.g. "no KV term") stay expressible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticalInputs {
    /// Sequence (prompt) length in tokens.
    pub seq_len: u64,
    /// Hidden dimension `d`.
    pub hidden_dim: u64,
    /// KV width; equals `d` unless grouped-query attention shrinks it.
    pub kv_dim: u64,
    /// MLP intermediate dimension `I`.
    pub intermediate_dim: u64,
    /// Vocabulary size `V`.
    pub vocab_size: u64,
    /// Layer count `L`.
    pub layers: u64,
    /// Bytes per element `w`.
    pub element_width: u64,
    /// Mini-sequence partition count `M` (1 = unpartitioned).
    pub partitions: u64,
    /// Model weight bytes.
    pub model_bytes: u64,
    /// Offload overhead bytes (staging buffers and the like).
    pub offload_overhead_bytes: u64,
    /// Device capacity in bytes.
    pub device_capacity: u64,
}

impl AnalyticalInputs {
    /// Derive the static dimensions from a model config; `seq_len`,
    /// `partitions`, `model_bytes`, overhead, and capacity still need to be
    /// filled in.
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            seq_len: 0,
            hidden_dim: cfg.hidden_dim as u64,
            kv_dim: cfg.kv_dim() as u64,
            intermediate_dim: cfg.intermediate_dim as u64,
            vocab_size: cfg.vocab_size as u64,
            layers: cfg.layers as u64,
            element_width: cfg.element_width as u64,
            partitions: 1,
            model_bytes: 0,
            offload_overhead_bytes: 0,
            device_capacity: u64::MAX,
        }
    }

    fn kv_bytes(&self, s: u64) -> u64 {
        2 * s * self.kv_dim * self.layers * self.element_width
    }

    fn intermediate_bytes(&self, s: u64) -> u64 {
        (s * self.hidden_dim)
            .max(s * self.intermediate_dim)
            .max(self.vocab_size)
            * self.element_width
    }
}

/// The memory decomposition for one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    /// `2*S*d_kv*L*w`.
    pub kv_bytes: u64,
    /// `max(S*d, S*I, V)*w`.
    pub intermediate_bytes: u64,
    /// `ceil(S/M)*I*w`.
    pub intermediate_mini_bytes: u64,
    /// `model + kv + intermediate`.
    pub total_bytes: u64,
    /// `capacity - model - offload_overhead` (saturating).
    pub available_bytes: u64,
}

/// Evaluate the closed forms for the given inputs.
pub fn analytic_memory_model(inputs: &AnalyticalInputs) -> MemoryBreakdown {
    assert!(inputs.partitions >= 1, "partition count must be at least 1");
    let s = inputs.seq_len;
    let kv_bytes = inputs.kv_bytes(s);
    let intermediate_bytes = inputs.intermediate_bytes(s);
    let intermediate_mini_bytes =
        s.div_ceil(inputs.partitions) * inputs.intermediate_dim * inputs.element_width;
    MemoryBreakdown {
        kv_bytes,
        intermediate_bytes,
        intermediate_mini_bytes,
        total_bytes: inputs.model_bytes + kv_bytes + intermediate_bytes,
        available_bytes: inputs
            .device_capacity
            .saturating_sub(inputs.model_bytes)
            .saturating_sub(inputs.offload_overhead_bytes),
    }
}

/// Would a prompt of `s` tokens fit under the strategy's binding
/// constraint?
fn fits(inputs: &AnalyticalInputs, strategy: &StrategyConfig, s: u64) -> bool {
    let cap = inputs.device_capacity;
    let w = inputs.element_width;
    let c = strategy.partition_size as u64;
    let weights = inputs.model_bytes;
    let prefill_partition_bytes = || {
        // M = ceil(S/C) partitions, the largest holding ceil(S/M) rows.
        let m = s.div_ceil(c).max(1);
        s.div_ceil(m) * inputs.intermediate_dim * w
    };
    match (strategy.kind, strategy.offload) {
        (StrategyKind::Standard, false) => {
            weights + inputs.kv_bytes(s) + inputs.intermediate_bytes(s) <= cap
        }
        (StrategyKind::Standard, true) => {
            let prefill = weights
                + inputs.offload_overhead_bytes
                + 2 * s * inputs.kv_dim * w
                + inputs.intermediate_bytes(s);
            let decode = weights + inputs.kv_bytes(s);
            prefill <= cap && decode <= cap
        }
        (StrategyKind::MiniSequence, false) => {
            weights + inputs.kv_bytes(s) + prefill_partition_bytes() <= cap
        }
        (StrategyKind::MiniSequence, true) => {
            // Prefill holds at most one layer's K/V on device; decode needs
            // the whole reloaded cache.
            let prefill = weights
                + inputs.offload_overhead_bytes
                + 2 * s * inputs.kv_dim * w
                + prefill_partition_bytes();
            let decode = weights + inputs.kv_bytes(s);
            prefill <= cap && decode <= cap
        }
        (StrategyKind::ChunkedPrefill, _) => {
            weights + inputs.kv_bytes(s) + c * inputs.intermediate_dim * w <= cap
        }
    }
}

/// Largest sequence length whose predicted footprint fits the device
/// capacity, by binary search on the monotone constraint; 0 when a single
/// token does not fit, `ceiling` when nothing ever binds.
pub fn predict_max_context(
    inputs: &AnalyticalInputs,
    strategy: &StrategyConfig,
    ceiling: u64,
) -> u64 {
    assert!(ceiling >= 1);
    if !fits(inputs, strategy, 1) {
        return 0;
    }
    if fits(inputs, strategy, ceiling) {
        return ceiling;
    }
    let (mut lo, mut hi) = (1u64, ceiling);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(inputs, strategy, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Matmul-equivalent FLOPs for a full run, mirroring exactly what the
/// engine's counters accumulate. Decode cost is strategy-independent by
/// construction; the final-block bucket is where the strategies differ.
pub fn flop_count(
    cfg: &ModelConfig,
    strategy: &StrategyConfig,
    seq_len: u64,
    decode_tokens: u64,
) -> FlopBreakdown {
    let d = cfg.hidden_dim as u64;
    let kv = cfg.kv_dim() as u64;
    let i = cfg.intermediate_dim as u64;
    let v = cfg.vocab_size as u64;
    let l = cfg.layers as u64;
    let s = seq_len;
    let n = decode_tokens;

    // Causal attention score + value products: every token attends its
    // prefix, independent of how the prompt was chunked or partitioned.
    let prefill_attention = 4 * d * l * (s * (s + 1) / 2);
    let prefill_projections = l * 2 * s * d * (2 * d + 2 * kv);
    let prefill_mlp = (l - 1) * 6 * s * d * i;
    let final_mlp_head = match strategy.kind {
        StrategyKind::Standard => 6 * s * d * i + 2 * s * d * v,
        StrategyKind::MiniSequence => 6 * d * i + 2 * d * v,
        // The last block's MLP still sees every row, one chunk at a time;
        // only the head collapses to the final position.
        StrategyKind::ChunkedPrefill => 6 * s * d * i + 2 * d * v,
    };
    let decode = n * l * (2 * d * (2 * d + 2 * kv) + 6 * d * i)
        + 4 * d * l * (n * s + n * (n + 1) / 2)
        + n * 2 * d * v;

    FlopBreakdown {
        prefill_attention,
        prefill_projections,
        prefill_mlp,
        final_mlp_head,
        decode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::RunCtx;
    use crate::model::Model;
    use crate::strategies;

    fn base_inputs() -> AnalyticalInputs {
        AnalyticalInputs {
            seq_len: 1000,
            hidden_dim: 64,
            kv_dim: 64,
            intermediate_dim: 256,
            vocab_size: 512,
            layers: 4,
            element_width: 4,
            partitions: 1,
            model_bytes: 0,
            offload_overhead_bytes: 0,
            device_capacity: u64::MAX,
        }
    }

    #[test]
    fn kv_term_hand_value() {
        // 2 * 1000 * 64 * 4 * 4 = 2,048,000
        let b = analytic_memory_model(&base_inputs());
        assert_eq!(b.kv_bytes, 2_048_000);
    }

    #[test]
    fn intermediate_max_hand_value() {
        let mut inp = base_inputs();
        inp.seq_len = 1024;
        // S*I = 262,144 elements beats S*d = 65,536 and V = 512.
        let b = analytic_memory_model(&inp);
        assert_eq!(b.intermediate_bytes, 1_048_576);

        inp.partitions = 8;
        let b = analytic_memory_model(&inp);
        assert_eq!(b.intermediate_mini_bytes, 131_072);
    }

    #[test]
    fn vocab_wins_at_tiny_sequences() {
        let mut inp = base_inputs();
        inp.seq_len = 1;
        let b = analytic_memory_model(&inp);
        assert_eq!(b.intermediate_bytes, 512 * 4);
    }

    #[test]
    fn available_subtracts_weights_and_overhead() {
        let mut inp = base_inputs();
        inp.device_capacity = 1_000_000;
        inp.model_bytes = 300_000;
        inp.offload_overhead_bytes = 50_000;
        let b = analytic_memory_model(&inp);
        assert_eq!(b.available_bytes, 650_000);
    }

    #[test]
    fn predicted_max_context_decode_bound() {
        // 100 MB capacity, 10 MB weights, kv row = 2*64*4*4 = 2048 B/token;
        // a mini-sequence+offload run is decode-bound near 43,945 tokens.
        let mut inp = base_inputs();
        inp.device_capacity = 100_000_000;
        inp.model_bytes = 10_000_000;
        let strat = StrategyConfig::mini_sequence(64, true);
        let found = predict_max_context(&inp, &strat, 1 << 30);
        let expect = 90_000_000u64 / 2048;
        assert!(
            (found as i64 - expect as i64).unsigned_abs() <= 64,
            "found {found}, expected about {expect}"
        );
    }

    #[test]
    fn degenerate_inputs_hit_the_ceiling() {
        let mut inp = base_inputs();
        inp.kv_dim = 0;
        inp.intermediate_dim = 0;
        inp.hidden_dim = 0;
        inp.device_capacity = 1 << 40;
        let strat = StrategyConfig::standard();
        assert_eq!(predict_max_context(&inp, &strat, 1 << 22), 1 << 22);
    }

    #[test]
    fn no_feasible_length_reports_zero() {
        let mut inp = base_inputs();
        inp.device_capacity = 10; // smaller than any single-token footprint
        assert_eq!(
            predict_max_context(&inp, &StrategyConfig::standard(), 1 << 20),
            0
        );
    }

    #[test]
    fn predicted_ordering_standard_chunked_mom() {
        let mut inp = base_inputs();
        inp.intermediate_dim = 512;
        inp.device_capacity = 64_000_000;
        inp.model_bytes = 4_000_000;
        let std = predict_max_context(&inp, &StrategyConfig::standard(), 1 << 30);
        let chunked = predict_max_context(&inp, &StrategyConfig::chunked(2048), 1 << 30);
        let mom = predict_max_context(&inp, &StrategyConfig::mini_sequence(2048, true), 1 << 30);
        assert!(std <= chunked, "{std} > {chunked}");
        assert!(chunked <= mom, "{chunked} > {mom}");
        assert!(mom >= 2 * std);
    }

    #[test]
    fn flop_exponents_attention_quadratic_mlp_linear() {
        let cfg = ModelConfig::desk_scale();
        let strat = StrategyConfig::standard();
        let f1 = flop_count(&cfg, &strat, 1024, 0);
        let f2 = flop_count(&cfg, &strat, 2048, 0);
        let f4 = flop_count(&cfg, &strat, 4096, 0);

        let exp_attn =
            ((f4.prefill_attention as f64 / f2.prefill_attention as f64).log2()
                + (f2.prefill_attention as f64 / f1.prefill_attention as f64).log2())
                / 2.0;
        assert!(exp_attn > 1.95 && exp_attn <= 2.01, "exponent {exp_attn}");

        let exp_mlp = (f2.prefill_mlp as f64 / f1.prefill_mlp as f64).log2();
        assert!((exp_mlp - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decode_flops_strategy_independent() {
        let cfg = ModelConfig::desk_scale();
        let a = flop_count(&cfg, &StrategyConfig::standard(), 512, 100);
        let b = flop_count(&cfg, &StrategyConfig::mini_sequence(64, true), 512, 100);
        let c = flop_count(&cfg, &StrategyConfig::chunked(64), 512, 100);
        assert_eq!(a.decode, b.decode);
        assert_eq!(a.decode, c.decode);
    }

    #[test]
    fn final_block_ratio_is_seq_len() {
        let cfg = ModelConfig::desk_scale();
        for s in [17u64, 257, 4096] {
            let std = flop_count(&cfg, &StrategyConfig::standard(), s, 0);
            let mini = flop_count(&cfg, &StrategyConfig::mini_sequence(64, false), s, 0);
            assert_eq!(std.final_mlp_head, mini.final_mlp_head * s);
        }
    }

    // The engine's runtime counters and these closed forms are independent
    // paths to the same numbers; they must agree exactly.
    #[test]
    fn engine_counters_match_closed_forms() {
        let cfg = ModelConfig {
            layers: 3,
            hidden_dim: 16,
            intermediate_dim: 40,
            vocab_size: 32,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            seed: 11,
            element_width: 4,
        };
        let toks: Vec<u32> = (0..21).map(|t| (t % 31) as u32).collect();
        for strat in [
            StrategyConfig::standard(),
            StrategyConfig::mini_sequence(6, true),
            StrategyConfig::chunked(8),
        ] {
            let mut ctx = RunCtx::unbounded();
            let model = Model::new(cfg.clone(), &ctx.device).unwrap();
            let mut res = strategies::prefill(&model, &toks, &strat, &mut ctx).unwrap();
            strategies::reload_cache(&mut res.cache, &mut ctx).unwrap();
            let _ =
                strategies::decode_greedy(&model, &res.last_logits, &mut res.cache, 5, &mut ctx)
                    .unwrap();
            let expect = flop_count(&cfg, &strat, 21, 5);
            assert_eq!(ctx.flops, expect, "flop mismatch for {}", strat.label());
        }
    }
}
