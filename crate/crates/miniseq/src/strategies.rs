//! Prefill strategies, KV offload/reload, and greedy decode.
//!
//! Three ways to process the prompt:
//!
//! - **Standard**: one pass over all blocks at full sequence width, logits
//!   computed for every position and the last row taken. The deliberately
//!   unoptimized baseline; its MLP transient is the full
//!   `seq_len x intermediate_dim` tensor per block.
//! - **Mini-sequence**: attention is unchanged, but each non-final block's
//!   MLP runs over `ceil(S/C)` row partitions sequentially, freeing each
//!   transient before the next; the final block processes only the last
//!   token through its MLP and the LM head. Optionally offloads each
//!   layer's freshly written K/V to the host immediately after attention.
//! - **Chunked**: the whole block stack runs per prompt chunk with absolute
//!   positions, the cache growing across chunks. No offload variant; the
//!   combination is not part of the comparison set.
//!
//! All three produce bitwise-identical last-token logits and caches for the
//! same tokens, which the equivalence checker asserts. Decode is a single
//! shared code path regardless of which strategy filled the cache.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::context::{RunCtx, Stage};
use crate::memtrack::{BudgetExceeded, Tier};
use crate::model::{KvCache, Model};
use crate::tensor::{slice_last_token, Tensor};

/// Which prefill path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "miniseq")]
    MiniSequence,
    #[serde(rename = "chunked")]
    ChunkedPrefill,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StrategyKind::Standard => write!(f, "standard"),
            StrategyKind::MiniSequence => write!(f, "miniseq"),
            StrategyKind::ChunkedPrefill => write!(f, "chunked"),
        }
    }
}

/// Strategy selection plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Partition (mini-sequence) or chunk token count `C`; ignored by
    /// Standard.
    pub partition_size: usize,
    /// Offload each layer's K/V to host right after its attention;
    /// supported for Standard and MiniSequence.
    pub offload: bool,
}

impl StrategyConfig {
    pub fn standard() -> Self {
        Self {
            kind: StrategyKind::Standard,
            partition_size: 2048,
            offload: false,
        }
    }

    pub fn mini_sequence(partition_size: usize, offload: bool) -> Self {
        Self {
            kind: StrategyKind::MiniSequence,
            partition_size,
            offload,
        }
    }

    pub fn chunked(partition_size: usize) -> Self {
        Self {
            kind: StrategyKind::ChunkedPrefill,
            partition_size,
            offload: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.partition_size == 0 {
            return Err("partition_size must be at least 1".into());
        }
        if self.offload && self.kind == StrategyKind::ChunkedPrefill {
            return Err("chunked prefill has no offload variant".into());
        }
        Ok(())
    }

    /// Short label for reports: `standard`, `miniseq+offload`, ...
    pub fn label(&self) -> String {
        if self.offload {
            format!("{}+offload", self.kind)
        } else {
            self.kind.to_string()
        }
    }
}

/// Split `s` rows into partitions of `c` rows (the last one may be short).
/// Returns `(start, len)` pairs; `ceil(s/c)` of them.
pub fn partitions(s: usize, c: usize) -> Vec<(usize, usize)> {
    assert!(c >= 1, "partition size must be at least 1");
    let mut out = Vec::with_capacity(s.div_ceil(c));
    let mut start = 0;
    while start < s {
        let len = c.min(s - start);
        out.push((start, len));
        start += len;
    }
    out
}

/// What a prefill leaves behind: logits for the last prompt position and
/// the populated cache. Peaks, FLOPs, the ledger, and snapshots accumulate
/// in the run's [`RunCtx`].
pub struct PrefillResult {
    pub last_logits: Tensor,
    pub cache: KvCache,
    pub prefill_wall_seconds: f64,
}

/// Dispatch on the strategy config.
pub fn prefill(
    model: &Model,
    tokens: &[u32],
    strategy: &StrategyConfig,
    ctx: &mut RunCtx,
) -> Result<PrefillResult, BudgetExceeded> {
    match strategy.kind {
        StrategyKind::Standard => prefill_standard_impl(model, tokens, strategy.offload, ctx),
        StrategyKind::MiniSequence => prefill_minisequence(
            model,
            tokens,
            strategy.partition_size,
            strategy.offload,
            ctx,
        ),
        StrategyKind::ChunkedPrefill => {
            prefill_chunked(model, tokens, strategy.partition_size, ctx)
        }
    }
}

/// Full-width baseline without offload.
pub fn prefill_standard(
    model: &Model,
    tokens: &[u32],
    ctx: &mut RunCtx,
) -> Result<PrefillResult, BudgetExceeded> {
    prefill_standard_impl(model, tokens, false, ctx)
}

fn prefill_standard_impl(
    model: &Model,
    tokens: &[u32],
    offload: bool,
    ctx: &mut RunCtx,
) -> Result<PrefillResult, BudgetExceeded> {
    let t0 = Instant::now();
    let s = tokens.len();
    assert!(s >= 1, "prefill of an empty prompt");
    let layers = model.cfg.layers;

    let mut cache = KvCache::empty(&model.cfg, &ctx.device)?;
    let mut x = model.embed(tokens, ctx)?;
    for layer in 0..layers {
        ctx.stage = Stage::Prefill;
        model.attn_block_into(&mut x, &mut cache, layer, 0, ctx)?;
        if offload {
            offload_layer(&mut cache, layer, ctx)?;
        }
        ctx.stage = if layer + 1 == layers {
            Stage::FinalBlock
        } else {
            Stage::Prefill
        };
        model.mlp_block_into(&mut x, 0, s, layer, ctx)?;
    }

    // The baseline computes logits for every position, then takes the last
    // row; the S x V tensor is part of its memory profile on purpose.
    ctx.stage = Stage::FinalBlock;
    let xn = model.final_rmsnorm(&x)?;
    drop(x);
    let logits_all = model.lm_head_logits(&xn, ctx)?;
    drop(xn);
    ctx.snap("prefill");
    let last_logits = slice_last_token(&logits_all)?;
    drop(logits_all);

    Ok(PrefillResult {
        last_logits,
        cache,
        prefill_wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Mini-sequence prefill: partitioned MLPs, last-token final block, and
/// optional per-layer KV offload.
pub fn prefill_minisequence(
    model: &Model,
    tokens: &[u32],
    partition_size: usize,
    offload: bool,
    ctx: &mut RunCtx,
) -> Result<PrefillResult, BudgetExceeded> {
    let t0 = Instant::now();
    let s = tokens.len();
    assert!(s >= 1, "prefill of an empty prompt");
    assert!(partition_size >= 1);
    let layers = model.cfg.layers;

    let mut cache = KvCache::empty(&model.cfg, &ctx.device)?;
    let mut x = model.embed(tokens, ctx)?;

    for layer in 0..layers - 1 {
        ctx.stage = Stage::Prefill;
        model.attn_block_into(&mut x, &mut cache, layer, 0, ctx)?;
        if offload {
            offload_layer(&mut cache, layer, ctx)?;
        }
        for (start, len) in partitions(s, partition_size) {
            model.mlp_block_into(&mut x, start, len, layer, ctx)?;
        }
    }

    // Final block: attention is unchanged, then only the last token's
    // representation goes through the MLP, final norm, and LM head.
    let last = layers - 1;
    ctx.stage = Stage::Prefill;
    model.attn_block_into(&mut x, &mut cache, last, 0, ctx)?;
    if offload {
        offload_layer(&mut cache, last, ctx)?;
    }
    let mut last_row = slice_last_token(&x)?;
    drop(x);
    ctx.stage = Stage::FinalBlock;
    model.mlp_block_into(&mut last_row, 0, 1, last, ctx)?;
    let xn = model.final_rmsnorm(&last_row)?;
    drop(last_row);
    let last_logits = model.lm_head_logits(&xn, ctx)?;
    drop(xn);
    ctx.snap("prefill");

    Ok(PrefillResult {
        last_logits,
        cache,
        prefill_wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Chunked prefill: the whole block stack per chunk, cache growing across
/// chunks, logits from the last chunk's last position.
pub fn prefill_chunked(
    model: &Model,
    tokens: &[u32],
    chunk_size: usize,
    ctx: &mut RunCtx,
) -> Result<PrefillResult, BudgetExceeded> {
    let t0 = Instant::now();
    let s = tokens.len();
    assert!(s >= 1, "prefill of an empty prompt");
    assert!(chunk_size >= 1);
    let layers = model.cfg.layers;

    let mut cache = KvCache::empty(&model.cfg, &ctx.device)?;
    let mut last_logits = None;
    let chunks = partitions(s, chunk_size);
    let n_chunks = chunks.len();
    for (ci, (start, len)) in chunks.into_iter().enumerate() {
        let mut xc = model.embed(&tokens[start..start + len], ctx)?;
        for layer in 0..layers {
            ctx.stage = Stage::Prefill;
            model.attn_block_into(&mut xc, &mut cache, layer, start, ctx)?;
            ctx.stage = if layer + 1 == layers {
                Stage::FinalBlock
            } else {
                Stage::Prefill
            };
            model.mlp_block_into(&mut xc, 0, len, layer, ctx)?;
        }
        if ci + 1 == n_chunks {
            ctx.stage = Stage::FinalBlock;
            let last = slice_last_token(&xc)?;
            drop(xc);
            let xn = model.final_rmsnorm(&last)?;
            let logits = model.lm_head_logits(&xn, ctx)?;
            ctx.snap("prefill");
            last_logits = Some(logits);
        }
    }

    Ok(PrefillResult {
        last_logits: last_logits.expect("at least one chunk"),
        cache,
        prefill_wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

fn offload_layer(
    cache: &mut KvCache,
    layer: usize,
    ctx: &mut RunCtx,
) -> Result<(), BudgetExceeded> {
    let host = ctx.host.clone();
    let ledger = ctx.ledger.clone();
    cache.transfer_layer(layer, &host, &ledger)?;
    ctx.kv_device_bytes = cache.device_resident_bytes();
    ctx.snap("prefill");
    Ok(())
}

/// Bring every host-resident cache layer back to the device. A no-op (and
/// no ledger traffic) when everything already lives there. Failing here is
/// the decode-stage memory constraint: the whole cache must fit.
pub fn reload_cache(cache: &mut KvCache, ctx: &mut RunCtx) -> Result<(), BudgetExceeded> {
    let device = ctx.device.clone();
    let ledger = ctx.ledger.clone();
    let mut moved = false;
    for layer in 0..cache.n_layers() {
        if cache.layer_tier(layer) == Tier::Host {
            cache.transfer_layer(layer, &device, &ledger)?;
            moved = true;
        }
    }
    if moved {
        ctx.kv_device_bytes = cache.device_resident_bytes();
        ctx.snap("reload");
    }
    Ok(())
}

/// Index of the largest logit, lowest index on exact ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy autoregressive decode: `n_new` steps, each embedding the argmax
/// token and running every block at width 1. The code path is identical
/// regardless of which strategy produced the cache.
pub fn decode_greedy(
    model: &Model,
    last_logits: &Tensor,
    cache: &mut KvCache,
    n_new: usize,
    ctx: &mut RunCtx,
) -> Result<Vec<u32>, BudgetExceeded> {
    assert!(
        (0..cache.n_layers()).all(|l| cache.layer_tier(l) == Tier::Device),
        "decode requires a fully device-resident cache; reload first"
    );
    ctx.stage = Stage::Decode;
    let mut out = Vec::with_capacity(n_new);
    let mut logits: Option<Tensor> = None; // step 0 reads `last_logits`
    for t in 0..n_new {
        let token = match &logits {
            None => argmax(last_logits.row(0)),
            Some(l) => argmax(l.row(0)),
        };
        out.push(token);
        let mut x = model.embed(&[token], ctx)?;
        let pos = cache.cached_len();
        for layer in 0..model.cfg.layers {
            model.attn_block_into(&mut x, cache, layer, pos, ctx)?;
            model.mlp_block_into(&mut x, 0, 1, layer, ctx)?;
        }
        let xn = model.final_rmsnorm(&x)?;
        drop(x);
        logits = Some(model.lm_head_logits(&xn, ctx)?);
        drop(xn);
        ctx.kv_device_bytes = cache.device_resident_bytes();
        ctx.snap(&format!("decode step {t}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::ELEMENT_WIDTH;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn tokens(n: usize, v: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + 3) % v) as u32).collect()
    }

    #[test]
    fn partition_shapes() {
        assert_eq!(partitions(8, 3), vec![(0, 3), (3, 3), (6, 2)]);
        assert_eq!(partitions(10, 4), vec![(0, 4), (4, 4), (8, 2)]);
        assert_eq!(partitions(4, 9), vec![(0, 4)]);
        assert_eq!(partitions(144_000, 8192).len(), 18);
    }

    #[test]
    fn strategy_validation() {
        assert!(StrategyConfig::chunked(0).validate().is_err());
        let mut bad = StrategyConfig::chunked(64);
        bad.offload = true;
        assert!(bad.validate().is_err());
        assert!(StrategyConfig::mini_sequence(64, true).validate().is_ok());
    }

    #[test]
    fn minisequence_matches_standard_bitwise() {
        let cfg = tiny_cfg();
        let toks = tokens(29, cfg.vocab_size);

        let mut ctx_std = RunCtx::unbounded();
        let model_std = Model::new(cfg.clone(), &ctx_std.device).unwrap();
        let std_res = prefill_standard(&model_std, &toks, &mut ctx_std).unwrap();

        for c in [1usize, 7, 29, 32] {
            for offload in [false, true] {
                let mut ctx = RunCtx::unbounded();
                let model = Model::new(cfg.clone(), &ctx.device).unwrap();
                let res = prefill_minisequence(&model, &toks, c, offload, &mut ctx).unwrap();
                assert!(
                    res.last_logits.bits_eq(&std_res.last_logits),
                    "logits diverged at C={c} offload={offload}"
                );
                assert!(
                    res.cache.bits_eq(&std_res.cache),
                    "cache diverged at C={c} offload={offload}"
                );
            }
        }
    }

    #[test]
    fn chunked_matches_standard_bitwise() {
        let cfg = tiny_cfg();
        let toks = tokens(10, cfg.vocab_size);

        let mut ctx_std = RunCtx::unbounded();
        let model_std = Model::new(cfg.clone(), &ctx_std.device).unwrap();
        let std_res = prefill_standard(&model_std, &toks, &mut ctx_std).unwrap();

        for c in [1usize, 4, 10, 13] {
            let mut ctx = RunCtx::unbounded();
            let model = Model::new(cfg.clone(), &ctx.device).unwrap();
            let res = prefill_chunked(&model, &toks, c, &mut ctx).unwrap();
            assert!(
                res.last_logits.bits_eq(&std_res.last_logits),
                "chunked logits diverged at C={c}"
            );
            assert!(res.cache.bits_eq(&std_res.cache), "cache diverged at C={c}");
        }
    }

    #[test]
    fn single_token_prefill_matches_across_strategies() {
        let cfg = tiny_cfg();
        let toks = tokens(1, cfg.vocab_size);
        let mut a = RunCtx::unbounded();
        let ma = Model::new(cfg.clone(), &a.device).unwrap();
        let ra = prefill_standard(&ma, &toks, &mut a).unwrap();

        let mut b = RunCtx::unbounded();
        let mb = Model::new(cfg.clone(), &b.device).unwrap();
        let rb = prefill_minisequence(&mb, &toks, 5, true, &mut b).unwrap();
        assert!(ra.last_logits.bits_eq(&rb.last_logits));
    }

    #[test]
    fn offload_moves_cache_and_reload_restores() {
        let cfg = tiny_cfg();
        let s = 50;
        let toks = tokens(s, cfg.vocab_size);
        let mut ctx = RunCtx::unbounded();
        let model = Model::new(cfg.clone(), &ctx.device).unwrap();
        let mut res = prefill_minisequence(&model, &toks, 16, true, &mut ctx).unwrap();

        let kv_bytes = (2 * s * cfg.kv_dim() * cfg.layers * ELEMENT_WIDTH) as u64;
        assert_eq!(res.cache.device_resident_bytes(), 0);
        assert_eq!(ctx.ledger.bytes_device_to_host(), kv_bytes);
        assert_eq!(ctx.ledger.bytes_host_to_device(), 0);

        reload_cache(&mut res.cache, &mut ctx).unwrap();
        assert_eq!(res.cache.device_resident_bytes(), kv_bytes);
        assert_eq!(ctx.ledger.bytes_host_to_device(), kv_bytes);

        // Already on device: a second reload is a no-op.
        reload_cache(&mut res.cache, &mut ctx).unwrap();
        assert_eq!(ctx.ledger.bytes_host_to_device(), kv_bytes);
    }

    #[test]
    fn reload_hand_value() {
        // S=1000, kv_dim=256, L=4, width 4 -> 8,192,000 bytes back.
        let cfg = ModelConfig {
            layers: 4,
            hidden_dim: 256,
            intermediate_dim: 512,
            vocab_size: 64,
            n_heads: 8,
            n_kv_heads: 8,
            head_dim: 32,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            seed: 3,
            element_width: 4,
        };
        let toks = tokens(1000, cfg.vocab_size);
        let mut ctx = RunCtx::unbounded();
        let model = Model::new(cfg.clone(), &ctx.device).unwrap();
        let mut res = prefill_minisequence(&model, &toks, 256, true, &mut ctx).unwrap();
        reload_cache(&mut res.cache, &mut ctx).unwrap();
        assert_eq!(ctx.ledger.bytes_host_to_device(), 8_192_000);
    }

    #[test]
    fn reload_respects_device_budget() {
        let cfg = tiny_cfg();
        let toks = tokens(64, cfg.vocab_size);
        // Generous budget for prefill-with-offload, then shrink what's left
        // by filling the device pool before reloading.
        let mut ctx = RunCtx::unbounded();
        let model = Model::new(cfg.clone(), &ctx.device).unwrap();
        let mut res = prefill_minisequence(&model, &toks, 16, true, &mut ctx).unwrap();

        // Rebuild a context whose device pool is too small for the cache.
        let kv_bytes = res.cache.total_bytes();
        let mut tight = RunCtx::new(kv_bytes / 2, u64::MAX, 1_000_000);
        let err = reload_cache(&mut res.cache, &mut tight).unwrap_err();
        assert_eq!(err.tier, Tier::Device);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.0, 3.0, 1.0, 3.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        let mut v = vec![0.0f32; 10];
        v[7] = 2.5;
        assert_eq!(argmax(&v), 7);
        assert_eq!(argmax(&[1.0, 0.5, 1.0, 0.2, 1.0]), 0);
    }

    #[test]
    fn decode_is_strategy_independent() {
        let cfg = tiny_cfg();
        let toks = tokens(23, cfg.vocab_size);

        let mut runs = Vec::new();
        for strat in [
            StrategyConfig::standard(),
            StrategyConfig::mini_sequence(7, false),
            StrategyConfig::mini_sequence(7, true),
            StrategyConfig::chunked(9),
        ] {
            let mut ctx = RunCtx::unbounded();
            let model = Model::new(cfg.clone(), &ctx.device).unwrap();
            let mut res = prefill(&model, &toks, &strat, &mut ctx).unwrap();
            reload_cache(&mut res.cache, &mut ctx).unwrap();
            let generated =
                decode_greedy(&model, &res.last_logits, &mut res.cache, 20, &mut ctx).unwrap();
            assert_eq!(res.cache.cached_len(), 23 + 20);
            runs.push(generated);
        }
        for other in &runs[1..] {
            assert_eq!(&runs[0], other, "decode diverged across strategies");
        }
    }

    #[test]
    fn decode_grows_cache_within_budget_only() {
        let cfg = tiny_cfg();
        let toks = tokens(8, cfg.vocab_size);
        let mut probe = RunCtx::unbounded();
        let model0 = Model::new(cfg.clone(), &probe.device).unwrap();
        let res0 = prefill_standard(&model0, &toks, &mut probe).unwrap();
        let _ = res0;
        let prefill_peak = probe.device.peak();

        // A budget that's enough to prefill but not to decode many tokens.
        let mut ctx = RunCtx::new(prefill_peak + 512, u64::MAX, 1_000_000);
        let model = Model::new(cfg.clone(), &ctx.device).unwrap();
        let mut res = prefill_standard(&model, &toks, &mut ctx).unwrap();
        let err = decode_greedy(&model, &res.last_logits, &mut res.cache, 500, &mut ctx);
        assert!(err.is_err(), "decode should eventually exhaust the budget");
    }

    #[test]
    fn minisequence_final_block_flops_are_one_token() {
        let cfg = tiny_cfg();
        let s = 29;
        let toks = tokens(s, cfg.vocab_size);
        let (d, i, v) = (
            cfg.hidden_dim as u64,
            cfg.intermediate_dim as u64,
            cfg.vocab_size as u64,
        );

        let mut ctx_std = RunCtx::unbounded();
        let model_std = Model::new(cfg.clone(), &ctx_std.device).unwrap();
        let _ = prefill_standard(&model_std, &toks, &mut ctx_std).unwrap();
        assert_eq!(
            ctx_std.flops.final_mlp_head,
            (s as u64) * (6 * d * i + 2 * d * v)
        );

        let mut ctx_min = RunCtx::unbounded();
        let model_min = Model::new(cfg.clone(), &ctx_min.device).unwrap();
        let _ = prefill_minisequence(&model_min, &toks, 8, false, &mut ctx_min).unwrap();
        assert_eq!(ctx_min.flops.final_mlp_head, 6 * d * i + 2 * d * v);

        // Exactly 1/S of the baseline.
        assert_eq!(
            ctx_std.flops.final_mlp_head,
            ctx_min.flops.final_mlp_head * s as u64
        );
        // Attention and non-final MLP work identical.
        assert_eq!(
            ctx_std.flops.prefill_attention,
            ctx_min.flops.prefill_attention
        );
        assert_eq!(ctx_std.flops.prefill_mlp, ctx_min.flops.prefill_mlp);
    }
}
