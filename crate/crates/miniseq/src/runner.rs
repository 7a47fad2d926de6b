//! Experiment runner: single runs, context-length sweeps, maximum-context
//! search, logit-equivalence checking, and trace emission.
//!
//! Budget exhaustion is a first-class outcome, not an error: a run that
//! hits its device budget produces a report with `failed_stage` set, and
//! the max-context search is built directly on that signal.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytics::{analytic_memory_model, AnalyticalInputs};
use crate::config::{ConfigError, RunConfig};
use crate::context::RunCtx;
use crate::model::{self, KvCache, Model};
use crate::report::{logits_checksum, LedgerTotals, RunReport};
use crate::strategies::{self, StrategyConfig, StrategyKind};
use crate::tensor::Tensor;

/// Deterministic synthetic prompt: uniform token ids in `[0, vocab)` from a
/// dedicated ChaCha8 stream of the run seed.
pub fn synth_tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::from_seed(model::stream_key(seed, model::GLOBAL, model::role::TOKENS));
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn ledger_totals(ctx: &RunCtx) -> LedgerTotals {
    LedgerTotals {
        bytes_device_to_host: ctx.ledger.bytes_device_to_host(),
        bytes_host_to_device: ctx.ledger.bytes_host_to_device(),
        transfer_count: ctx.ledger.transfer_count(),
        simulated_transfer_seconds: ctx.ledger.simulated_transfer_seconds(),
    }
}

fn base_report(
    cfg: &RunConfig,
    strategy: &StrategyConfig,
    weights_bytes: u64,
    staging_bytes: u64,
    ctx: &RunCtx,
) -> RunReport {
    let mut inputs = AnalyticalInputs::from_model(&cfg.model_config());
    inputs.seq_len = cfg.seq_len as u64;
    inputs.partitions = match strategy.kind {
        StrategyKind::MiniSequence => cfg.seq_len.div_ceil(strategy.partition_size).max(1) as u64,
        _ => 1,
    };
    inputs.model_bytes = weights_bytes;
    inputs.offload_overhead_bytes = staging_bytes;
    inputs.device_capacity = cfg.device_budget.bytes();

    RunReport {
        config: cfg.clone(),
        strategy_label: strategy.label(),
        seq_len: cfg.seq_len,
        decode_tokens: cfg.decode_tokens,
        failed_stage: None,
        weights_bytes,
        staging_bytes,
        device_peak_bytes: ctx.device.peak(),
        host_peak_bytes: ctx.host.peak(),
        mlp_transient_peak_bytes: ctx.mlp_transient_peak,
        ledger: ledger_totals(ctx),
        prefill_wall_seconds: None,
        decode_wall_seconds: None,
        decode_tokens_per_second: None,
        logits_checksum: None,
        generated_tokens: None,
        flops: ctx.flops,
        analytic: analytic_memory_model(&inputs),
        snapshots: ctx.snapshots.clone(),
    }
}

/// Run one experiment: prefill, reload when offloaded, then greedy decode.
/// A budget failure yields a report with `failed_stage` set rather than an
/// error; `Err` is reserved for invalid configuration.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport, ConfigError> {
    cfg.validate()?;
    let strategy = cfg.strategy_config();
    let mut ctx = RunCtx::new(
        cfg.device_budget.bytes(),
        cfg.host_budget.bytes(),
        cfg.bandwidth,
    );

    let fail = |ctx: &RunCtx, weights_bytes, staging, stage: &str| {
        let mut r = base_report(cfg, &strategy, weights_bytes, staging, ctx);
        r.failed_stage = Some(stage.to_string());
        r
    };

    let model = match Model::new(cfg.model_config(), &ctx.device) {
        Ok(m) => m,
        Err(_) => return Ok(fail(&ctx, 0, 0, "init")),
    };
    let weights_bytes = model.weights.total_bytes();

    // The offload staging reservation is charged to the device for the
    // whole run; the closed-form model sees it as overhead.
    let staging_bytes = if strategy.offload { cfg.staging_bytes } else { 0 };
    let _staging = if staging_bytes > 0 {
        match ctx.device.alloc(staging_bytes) {
            Ok(h) => Some(h),
            Err(_) => return Ok(fail(&ctx, weights_bytes, staging_bytes, "init")),
        }
    } else {
        None
    };

    let tokens = synth_tokens(cfg.seed, cfg.seq_len, cfg.vocab_size);
    ctx.snap("prefill");
    let prefill = match strategies::prefill(&model, &tokens, &strategy, &mut ctx) {
        Ok(p) => p,
        Err(_) => return Ok(fail(&ctx, weights_bytes, staging_bytes, "prefill")),
    };
    let mut cache = prefill.cache;

    if strategy.offload && strategies::reload_cache(&mut cache, &mut ctx).is_err() {
        return Ok(fail(&ctx, weights_bytes, staging_bytes, "reload"));
    }

    let t_decode = Instant::now();
    let generated = match strategies::decode_greedy(
        &model,
        &prefill.last_logits,
        &mut cache,
        cfg.decode_tokens,
        &mut ctx,
    ) {
        Ok(tokens) => tokens,
        Err(_) => return Ok(fail(&ctx, weights_bytes, staging_bytes, "decode")),
    };
    let decode_wall = t_decode.elapsed().as_secs_f64();

    let mut report = base_report(cfg, &strategy, weights_bytes, staging_bytes, &ctx);
    report.prefill_wall_seconds = Some(prefill.prefill_wall_seconds);
    report.decode_wall_seconds = Some(decode_wall);
    report.decode_tokens_per_second = (cfg.decode_tokens > 0 && decode_wall > 0.0)
        .then(|| cfg.decode_tokens as f64 / decode_wall);
    report.logits_checksum = Some(format!("{:016x}", logits_checksum(&prefill.last_logits)));
    report.generated_tokens = Some(generated);
    Ok(report)
}

// ── Max-context search ──────────────────────────────────────────────

/// Outcome of [`search_max_context`]: the largest passing length and the
/// verified step to the first failing one.
#[derive(Debug, Clone, Copy)]
pub struct SearchOutcome {
    pub max_context: usize,
    /// `max_context + step` was verified to fail (search resolution).
    pub step: usize,
}

/// Exponential doubling followed by binary search on run success. The
/// search refines until the bracket is within ~1/128 of the answer, then
/// re-verifies both edges. Returns 0 when a single token does not fit.
pub fn search_max_context(base: &RunConfig, ceiling: usize) -> Result<SearchOutcome, ConfigError> {
    assert!(ceiling >= 1);
    let probe = |s: usize| -> Result<bool, ConfigError> {
        let mut cfg = base.clone();
        cfg.seq_len = s;
        Ok(run_experiment(&cfg)?.failed_stage.is_none())
    };

    if !probe(1)? {
        return Ok(SearchOutcome {
            max_context: 0,
            step: 1,
        });
    }
    let mut lo = 1usize;
    let mut hi = 2usize;
    while hi <= ceiling && probe(hi)? {
        lo = hi;
        hi *= 2;
    }
    if hi > ceiling {
        return Ok(SearchOutcome {
            max_context: lo,
            step: 1,
        });
    }
    while hi - lo > (lo / 128).max(1) {
        let mid = lo + (hi - lo) / 2;
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Monotonicity is assumed; assert it held at the answer.
    let step = hi - lo;
    assert!(probe(lo)?, "search answer {lo} does not pass");
    assert!(!probe(lo + step)?, "search answer {lo} + {step} passes");
    Ok(SearchOutcome {
        max_context: lo,
        step,
    })
}

// ── Sweeps ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub seq_len: usize,
    pub strategy_label: String,
    pub failed_stage: Option<String>,
    pub device_peak_bytes: u64,
    pub host_peak_bytes: u64,
    /// Peak relative to the plain standard row at the same length.
    pub ratio_vs_standard: Option<f64>,
    pub prefill_wall_seconds: Option<f64>,
    pub decode_tokens_per_second: Option<f64>,
    pub simulated_transfer_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "seq_len,strategy,status,device_peak_bytes,host_peak_bytes,\
ratio_vs_standard,prefill_wall_seconds,decode_tokens_per_second,simulated_transfer_seconds";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let oom = r.failed_stage.is_some();
            let mark = |v: String| if oom { "OOM".to_string() } else { v };
            let status = match &r.failed_stage {
                Some(stage) => format!("oom:{stage}"),
                None => "ok".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.seq_len,
                r.strategy_label,
                status,
                mark(r.device_peak_bytes.to_string()),
                mark(r.host_peak_bytes.to_string()),
                mark(
                    r.ratio_vs_standard
                        .map(|x| format!("{x:.6}"))
                        .unwrap_or_default()
                ),
                mark(
                    r.prefill_wall_seconds
                        .map(|x| format!("{x:.6}"))
                        .unwrap_or_default()
                ),
                mark(
                    r.decode_tokens_per_second
                        .map(|x| format!("{x:.3}"))
                        .unwrap_or_default()
                ),
                r.simulated_transfer_seconds,
            ));
        }
        out
    }
}

/// Run every `(length, strategy)` cell sequentially (wall-clock numbers
/// stay honest on a busy machine); failures become `OOM` rows and the sweep
/// continues.
pub fn sweep_context_lengths(
    base: &RunConfig,
    lengths: &[usize],
    strategies: &[StrategyConfig],
) -> Result<SweepTable, ConfigError> {
    let mut rows = Vec::new();
    for &s in lengths {
        let mut standard_peak: Option<u64> = None;
        for strat in strategies {
            let mut cfg = base.clone();
            cfg.seq_len = s;
            cfg.strategy = strat.kind;
            cfg.partition_size = strat.partition_size;
            cfg.offload = strat.offload;
            let report = run_experiment(&cfg)?;
            if strat.kind == StrategyKind::Standard && !strat.offload {
                standard_peak = (report.failed_stage.is_none()).then_some(report.device_peak_bytes);
            }
            let ratio = match (&report.failed_stage, standard_peak) {
                (None, Some(base_peak)) if base_peak > 0 => {
                    Some(report.device_peak_bytes as f64 / base_peak as f64)
                }
                _ => None,
            };
            rows.push(SweepRow {
                seq_len: s,
                strategy_label: report.strategy_label.clone(),
                failed_stage: report.failed_stage.clone(),
                device_peak_bytes: report.device_peak_bytes,
                host_peak_bytes: report.host_peak_bytes,
                ratio_vs_standard: ratio,
                prefill_wall_seconds: report.prefill_wall_seconds,
                decode_tokens_per_second: report.decode_tokens_per_second,
                simulated_transfer_seconds: report.ledger.simulated_transfer_seconds,
            });
        }
    }
    Ok(SweepTable { rows })
}

/// The default sweep strategy set: the baseline, offload alone,
/// mini-sequence alone, the combination, and chunked prefill.
pub fn default_sweep_strategies(partition_size: usize) -> Vec<StrategyConfig> {
    vec![
        StrategyConfig::standard(),
        StrategyConfig {
            kind: StrategyKind::Standard,
            partition_size,
            offload: true,
        },
        StrategyConfig::mini_sequence(partition_size, false),
        StrategyConfig::mini_sequence(partition_size, true),
        StrategyConfig::chunked(partition_size),
    ]
}

// ── Equivalence checking ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub label: String,
    pub logits_match: bool,
    pub cache_match: bool,
    pub continuation_match: bool,
    /// First divergence, as coordinates into logits, cache, or the
    /// generated continuation.
    pub divergence: Option<String>,
}

impl ArmOutcome {
    pub fn passed(&self) -> bool {
        self.logits_match && self.cache_match && self.continuation_match
    }
}

#[derive(Debug, Clone)]
pub struct EquivReport {
    pub seq_len: usize,
    pub passed: bool,
    pub arms: Vec<ArmOutcome>,
}

fn tensor_bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn first_mismatch(a: &[u32], b: &[u32]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| x != y)
}

fn cache_bits(cache: &KvCache) -> Vec<(Vec<u32>, Vec<u32>)> {
    (0..cache.n_layers())
        .map(|l| {
            let lk = cache.layer(l);
            (tensor_bits(&lk.k), tensor_bits(&lk.v))
        })
        .collect()
}

/// Run the standard baseline once as the oracle, then every mini-sequence
/// (offload off and on) and chunked arm for each partition size; compare
/// last logits, caches, and a greedy continuation, all bitwise.
///
/// `perturb_arm` flips one weight sign bit in the given arm before it runs
/// (self-test mode: the checker must catch the divergence).
pub fn equivalence_check(
    base: &RunConfig,
    partition_sizes: &[usize],
    continuation: usize,
    perturb_arm: Option<usize>,
) -> Result<EquivReport, ConfigError> {
    base.validate()?;
    let tokens = synth_tokens(base.seed, base.seq_len, base.vocab_size);
    let model_cfg = base.model_config();

    // Oracle: standard prefill, cache snapshot, then its continuation.
    let mut octx = RunCtx::new(
        base.device_budget.bytes(),
        base.host_budget.bytes(),
        base.bandwidth,
    );
    let omodel = Model::new(model_cfg.clone(), &octx.device)
        .map_err(|e| ConfigError::Invalid(format!("oracle init exceeded budget: {e}")))?;
    let mut oracle = strategies::prefill_standard(&omodel, &tokens, &mut octx)
        .map_err(|e| ConfigError::Invalid(format!("oracle prefill exceeded budget: {e}")))?;
    let oracle_logits = tensor_bits(&oracle.last_logits);
    let oracle_cache = cache_bits(&oracle.cache);
    let oracle_continuation = strategies::decode_greedy(
        &omodel,
        &oracle.last_logits,
        &mut oracle.cache,
        continuation,
        &mut octx,
    )
    .map_err(|e| ConfigError::Invalid(format!("oracle decode exceeded budget: {e}")))?;

    let mut arms = Vec::new();
    let mut arm_list: Vec<StrategyConfig> = Vec::new();
    for &c in partition_sizes {
        arm_list.push(StrategyConfig::mini_sequence(c, false));
        arm_list.push(StrategyConfig::mini_sequence(c, true));
        arm_list.push(StrategyConfig::chunked(c));
    }

    for (idx, strat) in arm_list.iter().enumerate() {
        let label = format!("{} C={}", strat.label(), strat.partition_size);
        let mut ctx = RunCtx::new(
            base.device_budget.bytes(),
            base.host_budget.bytes(),
            base.bandwidth,
        );
        let mut model = Model::new(model_cfg.clone(), &ctx.device)
            .map_err(|e| ConfigError::Invalid(format!("arm init exceeded budget: {e}")))?;
        if perturb_arm == Some(idx) {
            // Self-test: flip one sign bit and expect the checker to see it.
            let w = model.weights.layers[0].w_gate.data_mut();
            w[0] = f32::from_bits(w[0].to_bits() ^ 0x8000_0000);
        }
        let mut res = strategies::prefill(&model, &tokens, strat, &mut ctx)
            .map_err(|e| ConfigError::Invalid(format!("arm prefill exceeded budget: {e}")))?;

        let mut divergence = None;
        let arm_logits = tensor_bits(&res.last_logits);
        let logits_match = match first_mismatch(&oracle_logits, &arm_logits) {
            None => true,
            Some(i) => {
                divergence = Some(format!(
                    "last_logits[{i}]: oracle 0x{:08x} vs arm 0x{:08x}",
                    oracle_logits.get(i).copied().unwrap_or(0),
                    arm_logits.get(i).copied().unwrap_or(0),
                ));
                false
            }
        };

        let arm_cache = cache_bits(&res.cache);
        let mut cache_match = true;
        'cache: for (l, ((ok, ov), (ak, av))) in
            oracle_cache.iter().zip(&arm_cache).enumerate()
        {
            for (name, o, a) in [("K", ok, ak), ("V", ov, av)] {
                if let Some(i) = first_mismatch(o, a) {
                    cache_match = false;
                    let kv_dim = model_cfg.kv_dim();
                    if divergence.is_none() {
                        divergence = Some(format!(
                            "cache layer {l} {name} row {} col {}",
                            i / kv_dim,
                            i % kv_dim
                        ));
                    }
                    break 'cache;
                }
            }
        }

        strategies::reload_cache(&mut res.cache, &mut ctx)
            .map_err(|e| ConfigError::Invalid(format!("arm reload exceeded budget: {e}")))?;
        let arm_continuation = strategies::decode_greedy(
            &model,
            &res.last_logits,
            &mut res.cache,
            continuation,
            &mut ctx,
        )
        .map_err(|e| ConfigError::Invalid(format!("arm decode exceeded budget: {e}")))?;
        let continuation_match = oracle_continuation == arm_continuation;
        if !continuation_match && divergence.is_none() {
            let i = oracle_continuation
                .iter()
                .zip(&arm_continuation)
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            divergence = Some(format!(
                "continuation[{i}]: oracle token {} vs arm token {}",
                oracle_continuation.get(i).copied().unwrap_or(0),
                arm_continuation.get(i).copied().unwrap_or(0),
            ));
        }

        arms.push(ArmOutcome {
            label,
            logits_match,
            cache_match,
            continuation_match,
            divergence,
        });
    }

    Ok(EquivReport {
        seq_len: base.seq_len,
        passed: arms.iter().all(|a| a.passed()),
        arms,
    })
}

// ── Emission ────────────────────────────────────────────────────────

/// Write the memory trace (prefill snapshots, then one row per decoded
/// token) as CSV.
pub fn emit_trace(report: &RunReport, path: &Path) -> std::io::Result<()> {
    let csv = crate::memtrack::snapshots_to_csv(&report.snapshots);
    std::fs::write(path, csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Write a run report to `path` in the chosen format.
pub fn emit_report(report: &RunReport, path: &Path, format: ReportFormat) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    match format {
        ReportFormat::Json => file.write_all(report.to_json().as_bytes()),
        ReportFormat::Csv => file.write_all(report.to_csv().as_bytes()),
    }
}
