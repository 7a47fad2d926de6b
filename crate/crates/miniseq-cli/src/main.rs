//! Command-line harness: `run`, `sweep`, `maxlen`, `equiv`, and `trace`.
//!
//! Exit codes are stable for scripting: 0 success, 1 equivalence mismatch,
//! 2 configuration or I/O error, 3 budget exceeded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use miniseq::analytics::{predict_max_context, AnalyticalInputs};
use miniseq::config::{Budget, RunConfig};
use miniseq::model::Model;
use miniseq::runner::{self, default_sweep_strategies, ReportFormat, SweepTable};
use miniseq::strategies::{StrategyConfig, StrategyKind};
use miniseq::RunCtx;

const EXIT_MISMATCH: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "miniseq",
    about = "Deterministic transformer inference engine with two-tier memory accounting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Prefill strategy.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,

    /// Mini-sequence / chunk token count C.
    #[arg(long)]
    partition_size: Option<usize>,

    /// Offload KV to host during prefill (reloaded before decode).
    #[arg(long)]
    offload: bool,

    /// Prompt length in tokens.
    #[arg(long)]
    seq_len: Option<usize>,

    /// Greedy decode steps after prefill.
    #[arg(long)]
    decode_tokens: Option<usize>,

    /// Seed for weights and the synthetic prompt.
    #[arg(long)]
    seed: Option<u64>,

    /// Device pool budget in bytes, or "unlimited".
    #[arg(long)]
    device_budget: Option<Budget>,

    /// Host pool budget in bytes, or "unlimited".
    #[arg(long)]
    host_budget: Option<Budget>,

    /// Simulated transfer bandwidth in bytes/second.
    #[arg(long)]
    bandwidth: Option<u64>,

    /// Output file path.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format for reports.
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    match s {
        "standard" => Ok(StrategyKind::Standard),
        "miniseq" => Ok(StrategyKind::MiniSequence),
        "chunked" => Ok(StrategyKind::ChunkedPrefill),
        _ => Err(format!(
            "unknown strategy {s:?} (expected standard, miniseq, or chunked)"
        )),
    }
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    match s {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        _ => Err(format!("unknown format {s:?} (expected json or csv)")),
    }
}

fn parse_strategy_spec(s: &str) -> Result<StrategyConfig, String> {
    let (kind_str, offload) = match s.strip_suffix("+offload") {
        Some(base) => (base, true),
        None => (s, false),
    };
    let kind = parse_strategy(kind_str)?;
    let cfg = StrategyConfig {
        kind,
        partition_size: 2048,
        offload,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Subcommand)]
enum Command {
    /// One experiment: prefill, reload when offloaded, decode, report.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of context lengths and strategies; emit a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated context lengths.
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 4096, 16384, 65536])]
        lengths: Vec<usize>,
        /// Comma-separated strategies; `+offload` marks offload variants.
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy_spec)]
        strategies: Option<Vec<StrategyConfig>>,
    },
    /// Search the largest context that fits the device budget.
    Maxlen {
        #[command(flatten)]
        common: Common,
        /// Upper bound for the search.
        #[arg(long, default_value_t = 1 << 22)]
        ceiling: usize,
    },
    /// Check that every strategy reproduces the standard baseline exactly.
    Equiv {
        #[command(flatten)]
        common: Common,
        /// Partition/chunk sizes to test.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 16, 256, 2048])]
        partition_sizes: Vec<usize>,
        /// Greedy continuation length compared per arm.
        #[arg(long, default_value_t = 20)]
        continuation: usize,
        /// Self-test: flip one weight bit in the first arm; the checker
        /// must report the divergence (the command then exits non-zero).
        #[arg(long)]
        self_test_perturb: bool,
    },
    /// Run one experiment and write its memory trace CSV.
    Trace {
        #[command(flatten)]
        common: Common,
    },
}

fn build_config(common: &Common, default_decode: usize) -> Result<RunConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| e.to_string())?,
        None => RunConfig {
            decode_tokens: default_decode,
            ..RunConfig::default()
        },
    };
    if let Some(s) = common.strategy {
        cfg.strategy = s;
    }
    if let Some(c) = common.partition_size {
        cfg.partition_size = c;
    }
    if common.offload {
        cfg.offload = true;
    }
    if let Some(s) = common.seq_len {
        cfg.seq_len = s;
    }
    if let Some(n) = common.decode_tokens {
        cfg.decode_tokens = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = common.device_budget {
        cfg.device_budget = b;
    }
    if let Some(b) = common.host_budget {
        cfg.host_budget = b;
    }
    if let Some(b) = common.bandwidth {
        cfg.bandwidth = b;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(common: &Common, trace: bool) -> Result<u8, String> {
    let cfg = build_config(common, 200)?;
    let report = runner::run_experiment(&cfg).map_err(|e| e.to_string())?;

    if trace {
        let path = common
            .out
            .clone()
            .ok_or_else(|| "trace requires --out <path>".to_string())?;
        runner::emit_trace(&report, &path)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        eprintln!(
            "trace: {} rows -> {}",
            report.snapshots.len(),
            path.display()
        );
    } else {
        let format = common.format.unwrap_or(ReportFormat::Json);
        let text = match format {
            ReportFormat::Json => report.to_json(),
            ReportFormat::Csv => report.to_csv(),
        };
        write_or_print(&common.out, &text)?;
    }

    match &report.failed_stage {
        Some(stage) => {
            eprintln!("budget exceeded during {stage}");
            Ok(EXIT_BUDGET)
        }
        None => {
            eprintln!(
                "ok: strategy={} S={} decode={} device_peak={}B prefill={:.3}s decode_rate={:.1} tok/s",
                report.strategy_label,
                report.seq_len,
                report.decode_tokens,
                report.device_peak_bytes,
                report.prefill_wall_seconds.unwrap_or(0.0),
                report.decode_tokens_per_second.unwrap_or(0.0),
            );
            Ok(0)
        }
    }
}

fn cmd_sweep(
    common: &Common,
    lengths: &[usize],
    strategies: &Option<Vec<StrategyConfig>>,
) -> Result<u8, String> {
    let cfg = build_config(common, 32)?;
    let strategies = strategies
        .clone()
        .map(|mut v| {
            for s in &mut v {
                s.partition_size = cfg.partition_size;
            }
            v
        })
        .unwrap_or_else(|| default_sweep_strategies(cfg.partition_size));
    let table: SweepTable =
        runner::sweep_context_lengths(&cfg, lengths, &strategies).map_err(|e| e.to_string())?;
    write_or_print(&common.out, &table.to_csv())?;
    Ok(0)
}

fn cmd_maxlen(common: &Common, ceiling: usize) -> Result<u8, String> {
    // Probes only need one decode step to exercise the reload constraint.
    let cfg = build_config(common, 1)?;
    let outcome = runner::search_max_context(&cfg, ceiling).map_err(|e| e.to_string())?;

    let weights_bytes = {
        let ctx = RunCtx::unbounded();
        let model = Model::new(cfg.model_config(), &ctx.device)
            .map_err(|e| format!("weight init failed: {e}"))?;
        model.weights.total_bytes()
    };
    let mut inputs = AnalyticalInputs::from_model(&cfg.model_config());
    inputs.model_bytes = weights_bytes;
    inputs.offload_overhead_bytes = if cfg.offload { cfg.staging_bytes } else { 0 };
    inputs.device_capacity = cfg.device_budget.bytes();
    let predicted = predict_max_context(&inputs, &cfg.strategy_config(), ceiling as u64);

    let summary = serde_json::json!({
        "strategy": cfg.strategy_config().label(),
        "device_budget": cfg.device_budget.bytes(),
        "max_context": outcome.max_context,
        "verified_fail_at": outcome.max_context + outcome.step,
        "predicted_max_context": predicted,
    });
    write_or_print(
        &common.out,
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    Ok(0)
}

fn cmd_equiv(
    common: &Common,
    partition_sizes: &[usize],
    continuation: usize,
    perturb: bool,
) -> Result<u8, String> {
    let mut cfg = build_config(common, 0)?;
    if common.seq_len.is_none() && common.config.is_none() {
        cfg.seq_len = 257;
    }
    let report =
        runner::equivalence_check(&cfg, partition_sizes, continuation, perturb.then_some(0))
            .map_err(|e| e.to_string())?;

    println!(
        "equivalence vs standard baseline: S={} continuation={}",
        report.seq_len, continuation
    );
    for arm in &report.arms {
        let status = if arm.passed() { "ok" } else { "MISMATCH" };
        match &arm.divergence {
            Some(d) => println!("  {:28} {status}  first divergence: {d}", arm.label),
            None => println!("  {:28} {status}", arm.label),
        }
    }
    if report.passed {
        println!("all arms bitwise-identical");
        Ok(0)
    } else {
        Ok(EXIT_MISMATCH)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common } => cmd_run(common, false),
        Command::Trace { common } => cmd_run(common, true),
        Command::Sweep {
            common,
            lengths,
            strategies,
        } => cmd_sweep(common, lengths, strategies),
        Command::Maxlen { common, ceiling } => cmd_maxlen(common, *ceiling),
        Command::Equiv {
            common,
            partition_sizes,
            continuation,
            self_test_perturb,
        } => cmd_equiv(common, partition_sizes, *continuation, *self_test_perturb),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
    }
}
