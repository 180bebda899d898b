//! `kvtier`: deterministic experiment driver for the tiered KV-cache
//! simulator. Every subcommand reads a TOML config, writes snake_case CSV,
//! and is reproducible per seed.
//!
//! Exit codes: 0 success, 1 failed validation, 2 configuration or I/O
//! error.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use kvtier::cost::{
    per_token_kv_bytes, scaling_projection, transfer_latency_ps, DeploymentScenario, Direction,
    ModelShape, TransferModelParams,
};
use kvtier::experiment::{
    default_overhead_fraction, extract_schedule, replay_hierarchy, run_recall, Policy,
};
use kvtier::props::run_all;
use kvtier::stats::summarize;
use kvtier::workload::{
    cumulative_scores, gen_longtail_trace, gen_recall_task, load_trace, measure_concentration,
    save_trace,
};

use config::{CensusConfig, CostsConfig, GridConfig, RecallConfig, TraceConfig};

/// Reference deployment used for byte-denominated census columns: a dense
/// 7B-class model (28 layers, 28 KV heads, d=128, fp16).
const REFERENCE_SHAPE: ModelShape = ModelShape::new(28, 28, 128, 2);

#[derive(Parser)]
#[command(name = "kvtier", about = "Tiered KV-cache hierarchy simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a calibrated long-tail attention trace file.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep (beta, evict_ratio, seed) over long-tail traces; one CSV row
    /// per cell.
    RunGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Needle-recall comparison across retention policies and budgets.
    Recall {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer latencies, overhead fraction, and deployment projections.
    ReportCosts {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving transfers.csv, overhead.csv, scaling.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-step tier census of one hierarchy run.
    Census {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the named invariant suite; exits 1 if any property fails.
    ValidateProps {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print shape and concentration of an existing trace file.
    Inspect {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn cmd_gen_trace(config: &Path, out: &Path) -> Result<()> {
    let cfg: TraceConfig = read_config(config)?;
    let trace = gen_longtail_trace(&cfg.trace.shape(), cfg.trace.top20_target, cfg.trace.seed)?;
    let share = measure_concentration(&cumulative_scores(&trace), 0.2)?;
    save_trace(&trace, out)?;
    println!(
        "wrote {} ({} positions, top-20% share {:.4})",
        out.display(),
        trace.shape.prompt_len + trace.shape.chain_len,
        share
    );
    Ok(())
}

#[derive(Debug)]
struct GridRow {
    beta: f64,
    evict_ratio: f64,
    seed: u64,
    top20_share: f64,
    final_t0: usize,
    final_t1: usize,
    final_t2: usize,
    final_t3: usize,
    visible_bytes: u64,
    max_bound_ratio: f64,
    prefetch_tokens_total: u64,
    offload_tokens_total: u64,
}

fn cmd_run_grid(config: &Path, out: &Path, jobs: Option<usize>) -> Result<()> {
    let cfg: GridConfig = read_config(config)?;
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }

    let mut cells = Vec::new();
    for &seed in &cfg.grid.seeds {
        for &beta in &cfg.grid.betas {
            for &evict_ratio in &cfg.grid.evict_ratios {
                cells.push((beta, evict_ratio, seed));
            }
        }
    }

    let shape = cfg.trace.shape();
    let target = cfg.trace.top20_target;
    let rows: Result<Vec<GridRow>> = cells
        .par_iter()
        .map(|&(beta, evict_ratio, seed)| {
            let trace = gen_longtail_trace(&shape, target, seed)?;
            let share = measure_concentration(&cumulative_scores(&trace), 0.2)?;
            let hier = kvtier::tier::HierarchyConfig {
                beta,
                evict_ratio,
                prompt_len: shape.prompt_len,
                ..Default::default()
            };
            let run = replay_hierarchy(&trace, &hier, true)?;
            let census = run.outcomes.last().expect("nonempty run").census;
            let max_bound_ratio = run
                .bound_checks
                .iter()
                .map(|b| if b.bound > 0.0 { b.measured_error / b.bound } else { 0.0 })
                .fold(0.0f64, f64::max);
            let schedule = extract_schedule(&run.outcomes);
            let prefetch: u64 = schedule
                .iter()
                .filter(|e| e.direction == Direction::CpuToGpu)
                .map(|e| e.tokens)
                .sum();
            let offload: u64 = schedule
                .iter()
                .filter(|e| e.direction == Direction::GpuToCpu)
                .map(|e| e.tokens)
                .sum();
            Ok(GridRow {
                beta,
                evict_ratio,
                seed,
                top20_share: share,
                final_t0: census.t0,
                final_t1: census.t1,
                final_t2: census.t2,
                final_t3: census.t3,
                visible_bytes: census.visible_bytes(per_token_kv_bytes(&REFERENCE_SHAPE)),
                max_bound_ratio,
                prefetch_tokens_total: prefetch,
                offload_tokens_total: offload,
            })
        })
        .collect();
    let mut rows = rows?;
    // Deterministic output order regardless of worker scheduling.
    rows.sort_by(|a, b| {
        (a.seed, a.beta, a.evict_ratio)
            .partial_cmp(&(b.seed, b.beta, b.evict_ratio))
            .unwrap()
    });

    let mut w = csv::Writer::from_path(out)?;
    w.write_record([
        "beta",
        "evict_ratio",
        "seed",
        "top20_share",
        "final_t0",
        "final_t1",
        "final_t2",
        "final_t3",
        "visible_bytes",
        "max_bound_ratio",
        "prefetch_tokens_total",
        "offload_tokens_total",
    ])?;
    for r in &rows {
        w.write_record([
            format!("{}", r.beta),
            format!("{}", r.evict_ratio),
            format!("{}", r.seed),
            format!("{:.6}", r.top20_share),
            format!("{}", r.final_t0),
            format!("{}", r.final_t1),
            format!("{}", r.final_t2),
            format!("{}", r.final_t3),
            format!("{}", r.visible_bytes),
            format!("{:.6}", r.max_bound_ratio),
            format!("{}", r.prefetch_tokens_total),
            format!("{}", r.offload_tokens_total),
        ])?;
    }
    w.flush()?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn parse_policy(name: &str) -> Result<Policy> {
    Ok(match name {
        "full" => Policy::Full,
        "hierarchy" => Policy::Hierarchy,
        "streaming" => Policy::Streaming,
        "h2o" => Policy::H2o,
        "random" => Policy::Random,
        other => bail!("unknown policy `{other}`"),
    })
}

fn cmd_recall(config: &Path, out: &Path) -> Result<()> {
    let cfg: RecallConfig = read_config(config)?;
    let (task, trace) = gen_recall_task(&cfg.task.shape(), cfg.task.n_needles, cfg.task.seed)?;
    let hier = kvtier::tier::HierarchyConfig {
        beta: cfg.recall.beta,
        evict_ratio: cfg.recall.evict_ratio,
        prompt_len: cfg.task.prompt_len,
        ..Default::default()
    };

    let mut groups: Vec<(String, Vec<bool>)> = Vec::new();
    let mut meta: Vec<(String, f64, f64)> = Vec::new();
    for policy_name in &cfg.recall.policies {
        let policy = parse_policy(policy_name)?;
        for &budget in &cfg.recall.budget_ratios {
            let outcome = run_recall(&trace, &task, policy, budget, &hier, cfg.task.seed)?;
            let label = format!("{}@{budget}", policy.name());
            meta.push((label.clone(), budget, outcome.recall));
            groups.push((label, outcome.hits));
        }
    }
    let rows = summarize(&groups, cfg.recall.confidence)?;

    let mut w = csv::Writer::from_path(out)?;
    w.write_record([
        "policy",
        "budget_ratio",
        "recall",
        "needles_hit",
        "needles_total",
        "ci_lower",
        "ci_upper",
    ])?;
    for (row, (label, budget, recall)) in rows.iter().zip(&meta) {
        let policy = label.split('@').next().unwrap();
        w.write_record([
            policy.to_string(),
            format!("{budget}"),
            format!("{recall:.4}"),
            format!("{}", row.successes),
            format!("{}", row.trials),
            format!("{:.4}", row.ci_lower),
            format!("{:.4}", row.ci_upper),
        ])?;
    }
    w.flush()?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn cmd_report_costs(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg: CostsConfig = read_config(config)?;
    std::fs::create_dir_all(out_dir)?;
    let params = TransferModelParams::pcie_default();

    let mut w = csv::Writer::from_path(out_dir.join("transfers.csv"))?;
    w.write_record(["tokens", "direction", "latency_ps", "latency_s"])?;
    for &tokens in &cfg.transfer.token_counts {
        for (dir, name) in [(Direction::GpuToCpu, "gpu_to_cpu"), (Direction::CpuToGpu, "cpu_to_gpu")]
        {
            let ps = transfer_latency_ps(tokens, dir, &params);
            w.write_record([
                format!("{tokens}"),
                name.to_string(),
                format!("{ps}"),
                format!("{:.9}", ps as f64 / 1e12),
            ])?;
        }
    }
    w.flush()?;

    let overhead = default_overhead_fraction(&params)?;
    let mut w = csv::Writer::from_path(out_dir.join("overhead.csv"))?;
    w.write_record(["schedule", "overhead_fraction"])?;
    w.write_record(["default_hierarchy", &format!("{overhead:.6}")])?;
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("scaling.csv"))?;
    w.write_record([
        "label",
        "kv_bytes",
        "kv_fraction",
        "savings_bytes",
        "per_token_kv_bytes",
    ])?;
    for s in &cfg.scenario {
        let scenario = DeploymentScenario {
            label: s.label.clone(),
            shape: s.shape(),
            batch_size: s.batch_size,
            seq_len: s.seq_len,
            weight_bytes: s.weight_bytes,
            offload_fraction: s.offload_fraction,
        };
        let p = scaling_projection(&scenario);
        w.write_record([
            s.label.clone(),
            format!("{}", p.kv_bytes),
            format!("{:.6}", p.kv_fraction),
            format!("{}", p.savings_bytes),
            format!("{}", per_token_kv_bytes(&s.shape())),
        ])?;
    }
    w.flush()?;
    println!(
        "wrote {}/{{transfers,overhead,scaling}}.csv (overhead {:.2}%)",
        out_dir.display(),
        overhead * 100.0
    );
    Ok(())
}

fn cmd_census(config: &Path, out: &Path) -> Result<()> {
    let cfg: CensusConfig = read_config(config)?;
    let trace =
        gen_longtail_trace(&cfg.trace.shape(), cfg.trace.top20_target, cfg.trace.seed)?;
    let hier = cfg.hierarchy.to_config(cfg.trace.prompt_len);
    let run = replay_hierarchy(&trace, &hier, false)?;
    let per_token = per_token_kv_bytes(&REFERENCE_SHAPE);

    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["step", "t0", "t1", "t2", "t3", "visible_bytes", "cpu_bytes"])?;
    for o in &run.outcomes {
        let c = o.census;
        w.write_record([
            format!("{}", c.step),
            format!("{}", c.t0),
            format!("{}", c.t1),
            format!("{}", c.t2),
            format!("{}", c.t3),
            format!("{}", c.visible_bytes(per_token)),
            format!("{}", c.cpu_bytes(per_token)),
        ])?;
    }
    w.flush()?;
    println!("wrote {} ({} rows)", out.display(), run.outcomes.len());
    Ok(())
}

fn cmd_validate_props(seed: u64) -> Result<bool> {
    let results = run_all(seed);
    let mut all_pass = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", r.name, r.detail);
        all_pass &= r.passed;
    }
    println!(
        "{}/{} properties passed",
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    Ok(all_pass)
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let trace = load_trace(path)?;
    let share = measure_concentration(&cumulative_scores(&trace), 0.2)?;
    let s = &trace.shape;
    println!(
        "layers={} heads={} head_dim={} prompt_len={} chain_len={} top20_share={:.4}",
        s.n_layers, s.n_heads, s.head_dim, s.prompt_len, s.chain_len, share
    );
    let nan_steps: BTreeSet<usize> = trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, st)| !st.nan_layers.is_empty())
        .map(|(i, _)| i)
        .collect();
    println!("steps_with_nan_layers={}", nan_steps.len());
    Ok(())
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTrace { config, out } => cmd_gen_trace(&config, &out).map(|_| true),
        Command::RunGrid { config, out, jobs } => {
            cmd_run_grid(&config, &out, jobs).map(|_| true)
        }
        Command::Recall { config, out } => cmd_recall(&config, &out).map(|_| true),
        Command::ReportCosts { config, out_dir } => {
            cmd_report_costs(&config, &out_dir).map(|_| true)
        }
        Command::Census { config, out } => cmd_census(&config, &out).map(|_| true),
        Command::ValidateProps { seed } => cmd_validate_props(seed),
        Command::Inspect { trace } => cmd_inspect(&trace).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
