//! Command-line frontend for the KV cache block-sharing engine.
//!
//! Subcommands: `generate` (synthetic traces + KV dumps), `analyze`
//! (step-redundancy reports), `simulate` (paired batching runs with sharing
//! off/on), `verify-bounds` (randomized perturbation-bound sweep).
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use memshare_core::blockstore::CacheDims;
use memshare_core::bounds::{sweep_report, SweepConfig};
use memshare_core::kvgen::{
    generate_trace, kv_for_trace, read_traces_jsonl, KVStates, ProjectionSet, Trace, TraceConfig,
};
use memshare_core::schedsim::{compare_runs, scripted_requests, SimConfig, SimMetrics};
use memshare_core::simfilter::{
    all_pairs_block_distance, calibrate_block_threshold, distance_matrix_csv,
    similarity_ratio_csv, similarity_report_csv, Thresholds,
};
use memshare_core::{Error, Result};

use config::{load_file_config, resolve_seed, AnalyzeFile, GenerateFile, SimulateFile, VerifyBoundsFile};
use report::{write_csv_report, write_json_report};

#[derive(Parser)]
#[command(
    name = "memshare",
    version,
    about = "KV cache block sharing: synthetic traces, redundancy analysis, batching simulation, bound verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic traces with planted redundancy plus KV dumps
    Generate(GenerateArgs),
    /// Report step-level redundancy (and optionally block distances) for a trace file
    Analyze(AnalyzeArgs),
    /// Run paired batching simulations with sharing disabled and enabled
    Simulate(SimulateArgs),
    /// Sweep randomized perturbation trials against the attention bounds
    VerifyBounds(VerifyBoundsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file (TOML or JSON); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of traces (sequences) to generate, seeded seed..seed+n-1
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_len_min: Option<usize>,
    #[arg(long)]
    step_len_max: Option<usize>,
    #[arg(long)]
    vocab_size: Option<u32>,
    /// Probability that a step is a near-copy of an earlier step
    #[arg(long)]
    redundancy: Option<f64>,
    /// Per-token resample probability within copied steps
    #[arg(long)]
    mutation: Option<f64>,
    /// KV noise scale
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Write only the trace JSONL, no KV dumps
    #[arg(long)]
    skip_kv: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trace JSONL to analyze
    #[arg(long)]
    trace: Option<PathBuf>,
    /// MSKV dump (file for a single-sequence trace, or a directory of
    /// kv-<seq_id>.mskv files); enables block-distance matrices
    #[arg(long)]
    kv: Option<PathBuf>,
    /// Redundancy thresholds for the reports
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of paired runs at consecutive seeds; reports per-seed and mean gain
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    block_budget: Option<usize>,
    #[arg(long)]
    max_ticks: Option<u64>,
    #[arg(long)]
    evaluator_period: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyBoundsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per (epsilon, delta, t, d_h) grid cell
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    head_dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    t_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    delta_grid: Option<Vec<f64>>,
    /// Test hook: scales every bound before comparison
    #[arg(long, hide = true)]
    bound_scale: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::VerifyBounds(args) => cmd_verify_bounds(args),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────

fn cmd_generate(args: GenerateArgs) -> Result<i32> {
    let file: GenerateFile = load_file_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let traces_n = args.traces.or(file.traces).unwrap_or(1);
    let steps = args.steps.or(file.steps).unwrap_or(16);
    let step_len_min = args.step_len_min.or(file.step_len_min).unwrap_or(32);
    let step_len_max = args.step_len_max.or(file.step_len_max).unwrap_or(48);
    let vocab_size = args.vocab_size.or(file.vocab_size).unwrap_or(512);
    let redundancy = args.redundancy.or(file.redundancy).unwrap_or(0.3);
    let mutation = args.mutation.or(file.mutation).unwrap_or(0.0);
    let eta = args.eta.or(file.eta).unwrap_or(0.0);
    let layers = args.layers.or(file.layers).unwrap_or(4);
    let heads = args.heads.or(file.heads).unwrap_or(2);
    let head_dim = args.head_dim.or(file.head_dim).unwrap_or(8);
    let embed_dim = args.embed_dim.or(file.embed_dim).unwrap_or(32);
    let skip_kv = args.skip_kv || file.skip_kv.unwrap_or(false);
    let out_dir = args
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("memshare-out"));
    if traces_n == 0 {
        return Err(Error::InvalidArgument("traces must be at least 1".into()));
    }

    ensure_dir(&out_dir)?;
    let proj = ProjectionSet::new(seed, layers, heads, head_dim, embed_dim)?;

    let mut traces = Vec::with_capacity(traces_n);
    for i in 0..traces_n {
        let cfg = TraceConfig {
            seed: seed + i as u64,
            num_steps: steps,
            step_len_range: (step_len_min, step_len_max),
            vocab_size,
            redundancy_prob: redundancy,
            mutation_rate: mutation,
        };
        traces.push(generate_trace(&cfg)?);
    }

    let trace_path = out_dir.join("trace.jsonl");
    let mut jsonl = Vec::new();
    memshare_core::kvgen::write_traces_jsonl(&mut jsonl, &traces)?;
    fs::write(&trace_path, jsonl)?;

    for (i, trace) in traces.iter().enumerate() {
        let copies = trace
            .redundancy_labels
            .iter()
            .filter(|l| l.is_some())
            .count();
        if !skip_kv {
            let kv = kv_for_trace(trace, &proj, eta, seed + i as u64)?;
            let kv_path = out_dir.join(format!("kv-{}.mskv", trace.seq_id));
            let mut buf = Vec::new();
            kv.write_mskv1(&mut buf)?;
            fs::write(&kv_path, buf)?;
        }
        println!(
            "{}: {} steps, {} tokens, {} planted copies",
            trace.seq_id,
            trace.steps.len(),
            trace.total_tokens(),
            copies
        );
    }
    println!("wrote {}", trace_path.display());
    Ok(0)
}

// ── analyze ─────────────────────────────────────────────────────────

fn load_kv_for(trace: &Trace, kv_path: &Path, single: bool) -> Result<KVStates> {
    let path = if kv_path.is_dir() {
        kv_path.join(format!("kv-{}.mskv", trace.seq_id))
    } else if single {
        kv_path.to_path_buf()
    } else {
        return Err(Error::InvalidArgument(
            "trace has multiple sequences; pass a directory of kv-<seq_id>.mskv dumps".into(),
        ));
    };
    let bytes = fs::read(&path)?;
    KVStates::read_mskv1(&mut &bytes[..])
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<i32> {
    let file: AnalyzeFile = load_file_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let trace_path = args
        .trace
        .or(file.trace)
        .ok_or_else(|| Error::InvalidArgument("--trace is required".into()))?;
    let kv_path = args.kv.or(file.kv);
    let thresholds = args
        .thresholds
        .or(file.thresholds)
        .unwrap_or_else(|| vec![0.8, 0.9]);
    let block_size = args.block_size.or(file.block_size).unwrap_or(16);
    let out_dir = args
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("memshare-out"));
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("need at least one threshold".into()));
    }

    let text = fs::read(&trace_path)?;
    let traces = read_traces_jsonl(&text[..])?;
    if traces.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} contains no steps",
            trace_path.display()
        )));
    }
    ensure_dir(&out_dir)?;

    let config = json!({
        "trace": trace_path.display().to_string(),
        "thresholds": thresholds,
        "block_size": block_size,
    });

    let report = similarity_report_csv(&traces, &thresholds)?;
    write_csv_report(&out_dir.join("similarity_report.csv"), seed, &config, &report)?;
    let ratios = similarity_ratio_csv(&traces, &thresholds)?;
    write_csv_report(&out_dir.join("similarity_ratio.csv"), seed, &config, &ratios)?;

    if let Some(kv_path) = kv_path {
        for trace in &traces {
            let kv = load_kv_for(trace, &kv_path, traces.len() == 1)?;
            let matrix = all_pairs_block_distance(&kv, block_size)?;
            let csv = distance_matrix_csv(&matrix);
            write_csv_report(
                &out_dir.join(format!("block_distance_{}.csv", trace.seq_id)),
                seed,
                &config,
                &csv,
            )?;
        }
    }

    for trace in &traces {
        let mut line = format!("{}:", trace.seq_id);
        for t in &thresholds {
            let r = memshare_core::simfilter::similarity_ratio(trace, *t)?;
            line.push_str(&format!(" ratio@{t}={r:.4}"));
        }
        println!("{line}");
    }
    println!("wrote reports to {}", out_dir.display());
    Ok(0)
}

// ── simulate ────────────────────────────────────────────────────────

fn occupancy_csv(metrics: &SimMetrics) -> String {
    let mut out = String::from("tick,allocated,running,waiting,swapped\n");
    for s in &metrics.occupancy {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.tick, s.allocated, s.running, s.waiting, s.swapped
        ));
    }
    out
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let file: SimulateFile = load_file_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let seeds = args.seeds.or(file.seeds).unwrap_or(5);
    let block_budget = args.block_budget.or(file.block_budget).unwrap_or(48);
    let max_ticks = args.max_ticks.or(file.max_ticks).unwrap_or(200_000);
    let evaluator_period = args
        .evaluator_period
        .or(file.evaluator_period)
        .unwrap_or(16);
    let dims = file.dims.unwrap_or_else(|| CacheDims::new(4, 2, 8, 16));
    let workload = file.workload.unwrap_or_default();
    let th_file = file.thresholds.unwrap_or_default();
    let step_threshold = th_file.step_threshold.unwrap_or(0.8);
    let top_k = th_file.top_k.unwrap_or(8);
    let out_dir = args
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("memshare-out"));
    if seeds == 0 {
        return Err(Error::InvalidArgument("seeds must be at least 1".into()));
    }
    ensure_dir(&out_dir)?;

    let mut gain_rows = String::from("seed,baseline_throughput,shared_throughput,throughput_gain\n");
    let mut gain_sum = 0.0;
    let base_config = json!({
        "block_budget": block_budget,
        "max_ticks": max_ticks,
        "evaluator_period": evaluator_period,
        "dims": dims,
        "workload": workload,
        "step_threshold": step_threshold,
        "top_k": top_k,
        "seeds": seeds,
    });

    for s in 0..seeds {
        let run_seed = seed + s;
        let requests = scripted_requests(&workload, &dims, run_seed)?;
        // distance ceiling: explicit, or the 10th percentile of the all-pairs
        // distances on this run's first request
        let block_distance_threshold = match th_file.block_distance_threshold {
            Some(v) => v,
            None => calibrate_block_threshold(&requests[0].kv, dims.block_size, 0.10)?,
        };
        let cfg = SimConfig {
            block_budget,
            dims: dims.clone(),
            thresholds: Thresholds {
                step_threshold,
                block_distance_threshold,
                top_k,
            },
            sharing_enabled: true,
            max_ticks,
            evaluator_period,
        };
        let comparison = compare_runs(&cfg, &requests)?;

        let mut run_config = base_config.clone();
        run_config["block_distance_threshold"] = json!(block_distance_threshold);
        run_config["run_seed"] = json!(run_seed);
        for (label, metrics) in [
            ("baseline", &comparison.baseline),
            ("shared", &comparison.shared),
        ] {
            write_json_report(
                &out_dir.join(format!("sim_metrics_{label}_{run_seed}.json")),
                run_seed,
                &run_config,
                "metrics",
                serde_json::to_value(metrics)?,
            )?;
            write_csv_report(
                &out_dir.join(format!("occupancy_{label}_{run_seed}.csv")),
                run_seed,
                &run_config,
                &occupancy_csv(metrics),
            )?;
        }
        gain_rows.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            run_seed,
            comparison.baseline.throughput,
            comparison.shared.throughput,
            comparison.throughput_gain
        ));
        gain_sum += comparison.throughput_gain;
        println!(
            "seed {run_seed}: baseline {:.4} tok/tick, shared {:.4} tok/tick, gain {:+.2}%",
            comparison.baseline.throughput,
            comparison.shared.throughput,
            100.0 * comparison.throughput_gain
        );
    }
    let mean_gain = gain_sum / seeds as f64;
    gain_rows.push_str(&format!("mean,,,{mean_gain:.6}\n"));
    write_csv_report(
        &out_dir.join("gain_summary.csv"),
        seed,
        &base_config,
        &gain_rows,
    )?;
    println!("mean gain over {seeds} seeds: {:+.2}%", 100.0 * mean_gain);
    Ok(0)
}

// ── verify-bounds ───────────────────────────────────────────────────

fn cmd_verify_bounds(args: VerifyBoundsArgs) -> Result<i32> {
    let file: VerifyBoundsFile = load_file_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let defaults = SweepConfig::default();
    let cfg = SweepConfig {
        head_dims: args.head_dims.or(file.head_dims).unwrap_or(defaults.head_dims),
        t_values: args.t_values.or(file.t_values).unwrap_or(defaults.t_values),
        epsilon_grid: args
            .epsilon_grid
            .or(file.epsilon_grid)
            .unwrap_or(defaults.epsilon_grid),
        delta_grid: args
            .delta_grid
            .or(file.delta_grid)
            .unwrap_or(defaults.delta_grid),
        trials_per_cell: args.trials.or(file.trials).unwrap_or(defaults.trials_per_cell),
        seed,
        bound_scale: args.bound_scale.unwrap_or(1.0),
    };
    let out_dir = args
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("memshare-out"));
    ensure_dir(&out_dir)?;

    let report = sweep_report(&cfg)?;
    let config = json!({
        "head_dims": cfg.head_dims,
        "t_values": cfg.t_values,
        "epsilon_grid": cfg.epsilon_grid,
        "delta_grid": cfg.delta_grid,
        "trials_per_cell": cfg.trials_per_cell,
        "bound_scale": cfg.bound_scale,
    });
    write_csv_report(
        &out_dir.join("bound_sweep.csv"),
        seed,
        &config,
        &report.to_csv(),
    )?;

    if report.passed() {
        println!(
            "bound sweep clean: {} trials, 0 violations",
            report.total_trials
        );
        Ok(0)
    } else {
        eprintln!(
            "bound sweep FAILED: {} violations in {} trials",
            report.violations.len(),
            report.total_trials
        );
        for v in report.violations.iter().take(10) {
            eprintln!("  {v}");
        }
        Ok(1)
    }
}
