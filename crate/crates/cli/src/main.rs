//! Command-line interface: validate network files, solve single dispatch
//! instances, run seeded batch experiments, and compare batch summaries.
//!
//! Exit codes: 0 success; 2 validation/config errors; 3 i/o errors;
//! 4 no feasible point found; 5 solver failure. Set IEGDS_LOG to control log
//! verbosity.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use iegds_core::dispatch::{
    run_baseline, run_two_stage, AlgorithmSettings, BaselineKind, DispatchError, DispatchOutcome,
    OutcomeStatus,
};
use iegds_core::game::assemble;
use iegds_core::netmodel::{self, generate_case, Network, NetworkError};
use rayon::prelude::*;

use config::{ModelSpec, RunConfig};
use report::{
    compare, deviation_stats, eps_pct, print_comparison, status_str, write_comparison,
    write_outcome_files, write_summary, BatchSummary, OutcomeDocument, SummaryRow,
};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NO_FEASIBLE: u8 = 4;
const EXIT_SOLVER: u8 = 5;

#[derive(Parser)]
#[command(name = "iegds", version, about = "Economic dispatch games on coupled electrical-gas networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a network file.
    Validate { file: PathBuf },
    /// Solve one dispatch instance and write outcome.json, trace.csv,
    /// deviations.csv.
    Solve {
        #[arg(short, long)]
        config: PathBuf,
        /// Override the configured model (misoc, pwa, pwaNN, fixed_dir_soc,
        /// soc_pen, soc_scp).
        #[arg(long)]
        model: Option<String>,
        /// Override the piecewise region count.
        #[arg(long)]
        r: Option<usize>,
        /// Override the outer-iteration limit.
        #[arg(long)]
        max_outer: Option<usize>,
        /// Output directory (default: config out_dir or ".").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump the assembled instance as sparse triplets before solving.
        #[arg(long)]
        dump_instance: Option<PathBuf>,
    },
    /// Generate seeded cases and run every configured model on each.
    Batch {
        #[arg(short, long)]
        config: PathBuf,
        /// Concurrent cases (default 1).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare batch summaries over identical case sets.
    Compare {
        summaries: Vec<PathBuf>,
        /// Output directory for compare.csv and compare.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("IEGDS_LOG")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { file } => cmd_validate(&file),
        Command::Solve { config, model, r, max_outer, out, dump_instance } => {
            cmd_solve(&config, model, r, max_outer, out, dump_instance)
        }
        Command::Batch { config, jobs, out } => cmd_batch(&config, jobs, out),
        Command::Compare { summaries, out } => cmd_compare(&summaries, out),
    };
    ExitCode::from(code)
}

fn cmd_validate(file: &Path) -> u8 {
    match netmodel::load_network(file) {
        Ok(net) => {
            println!(
                "ok: {} buses, {} lines, {} gas nodes, {} pipes, H = {}",
                net.buses.len(),
                net.lines.len(),
                net.gas_nodes.len(),
                net.pipes.len(),
                net.horizon.h
            );
            EXIT_OK
        }
        Err(NetworkError::Io(e)) => {
            eprintln!("i/o error: {e}");
            EXIT_IO
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_INVALID
        }
    }
}

struct RunContext {
    settings: AlgorithmSettings,
    pen_weight: f64,
    scp_rounds: usize,
}

/// Runs one model on one network, including the baseline paths (which freeze
/// directions from a fresh two-stage cone run, as in the experiments).
fn run_model(
    network: &Network,
    spec: ModelSpec,
    ctx: &RunContext,
) -> Result<DispatchOutcome, DispatchError> {
    match spec {
        ModelSpec::Game(model) => run_two_stage(network, model, &ctx.settings),
        baseline => {
            let reference =
                run_two_stage(network, iegds_core::game::GasModelChoice::Misoc, &ctx.settings)?;
            let inst = assemble(network, iegds_core::game::GasModelChoice::Misoc)?;
            let directions: Vec<f64> = reference.strategy.z(&inst).to_vec();
            let kind = match baseline {
                ModelSpec::FixedDirSoc => BaselineKind::FixedDirSoc,
                ModelSpec::SocPen => BaselineKind::SocPen { weight: ctx.pen_weight },
                ModelSpec::SocScp => BaselineKind::SocScp { max_rounds: ctx.scp_rounds },
                ModelSpec::Game(_) => unreachable!(),
            };
            run_baseline(network, kind, &directions, &ctx.settings)
        }
    }
}

fn cmd_solve(
    config_path: &Path,
    model: Option<String>,
    r: Option<usize>,
    max_outer: Option<usize>,
    out: Option<PathBuf>,
    dump_instance: Option<PathBuf>,
) -> u8 {
    let mut cfg = match RunConfig::load(config_path) {
        Ok(cfg) => cfg,
        Err(e) => return config_failure(&e),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(r) = r {
        cfg.r = r;
    }
    if let Some(m) = max_outer {
        cfg.algorithm.max_outer = m;
    }
    let out_dir = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));

    let spec = match ModelSpec::parse(&cfg.model, cfg.r) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_INVALID;
        }
    };
    let network = match netmodel::load_network(&cfg.network) {
        Ok(n) => n,
        Err(NetworkError::Io(e)) => {
            eprintln!("i/o error reading {}: {e}", cfg.network.display());
            return EXIT_IO;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_INVALID;
        }
    };

    if let Some(dump) = dump_instance {
        if let ModelSpec::Game(model) = spec {
            match assemble(&network, model) {
                Ok(inst) => {
                    if let Err(e) = std::fs::write(&dump, inst.to_debug_json().to_string()) {
                        eprintln!("cannot write {}: {e}", dump.display());
                        return EXIT_IO;
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    return EXIT_INVALID;
                }
            }
        }
    }

    let ctx = RunContext {
        settings: cfg.algorithm_settings(),
        pen_weight: cfg.soc_pen_weight,
        scp_rounds: cfg.soc_scp_rounds,
    };
    let started = std::time::Instant::now();
    let outcome = match run_model(&network, spec, &ctx) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("solver failure: {e}");
            return EXIT_SOLVER;
        }
    };
    let wall = started.elapsed().as_secs_f64();
    let doc = OutcomeDocument::new(
        spec.label(cfg.r),
        cfg.network.display().to_string(),
        None,
        &outcome,
        wall,
    );
    if let Err(e) = write_outcome_files(&out_dir, &doc) {
        eprintln!("cannot write reports: {e}");
        return EXIT_IO;
    }
    println!(
        "{}: status {}, epsilon {:?}, rho {}, {} outer iterations, {:.2}s",
        doc.model, doc.status, doc.epsilon, doc.rho_final, doc.outer_iterations, wall
    );
    match outcome.status {
        OutcomeStatus::ExactGne | OutcomeStatus::EpsGne => EXIT_OK,
        OutcomeStatus::MaxIterNoFeasible => EXIT_NO_FEASIBLE,
    }
}

fn config_failure(e: &anyhow::Error) -> u8 {
    eprintln!("{e:#}");
    if e.root_cause()
        .downcast_ref::<std::io::Error>()
        .is_some()
    {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

fn cmd_batch(config_path: &Path, jobs: Option<usize>, out: Option<PathBuf>) -> u8 {
    let cfg = match RunConfig::load(config_path) {
        Ok(cfg) => cfg,
        Err(e) => return config_failure(&e),
    };
    if cfg.seeds.is_empty() {
        eprintln!("config field seeds must be non-empty for batch runs");
        return EXIT_INVALID;
    }
    let specs: Vec<(String, ModelSpec)> = {
        let mut v = Vec::new();
        for name in &cfg.models {
            match ModelSpec::parse(name, cfg.r) {
                Ok(s) => v.push((s.label(cfg.r), s)),
                Err(e) => {
                    eprintln!("{e}");
                    return EXIT_INVALID;
                }
            }
        }
        v
    };
    let template = match netmodel::load_network(&cfg.network) {
        Ok(n) => n,
        Err(NetworkError::Io(e)) => {
            eprintln!("i/o error reading {}: {e}", cfg.network.display());
            return EXIT_IO;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_INVALID;
        }
    };
    let out_dir = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("batch-out"));

    let ctx = RunContext {
        settings: cfg.algorithm_settings(),
        pen_weight: cfg.soc_pen_weight,
        scp_rounds: cfg.soc_scp_rounds,
    };

    let mut tasks: Vec<(u64, String, ModelSpec)> = Vec::new();
    for &seed in &cfg.seeds {
        for (label, spec) in &specs {
            tasks.push((seed, label.clone(), *spec));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(1).max(1))
        .build()
        .expect("thread pool");
    let rows: Vec<SummaryRow> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(seed, label, spec)| {
                run_batch_task(&template, &cfg, &ctx, *seed, label, *spec, &out_dir)
            })
            .collect()
    });

    let summary = match write_summary(&out_dir, &cfg.network.display().to_string(), rows) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot write summary: {e}");
            return EXIT_IO;
        }
    };
    println!(
        "batch complete: {} runs, {} successes ({:.0}%), summary in {}",
        summary.aggregate.total,
        summary.aggregate.successes,
        100.0 * summary.aggregate.success_rate,
        out_dir.display()
    );
    if summary.aggregate.successes == 0 {
        EXIT_NO_FEASIBLE
    } else {
        EXIT_OK
    }
}

fn run_batch_task(
    template: &Network,
    cfg: &RunConfig,
    ctx: &RunContext,
    seed: u64,
    label: &str,
    spec: ModelSpec,
    out_dir: &Path,
) -> SummaryRow {
    let failure = |msg: String| SummaryRow {
        seed,
        model: label.to_string(),
        status: "error".into(),
        epsilon: None,
        mean_abs_cost: 0.0,
        eps_pct_of_mean_cost: None,
        rho_final: 0.0,
        outer_iterations: 0,
        mean_abs_deviation: 0.0,
        mean_deviation: 0.0,
        undefined_deviations: 0,
        wall_time_s: 0.0,
        error: Some(msg),
    };
    let network = match generate_case(template, seed, &cfg.knobs) {
        Ok(n) => n,
        Err(e) => return failure(format!("case generation: {e}")),
    };
    let started = std::time::Instant::now();
    let outcome = match run_model(&network, spec, ctx) {
        Ok(o) => o,
        Err(e) => return failure(format!("{e}")),
    };
    let wall = started.elapsed().as_secs_f64();
    let doc = OutcomeDocument::new(
        label.to_string(),
        cfg.network.display().to_string(),
        Some(seed),
        &outcome,
        wall,
    );
    let case_dir = out_dir.join(format!("case_{seed}")).join(label);
    if let Err(e) = write_outcome_files(&case_dir, &doc) {
        log::error!("cannot write case artifacts for seed {seed} model {label}: {e}");
    }
    let (mean_abs_deviation, mean_deviation, undefined) = deviation_stats(&outcome);
    SummaryRow {
        seed,
        model: label.to_string(),
        status: status_str(outcome.status).to_string(),
        epsilon: outcome.epsilon,
        mean_abs_cost: outcome.mean_abs_cost,
        eps_pct_of_mean_cost: eps_pct(&outcome),
        rho_final: outcome.rho_final,
        outer_iterations: outcome.outer_iterations,
        mean_abs_deviation,
        mean_deviation,
        undefined_deviations: undefined,
        wall_time_s: wall,
        error: None,
    }
}

fn cmd_compare(paths: &[PathBuf], out: Option<PathBuf>) -> u8 {
    if paths.is_empty() {
        eprintln!("compare needs at least one summary.json");
        return EXIT_INVALID;
    }
    let mut summaries: Vec<BatchSummary> = Vec::new();
    for path in paths {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return EXIT_IO;
            }
        };
        match serde_json::from_str::<BatchSummary>(&text) {
            Ok(s) => summaries.push(s),
            Err(e) => {
                eprintln!("{} is not a summary file: {e}", path.display());
                return EXIT_INVALID;
            }
        }
    }
    let cmp = match compare(&summaries) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_INVALID;
        }
    };
    let out_dir = out.unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = std::fs::create_dir_all(&out_dir)
        .context("create output directory")
        .and_then(|()| {
            write_comparison(&out_dir.join("compare.csv"), &out_dir.join("compare.json"), &cmp)
        })
    {
        eprintln!("cannot write comparison: {e:#}");
        return EXIT_IO;
    }
    if let Err(e) = print_comparison(&cmp) {
        eprintln!("cannot print comparison: {e}");
        return EXIT_IO;
    }
    EXIT_OK
}
