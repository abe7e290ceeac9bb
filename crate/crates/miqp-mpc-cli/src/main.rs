//! `miqp-mpc`: run closed-loop rendezvous experiments from scenario files,
//! sweep iteration limits, and render trace artifacts.
//!
//! Exit codes: 0 success, 1 usage/parse errors, 2 controller infeasible,
//! 3 divergence guard tripped.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use miqp_mpc::bnb::format_tree_log;
use miqp_mpc::plot::{error_series_svg, position_plane_svg};
use miqp_mpc::scenario::{parse_scenario, ScenarioFile};
use miqp_mpc::sim::{run_closed_loop, tree_log_at_sample, SimOutcome, SimTrace};
use miqp_mpc::trace::{trace_from_csv, trace_to_csv};
use miqp_mpc::uniting::LyapunovKind;

#[derive(Parser)]
#[command(
    name = "miqp-mpc",
    about = "Iteration-limited mixed-integer MPC experiments",
    version
)]
struct Cli {
    /// Directory artifacts are written to.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Override the scenario's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write `<name>.trace.csv`.
    Run { file: PathBuf },
    /// Run every sweep point (in parallel, capped by MIQP_MPC_THREADS) and
    /// write one trace per point plus `<name>.summary.csv`. Exit code 0 as
    /// long as every run executes, whatever its outcome.
    Sweep { file: PathBuf },
    /// Render position-plane and error-series SVGs from trace CSVs.
    Plot { traces: Vec<PathBuf> },
    /// Dump the branch-and-bound tree log for the solve at one sample.
    Tree {
        file: PathBuf,
        /// Sample index k to replay to.
        #[arg(long)]
        sample: usize,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioFile, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut file =
        parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(seed) = seed {
        file.scenario.rng_seed = seed;
    }
    Ok(file)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(path)
}

fn outcome_exit(outcome: SimOutcome) -> ExitCode {
    match outcome {
        SimOutcome::Completed => ExitCode::SUCCESS,
        SimOutcome::Infeasible { at } => {
            eprintln!("controller infeasible at sample {at}");
            ExitCode::from(2)
        }
        SimOutcome::Unstable { at } => {
            eprintln!("divergence guard tripped at sample {at}");
            ExitCode::from(3)
        }
    }
}

fn cmd_run(file: &Path, out_dir: &Path, seed: Option<u64>) -> ExitCode {
    let sf = match load_scenario(file, seed) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let trace = match run_closed_loop(&sf.scenario) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let name = format!("{}.trace.csv", stem(file));
    match write_artifact(out_dir, &name, &trace_to_csv(&trace)) {
        Ok(path) => println!("wrote {}", path.display()),
        Err(e) => return fail(e),
    }
    outcome_exit(trace.outcome)
}

fn sweep_threads(points: usize) -> usize {
    let cap = std::env::var("MIQP_MPC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(points).max(1)
}

fn cmd_sweep(file: &Path, out_dir: &Path, seed: Option<u64>) -> ExitCode {
    let sf = match load_scenario(file, seed) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let Some(sweep) = sf.sweep.clone() else {
        return fail(format!("{}: no [sweep] section", file.display()));
    };
    let points = sweep.len();
    let key = match sweep {
        miqp_mpc::scenario::SweepList::Bnb(_) => "i_b_low",
        miqp_mpc::scenario::SweepList::Qp(_) => "i_qp_low",
    };
    let base = stem(file);
    let results: Mutex<Vec<Option<Result<(String, SimTrace), String>>>> =
        Mutex::new((0..points).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..sweep_threads(points) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points {
                    break;
                }
                let one = sf
                    .sweep_point(i)
                    .map_err(|e| e.to_string())
                    .and_then(|sc| run_closed_loop(&sc).map_err(|e| e.to_string()))
                    .map(|t| (sweep.value_str(i), t));
                results.lock().unwrap()[i] = Some(one);
            });
        }
    });
    let lyap = match sf.scenario.lyapunov.kind {
        LyapunovKind::Objective => "objective",
        LyapunovKind::Feasibility => "feasibility",
    };
    let mut summary = String::from("limit,lyapunov,avg_ib,avg_iqp,final_error,switches\n");
    for slot in results.into_inner().unwrap() {
        let (value, trace) = match slot.expect("every sweep index visited") {
            Ok(pair) => pair,
            Err(e) => return fail(e),
        };
        let name = format!("{base}.{key}-{value}.trace.csv");
        if let Err(e) = write_artifact(out_dir, &name, &trace_to_csv(&trace)) {
            return fail(e);
        }
        let s = &trace.summary;
        summary.push_str(&format!(
            "{value},{lyap},{},{},{},{}\n",
            s.avg_ib, s.avg_iqp, s.final_error_l2, s.switch_count
        ));
    }
    match write_artifact(out_dir, &format!("{base}.summary.csv"), &summary) {
        Ok(path) => {
            println!("wrote {} traces and {}", points, path.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_plot(traces: &[PathBuf], out_dir: &Path) -> ExitCode {
    if traces.is_empty() {
        return fail("plot needs at least one trace CSV");
    }
    let mut loaded = Vec::new();
    for path in traces {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(format!("{}: {e}", path.display())),
        };
        match trace_from_csv(&text) {
            Ok(t) => loaded.push((stem(path), t)),
            Err(e) => return fail(format!("{}: {e}", path.display())),
        }
    }
    let refs: Vec<(&str, &SimTrace)> = loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, svg) in
        [("position.svg", position_plane_svg(&refs)), ("error.svg", error_series_svg(&refs))]
    {
        match write_artifact(out_dir, name, &svg) {
            Ok(path) => println!("wrote {}", path.display()),
            Err(e) => return fail(e),
        }
    }
    ExitCode::SUCCESS
}

fn cmd_tree(file: &Path, sample: usize, out_dir: &Path, seed: Option<u64>) -> ExitCode {
    let sf = match load_scenario(file, seed) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let log = match tree_log_at_sample(&sf.scenario, sample) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let text = format_tree_log(&log);
    print!("{text}");
    let name = format!("{}.tree-k{sample}.txt", stem(file));
    match write_artifact(out_dir, &name, &text) {
        Ok(path) => {
            eprintln!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { file } => cmd_run(file, &cli.out_dir, cli.seed),
        Command::Sweep { file } => cmd_sweep(file, &cli.out_dir, cli.seed),
        Command::Plot { traces } => cmd_plot(traces, &cli.out_dir),
        Command::Tree { file, sample } => cmd_tree(file, *sample, &cli.out_dir, cli.seed),
    }
}
