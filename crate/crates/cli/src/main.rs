use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use resalloc::experiment::{
    load_instance, run_experiment, sweep_scalability, CellStatus, ExperimentSpec, GraphFamily, NetworkSource,
    RunStatus,
};
use resalloc::graph::WeightRule;
use resalloc::oracle::{solve_centralized, KktResiduals, OracleSettings};
use resalloc::Error;

/// Overrides every other choice of output directory except `--output`.
const OUTPUT_ENV: &str = "ALLOC_SIM_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "alloc-sim-out";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_ORACLE: u8 = 4;

#[derive(Parser)]
#[command(name = "alloc-sim", version, about = "Simulate decentralized resource allocation over agent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm of an experiment spec and write traces plus summary.json.
    Run {
        spec: PathBuf,
        /// Output directory (default: $ALLOC_SIM_OUTPUT_DIR, then the spec's output_dir).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use Metropolis-Hastings weights instead of lazy Metropolis.
        #[arg(long)]
        mh: bool,
    },
    /// Iterations to the sweep target for each network size.
    Sweep {
        spec: PathBuf,
        /// Comma-separated agent counts.
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
        n: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Family::Path)]
        family: Family,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        mh: bool,
    },
    /// Solve an instance file centrally and print the solution as JSON.
    Oracle {
        instance: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iters: usize,
        /// Write the solution here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Path,
    Star,
    Complete,
    Random,
}

impl From<Family> for GraphFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Path => GraphFamily::Path,
            Family::Star => GraphFamily::Star,
            Family::Complete => GraphFamily::Complete,
            Family::Random => GraphFamily::Random,
        }
    }
}

/// Failure printed to stderr as one JSON object.
#[derive(Serialize)]
struct Diagnostic {
    error: &'static str,
    message: String,
    exit_code: u8,
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => ("divergence", EXIT_DIVERGENCE),
        Some(Error::Oracle { .. }) => ("oracle", EXIT_ORACLE),
        Some(
            Error::Config(_)
            | Error::Graph(_)
            | Error::Dimension(_)
            | Error::Infeasible(_)
            | Error::Unsupported(_)
            | Error::ActiveBoxesExhausted { .. }
            | Error::Json(_)
            | Error::Io { .. },
        ) => ("config", EXIT_CONFIG),
        Some(_) => ("numerical", EXIT_FAILURE),
        None => ("config", EXIT_CONFIG),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { spec, output, mh } => cmd_run(&spec, output, mh),
        Command::Sweep {
            spec,
            n,
            family,
            output,
            mh,
        } => cmd_sweep(&spec, &n, family.into(), output, mh),
        Command::Oracle {
            instance,
            tol,
            max_iters,
            output,
        } => cmd_oracle(&instance, tol, max_iters, output),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let (kind, code) = classify(&err);
            let diag = Diagnostic {
                error: kind,
                message: format!("{err:#}"),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&diag).expect("diagnostic serializes"));
            ExitCode::from(code)
        }
    }
}

fn load_spec(path: &Path, mh: bool) -> anyhow::Result<(ExperimentSpec, PathBuf)> {
    let mut spec = ExperimentSpec::from_file(path).with_context(|| format!("reading spec {}", path.display()))?;
    if mh {
        match &mut spec.network {
            NetworkSource::Generate { rule, .. } | NetworkSource::Family { rule, .. } => {
                *rule = WeightRule::MetropolisHastings;
            }
            NetworkSource::Load(_) => {}
        }
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((spec, base))
}

fn output_dir(flag: Option<PathBuf>, spec: &ExperimentSpec, base: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    match &spec.output_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => base.join(dir),
        None => PathBuf::from(DEFAULT_OUTPUT),
    }
}

fn cmd_run(path: &Path, output: Option<PathBuf>, mh: bool) -> anyhow::Result<u8> {
    let (spec, base) = load_spec(path, mh)?;
    let out = output_dir(output, &spec, &base);
    let report = run_experiment(&spec, &base, &out)?;
    for run in &report.summary.runs {
        let status = match run.status {
            RunStatus::Converged => "converged",
            RunStatus::MaxRounds => "max_rounds",
            RunStatus::Diverged => "diverged",
        };
        let residual = run.final_metrics.map_or(f64::NAN, |m| m.normalized_residual);
        println!(
            "{:<24} {:<16} {:<10} rounds={:<8} normalized_residual={residual:.3e}",
            run.label,
            run.algorithm.name(),
            status,
            run.rounds
        );
    }
    println!("summary: {}", report.summary_path.display());
    if let Some(bad) = report.summary.runs.iter().find(|r| r.status == RunStatus::Diverged) {
        let diag = Diagnostic {
            error: "divergence",
            message: format!(
                "run {}: {}",
                bad.label,
                bad.diagnostic.as_deref().unwrap_or("divergence detected")
            ),
            exit_code: EXIT_DIVERGENCE,
        };
        eprintln!("{}", serde_json::to_string(&diag)?);
        return Ok(EXIT_DIVERGENCE);
    }
    Ok(0)
}

fn cmd_sweep(
    path: &Path,
    n_list: &[usize],
    family: GraphFamily,
    output: Option<PathBuf>,
    mh: bool,
) -> anyhow::Result<u8> {
    let (spec, base) = load_spec(path, mh)?;
    let out = output_dir(output, &spec, &base);
    let report = sweep_scalability(&spec, &base, n_list, family)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("sweep.csv");
    std::fs::write(&csv_path, report.to_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    let json_path = out.join("sweep.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    for row in &report.rows {
        let cell = match (row.status, row.iterations) {
            (CellStatus::Reached, Some(k)) => k.to_string(),
            (CellStatus::Diverged, _) => "diverged".into(),
            _ => "not reached".into(),
        };
        println!("n={:<5} {:<24} {cell}", row.n, row.label);
    }
    for fit in &report.fits {
        match fit.exponent {
            Some(e) => println!("{}: exponent {e:.3} over {} points", fit.label, fit.points),
            None => println!("{}: too few points for a fit", fit.label),
        }
    }
    println!("sweep: {}", csv_path.display());
    Ok(0)
}

#[derive(Serialize)]
struct OracleOutput {
    fingerprint: String,
    x_star: Vec<Vec<f64>>,
    kkt_residuals: KktResiduals,
    iterations_used: usize,
}

fn cmd_oracle(path: &Path, tol: f64, max_iters: usize, output: Option<PathBuf>) -> anyhow::Result<u8> {
    let instance = load_instance(path).with_context(|| format!("reading instance {}", path.display()))?;
    let settings = OracleSettings {
        tol,
        max_iters,
        ..OracleSettings::default()
    };
    let sol = solve_centralized(&instance, &settings)?;
    let x = &sol.x_star;
    let out = OracleOutput {
        fingerprint: instance.fingerprint()?,
        x_star: (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect(),
        kkt_residuals: sol.kkt_residuals,
        iterations_used: sol.iterations_used,
    };
    let text = serde_json::to_string_pretty(&out)?;
    match output {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(0)
}
