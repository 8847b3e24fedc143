use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use wmass_core::quadrature::ProbeGrid;
use wmass_core::runner::{error_exit_code, exit, run, ExperimentConfig, GridSpec, RadiiSpec, Task};
use wmass_core::{Error, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Mass,
    CheckConformal,
    StaticCheck,
    Penrose,
    Hawking,
    Michel,
    Convergence,
    Probe,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mass => Task::Mass,
            TaskArg::CheckConformal => Task::CheckConformal,
            TaskArg::StaticCheck => Task::StaticCheck,
            TaskArg::Penrose => Task::Penrose,
            TaskArg::Hawking => Task::Hawking,
            TaskArg::Michel => Task::Michel,
            TaskArg::Convergence => Task::Convergence,
            TaskArg::Probe => Task::Probe,
        }
    }
}

/// Weighted mass, conformal identity checks and Penrose-type inequalities.
///
/// Exit codes: 0 pass, 1 assertion failure, 2 config error, 3 non-convergence.
#[derive(Debug, Parser)]
#[command(name = "wmass", version)]
struct Cli {
    #[arg(value_enum)]
    task: TaskArg,
    /// Experiment config (JSON, schema 1) or a bare family document.
    #[arg(long)]
    config: PathBuf,
    /// Report path; CSV tables are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Radii schedule `r0:K` (radii r0·2^k, k = 0..=K).
    #[arg(long)]
    radii: Option<String>,
    /// Root bracket `a:b` for the f-minimal sphere.
    #[arg(long)]
    bracket: Option<String>,
    /// Probe grid `annulus:rmin:rmax:count`.
    #[arg(long)]
    grid: Option<String>,
}

fn parse_bracket(s: &str) -> Result<[f64; 2]> {
    let bad = || Error::Config(format!("bracket `{s}` is not a:b"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok([a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?])
}

fn configure(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    let task = Task::from(cli.task);
    match cfg.task {
        Some(t) if t != task => {
            return Err(Error::Config(format!("config is for task `{t}`, command line asks for `{task}`")));
        }
        _ => cfg.task = Some(task),
    }
    if let Some(seed) = cli.seed {
        cfg.numerics.seed = seed;
    }
    if let Some(r) = &cli.radii {
        RadiiSpec::Text(r.clone()).resolve()?;
        cfg.numerics.radii = Some(RadiiSpec::Text(r.clone()));
    }
    if let Some(b) = &cli.bracket {
        cfg.bracket = Some(parse_bracket(b)?);
    }
    if let Some(g) = &cli.grid {
        ProbeGrid::parse(g)?;
        cfg.numerics.grid = Some(GridSpec::Text(g.clone()));
    }
    if let Some(out) = &cli.out {
        cfg.output.report = Some(out.clone());
    }
    Ok(cfg)
}

fn main_inner(cli: &Cli) -> Result<i32> {
    let cfg = configure(cli)?;
    let report = run(&cfg)?;
    match &cfg.output.report {
        Some(path) => {
            report.write(path, cfg.output.csv_dir.as_deref())?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    for a in report.assertions.iter().filter(|a| !a.passed) {
        eprintln!("FAIL {}: {:e} (tolerance {:e})", a.name, a.value, a.tolerance);
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match main_inner(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("wmass: {e}");
            error_exit_code(&e)
        }
    };
    debug_assert!((exit::PASS..=exit::NON_CONVERGENCE).contains(&code));
    ExitCode::from(code as u8)
}
