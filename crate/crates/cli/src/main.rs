//! `dtebounds`: bounds on the distribution of treatment effects from
//! experimental data.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 estimation
//! failure, 4 I/O error.

mod analyze;
mod config;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, FileError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core { context: Option<String>, error: dtebounds::Error },
    Io(String),
}

impl CliError {
    fn config(field: &str, msg: &str) -> Self {
        CliError::Config(format!("{field}: {msg}"))
    }

    fn core(context: String, error: dtebounds::Error) -> Self {
        CliError::Core { context: Some(context), error }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core { error, .. } if error.is_io() => 4,
            CliError::Core { error, .. } if error.is_validation() => 2,
            CliError::Core { .. } => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core { context: Some(c), error } => write!(f, "{c}: {error}"),
            CliError::Core { context: None, error } => write!(f, "{error}"),
        }
    }
}

impl From<dtebounds::Error> for CliError {
    fn from(error: dtebounds::Error) -> Self {
        CliError::Core { context: None, error }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

#[derive(Parser)]
#[command(name = "dtebounds", version, about = "Covariate-adjusted bounds on P(Y(1) - Y(0) <= delta)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate bounds and confidence intervals for a dataset.
    Analyze(RunArgs),
    /// Write the estimated difference curves and their optimizers.
    BoundsCurve(RunArgs),
    /// Run Monte Carlo cells on the built-in simulation design.
    Simulate(SimArgs),
}

/// Flags mirror configuration keys and override the config file.
#[derive(Args)]
struct RunArgs {
    /// key=value file, or a JSON report whose `config` is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<String>,
    /// Outcome column.
    #[arg(long)]
    y: Option<String>,
    /// Treatment column (0/1).
    #[arg(long)]
    d: Option<String>,
    /// Prefix of covariate columns.
    #[arg(long)]
    x_prefix: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<String>,
    /// sample-split, cross-fit, sjls, cross-fit-group, cross-fit-ipw or cross-fit-foldt.
    #[arg(long)]
    method: Option<String>,
    /// Learner spec such as knn_loc_shift:k=15; repeat for several candidates.
    #[arg(long = "model")]
    models: Vec<String>,
    /// Column with precomputed lower adjusters.
    #[arg(long)]
    adjuster_lower: Option<String>,
    #[arg(long)]
    adjuster_upper: Option<String>,
    #[arg(long)]
    k_folds: Option<String>,
    #[arg(long)]
    cv_folds: Option<String>,
    #[arg(long)]
    aux_fraction: Option<String>,
    /// in_sample, constant_known, group or known_function.
    #[arg(long)]
    propensity_mode: Option<String>,
    #[arg(long)]
    propensity_pi: Option<String>,
    #[arg(long)]
    propensity_column: Option<String>,
    /// loglog, log or q-loglog.
    #[arg(long)]
    h_rule: Option<String>,
    #[arg(long)]
    q: Option<String>,
    /// random_normal:N or equispaced:N.
    #[arg(long)]
    grid: Option<String>,
    /// Map outcomes through a bounded increasing transform first.
    #[arg(long)]
    squash: bool,
    #[arg(long)]
    seed: Option<String>,
    /// Output path prefix.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cell file: one `n,p,model,estimator` line per cell.
    #[arg(long)]
    cells: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Known target value; estimated by brute force when absent.
    #[arg(long)]
    theta0: Option<String>,
    #[arg(long)]
    theta0_reps: Option<String>,
    #[arg(long)]
    inner_reps: Option<String>,
    #[arg(long)]
    k_folds: Option<String>,
    #[arg(long)]
    cv_folds: Option<String>,
    #[arg(long)]
    aux_fraction: Option<String>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    output: Option<String>,
}

fn base_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            FileError::Io(m) => CliError::Io(m),
            FileError::Config(c) => c.into(),
        }),
    }
}

fn apply(cfg: &mut RunConfig, flags: &[(&str, &Option<String>)]) -> Result<(), CliError> {
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

fn resolve_run(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(a.config.as_ref())?;
    apply(
        &mut cfg,
        &[
            ("input", &a.input),
            ("y", &a.y),
            ("d", &a.d),
            ("x_prefix", &a.x_prefix),
            ("alpha", &a.alpha),
            ("delta", &a.delta),
            ("method", &a.method),
            ("adjuster.lower", &a.adjuster_lower),
            ("adjuster.upper", &a.adjuster_upper),
            ("k_folds", &a.k_folds),
            ("cv_folds", &a.cv_folds),
            ("aux_fraction", &a.aux_fraction),
            ("propensity.mode", &a.propensity_mode),
            ("propensity.pi", &a.propensity_pi),
            ("propensity.column", &a.propensity_column),
            ("h_rule", &a.h_rule),
            ("q", &a.q),
            ("grid", &a.grid),
            ("seed", &a.seed),
            ("output", &a.output),
        ],
    )?;
    if !a.models.is_empty() {
        cfg.models = a.models.clone();
    }
    if a.squash {
        cfg.squash = true;
    }
    Ok(cfg)
}

fn resolve_sim(a: &SimArgs) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(a.config.as_ref())?;
    apply(
        &mut cfg,
        &[
            ("cells", &a.cells),
            ("reps", &a.reps),
            ("seed", &a.seed),
            ("alpha", &a.alpha),
            ("theta0", &a.theta0),
            ("theta0_reps", &a.theta0_reps),
            ("inner_reps", &a.inner_reps),
            ("k_folds", &a.k_folds),
            ("cv_folds", &a.cv_folds),
            ("aux_fraction", &a.aux_fraction),
            ("grid", &a.grid),
            ("output", &a.output),
        ],
    )?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Analyze(a) => analyze::cmd_analyze(&resolve_run(&a)?),
        Command::BoundsCurve(a) => analyze::cmd_bounds_curve(&resolve_run(&a)?),
        Command::Simulate(a) => simulate::cmd_simulate(&resolve_sim(&a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
