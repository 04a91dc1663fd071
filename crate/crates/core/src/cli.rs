//! Command-line surface: `simulate`, `estimate`, `evaluate`.
//!
//! Exit codes: 0 success, 2 schema or configuration error, 3 solver failure,
//! 4 I/O error. Failures print one JSON object to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dense::{DenseMatrix, DenseVector, Epsilon};
use crate::em::{run_em_from, Variant};
use crate::error::{Error, Result};
use crate::eval::{nmae_report, stay_baseline, NmaeReport};
use crate::io::{
    betas_to_string, costs_to_string, flows_from_str, flows_to_string, heatmap_to_string, marginals_from_str,
    marginals_to_string, per_step_to_string, read_file, to_json_pretty, write_outputs, MarginalTable,
    TraceDocument,
};
use crate::par::Exec;
use crate::sim::{observe, simulate};
use crate::tree::StateSpace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "popflow", version, about = "Estimate population flows from aggregated counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Entropic regularization weight.
    #[arg(long, allow_hyphen_values = true)]
    pub eps: Option<f64>,
    /// M-step variant: istc or ista.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a crowd and its sensor counts.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate transition flows from an observation file.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Score estimated flows against true flows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Estimated flow file.
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// True flow file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also score the stay-in-place baseline.
        #[arg(long)]
        stay: bool,
    },
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io(_) => EXIT_IO,
        e if e.is_solver_failure() => EXIT_SOLVER,
        _ => EXIT_SCHEMA,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err.root() {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::Domain(_) => "domain",
        Error::InvalidInput(_) => "invalid_input",
        Error::InvalidTree(_) => "invalid_tree",
        Error::MissingObservation { .. } => "missing_observation",
        Error::NotConverged { .. } => "not_converged",
        Error::Underflow { .. } => "underflow",
        Error::Stagnation { .. } => "stagnation",
        Error::EmStep { .. } => "em_step",
        Error::Schema(_) => "schema",
        Error::Io(_) => "io",
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// Parses `args`, runs the command and returns the process exit code.
/// `env` supplies the override variables.
pub fn main_with(
    args: impl IntoIterator<Item = OsString>,
    env: impl IntoIterator<Item = (String, String)>,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let report = ErrorReport {
                error: "usage",
                message: e.to_string().trim_end().to_string(),
                exit_code: EXIT_SCHEMA,
            };
            let _ = writeln!(stderr, "{}", serde_json::to_string(&report).unwrap_or_default());
            return EXIT_SCHEMA;
        }
    };
    match run(cli, env) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            let code = exit_code(&err);
            let report = ErrorReport {
                error: error_kind(&err),
                message: err.to_string(),
                exit_code: code,
            };
            let _ = writeln!(stderr, "{}", serde_json::to_string(&report).unwrap_or_default());
            code
        }
    }
}

fn load_config(common: &Common, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref(), env)?;
    if let Some(seed) = common.seed {
        config.simulation.rng_seed = seed;
        config.estimation.seed = seed;
    }
    if let Some(eps) = common.eps {
        config.estimation.eps = Epsilon::new(eps).map_err(|e| Error::Schema(e.to_string()))?;
    }
    if let Some(v) = common.variant {
        config.estimation.variant = v;
    }
    if let Some(out) = &common.out {
        config.paths.out = Some(out.clone());
    }
    Ok(config)
}

/// The resolved configuration as written next to the outputs. The output
/// location is dropped so reruns into different directories stay identical.
fn echo(config: &RunConfig) -> Result<String> {
    let mut c = config.clone();
    c.paths.out = None;
    c.to_json()
}

fn required<'a>(flag: Option<&'a PathBuf>, fallback: Option<&'a PathBuf>, name: &str) -> Result<&'a Path> {
    flag.or(fallback)
        .map(PathBuf::as_path)
        .ok_or_else(|| Error::Schema(format!("missing --{name} (or paths.{name} in the config)")))
}

/// Resolves and creates the output directory so an unwritable location
/// fails before any work is done.
fn output_dir<'a>(common: &'a Common, config: &'a RunConfig) -> Result<&'a Path> {
    let out = required(common.out.as_ref(), config.paths.out.as_ref(), "out")?;
    crate::io::create_dir(out)?;
    Ok(out)
}

/// Square grid whose size matches `states`.
fn grid_for(states: usize) -> Result<StateSpace> {
    let w = (states as f64).sqrt().round() as usize;
    if w * w != states || states == 0 {
        return Err(Error::Schema(format!("{states} states do not form a square grid")));
    }
    Ok(StateSpace::grid(w))
}

pub fn run(cli: Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let config = load_config(&common, env)?;
            let out = output_dir(&common, &config)?;
            cmd_simulate(&config, out)
        }
        Command::Estimate { common, observations } => {
            let config = load_config(&common, env)?;
            let out = output_dir(&common, &config)?;
            let obs = required(observations.as_ref(), config.paths.observations.as_ref(), "observations")?;
            cmd_estimate(&config, obs, out)
        }
        Command::Evaluate {
            common,
            estimate,
            truth,
            stay,
        } => {
            let mut config = load_config(&common, env)?;
            config.evaluation.stay |= stay;
            let out = output_dir(&common, &config)?;
            let est = required(estimate.as_ref(), config.paths.estimate.as_ref(), "estimate")?;
            let tru = required(truth.as_ref(), config.paths.truth.as_ref(), "truth")?;
            cmd_evaluate(&config, est, tru, out)
        }
    }
}

/// Writes `truth_flows.csv`, `truth_marginals.csv`, `observations.csv`.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let truth = simulate(&config.simulation, Exec::default())?;
    let obs = observe(&truth, &config.simulation, Exec::default())?;
    let s = config.simulation.grid_w * config.simulation.grid_w;
    let config_json = echo(config)?;
    write_outputs(
        out,
        "simulate",
        config.simulation.rng_seed,
        &config_json,
        &[
            ("config.json", format!("{config_json}\n")),
            ("truth_flows.csv", flows_to_string(&truth.flows)),
            ("truth_marginals.csv", marginals_to_string(&MarginalTable::single(s, &truth.marginals))),
            ("observations.csv", marginals_to_string(&MarginalTable::from_observations(&obs))),
        ],
    )
}

/// Writes `flows.csv`, `marginals.csv`, `costs.csv`, `trace.json` and, for
/// the basis variant, `betas.csv`.
pub fn cmd_estimate(config: &RunConfig, observations: &Path, out: &Path) -> Result<()> {
    let table = marginals_from_str(&read_file(observations)?)?;
    let space = grid_for(table.num_states)?;
    let obs = table.into_observations()?;
    let em = &config.estimation;
    let emission = config.emission.cost(&space, em.eps)?;
    let result = run_em_from(&obs, &space, &emission, em, None, Exec::default())?;
    let trace = TraceDocument {
        variant: em.variant,
        eps: em.eps.value(),
        converged: result.converged,
        iterations: result.trace.clone(),
    };
    let config_json = echo(config)?;
    let mut files = vec![
        ("config.json", format!("{config_json}\n")),
        ("flows.csv", flows_to_string(&result.flows)),
        (
            "marginals.csv",
            marginals_to_string(&MarginalTable::single(space.size(), &result.marginals)),
        ),
        ("costs.csv", costs_to_string(&result.costs)),
        ("trace.json", to_json_pretty(&trace)?),
    ];
    if let Some(b) = &result.betas {
        files.push(("betas.csv", betas_to_string(&em.exponents, b)));
    }
    write_outputs(out, "estimate", em.seed, &config_json, &files)
}

/// Marginals implied by a flow series: row sums, then the last column sums.
pub fn marginals_of(flows: &[DenseMatrix]) -> Result<Vec<DenseVector>> {
    let mut out: Vec<DenseVector> = flows
        .iter()
        .map(|f| DenseVector::new(f.row_sums()))
        .collect::<Result<_>>()?;
    if let Some(last) = flows.last() {
        out.push(DenseVector::new(last.col_sums())?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Metrics {
    estimate: NmaeReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    stay: Option<NmaeReport>,
}

/// Writes `metrics.json`, `per_step.csv` and `heatmap.csv`.
pub fn cmd_evaluate(config: &RunConfig, estimate: &Path, truth: &Path, out: &Path) -> Result<()> {
    let est = flows_from_str(&read_file(estimate)?)?;
    let tru = flows_from_str(&read_file(truth)?)?;
    if est.len() != tru.len() {
        return Err(Error::Schema(format!(
            "horizon mismatch: estimate has {} intervals, truth has {}",
            est.len(),
            tru.len()
        )));
    }
    let states = tru.first().map_or(0, |m| m.rows());
    if est.first().map_or(0, |m| m.rows()) != states {
        return Err(Error::Schema("estimate and truth have different state counts".into()));
    }
    let width = grid_for(states)?.grid_width().expect("grid state space");
    let nbrs = config.evaluation.neighbors(width);
    let report = nmae_report(&est, &tru, &nbrs)?;
    let truth_marginals = marginals_of(&tru)?;
    let stay = if config.evaluation.stay {
        Some(nmae_report(&stay_baseline(&truth_marginals), &tru, &nbrs)?)
    } else {
        None
    };
    // Estimated marginals rescaled to the true head count of each step.
    let est_marginals = marginals_of(&est)?
        .into_iter()
        .zip(&truth_marginals)
        .map(|(e, t)| {
            let total = e.sum();
            let k = if total > 0.0 { t.sum() / total } else { 0.0 };
            e.scaled(k)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_step = per_step_to_string(&report.per_step, stay.as_ref().map(|s| s.per_step.as_slice()));
    let heat = heatmap_to_string(Some(width), &est_marginals, &truth_marginals);
    let metrics = Metrics { estimate: report, stay };
    let config_json = echo(config)?;
    write_outputs(
        out,
        "evaluate",
        config.estimation.seed,
        &config_json,
        &[
            ("metrics.json", to_json_pretty(&metrics)?),
            ("per_step.csv", per_step),
            ("heatmap.csv", heat),
        ],
    )
}
