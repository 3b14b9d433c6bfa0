//! Config-driven experiment runner: `train`, `sweep-iter`, `sweep-snr`,
//! `scatter` and `selftest`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! divergence, 4 output I/O error.

pub mod experiments;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::recovery::{CtistaModel, CtistaParams};
use crate::scenarios::{Scenario, ScenarioConfig};
use crate::training::{
    incremental_train_with, load_params_for, save_params, ParamsMeta, TrainReport,
};
use crate::Error;

pub use experiments::{
    Baseline, ExperimentResult, IterRow, Provenance, ScatterRow, SnrRow, TrialPolicy,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "CTISTA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "ctista",
    version,
    about = "C-TISTA experiments: training, sweeps and scatter data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the 3T parameters and write them as JSON (plus a report sidecar).
    Train(TrainArgs),
    /// NMSE after each layer t = 1..T.
    SweepIter(EvalArgs),
    /// MSE and SER over the configured SNR grid.
    SweepSnr(EvalArgs),
    /// Soft estimates of one OFDM block for C-TISTA and the DFT receiver.
    Scatter(EvalArgs),
    /// Quick numerical self-checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Scenario configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the master seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent (required for `train`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Where to write the training report (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained parameter file.
    #[arg(long, conflicts_with_all = ["untrained", "train"])]
    pub params: Option<PathBuf>,
    /// Use the initial parameters without training.
    #[arg(long, conflicts_with = "train")]
    pub untrained: bool,
    /// Train in-process before evaluating (per SNR point unless the config
    /// sets `eval.train_snr_db`).
    #[arg(long)]
    pub train: bool,
    /// Override the number of evaluation trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Baseline detectors to evaluate alongside C-TISTA.
    #[arg(long = "baseline", value_enum)]
    pub baselines: Vec<Baseline>,
}

/// Failure of a subcommand together with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl CliError {
    fn input(error: Error) -> Self {
        let code = match error {
            Error::Divergence { .. } | Error::TrainingDiverged { .. } => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError { code, error }
    }

    fn output(error: Error) -> Self {
        CliError {
            code: EXIT_IO,
            error,
        }
    }
}

impl From<Error> for CliError {
    /// Errors raised while computing: divergence maps to 3, the rest to 2.
    fn from(error: Error) -> Self {
        CliError::input(error)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.error);
        return e.code;
    }
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| {
            CliError::input(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {value:?}"
            )))
        })?;
    // a pool configured earlier in this process is kept
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::SweepIter(args) => cmd_sweep_iter(&args),
        Command::SweepSnr(args) => cmd_sweep_snr(&args),
        Command::Scatter(args) => cmd_scatter(&args),
        Command::Selftest => cmd_selftest(),
    }
}

/// Reads the configuration and applies command-line overrides.
pub fn load_config(common: &CommonArgs) -> CliResult<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&common.config).map_err(|e| match e {
        Error::Io { path, source } => {
            CliError::input(Error::Config(format!("{}: {source}", path.display())))
        }
        other => CliError::input(other),
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::output(Error::io(p, e))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::output(Error::io("<stdout>", e))),
    }
}

fn train_logged(scn: &Scenario, model: &CtistaModel) -> CliResult<TrainReport> {
    let k = scn.config().training.minibatches;
    let mut progress = |generation: usize, minibatch: usize, loss: f64| {
        if minibatch + 1 == k {
            eprintln!("generation {generation}: final minibatch loss {loss:.6e}");
        }
    };
    Ok(incremental_train_with(scn, model, Some(&mut progress))?)
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let out =
        args.common.out.clone().ok_or_else(|| {
            CliError::input(Error::Config("train needs --out <params.json>".into()))
        })?;
    let scn = Scenario::build(cfg)?;
    let model = scn.model()?;
    let report = train_logged(&scn, &model)?;
    let meta = ParamsMeta {
        scenario_digest: scn.config().digest(),
        seed: scn.config().seed,
    };
    save_params(&report.params, &meta, &out).map_err(CliError::output)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, json + "\n")
        .map_err(|e| CliError::output(Error::io(&report_path, e)))?;
    eprintln!(
        "trained {} layers in {:.1} s -> {}",
        report.params.layers(),
        report.wall_clock_secs,
        out.display()
    );
    Ok(())
}

/// How C-TISTA parameters are obtained for an evaluation.
enum ParamSource {
    File(CtistaParams, String),
    Untrained,
    Train,
}

impl ParamSource {
    fn from_args(args: &EvalArgs, layers: usize) -> CliResult<Self> {
        if let Some(path) = &args.params {
            let (params, _) = load_params_for(path, layers).map_err(|e| match e {
                Error::Io { path, source } => {
                    CliError::input(Error::ParamFile(format!("{}: {source}", path.display())))
                }
                other => CliError::input(other),
            })?;
            return Ok(ParamSource::File(params, path.display().to_string()));
        }
        if args.untrained {
            return Ok(ParamSource::Untrained);
        }
        if args.train {
            return Ok(ParamSource::Train);
        }
        Err(CliError::input(Error::Config(
            "choose --params <file>, --untrained or --train".into(),
        )))
    }

    fn describe(&self) -> String {
        match self {
            ParamSource::File(_, path) => path.replace([' ', ','], "_"),
            ParamSource::Untrained => "untrained".into(),
            ParamSource::Train => "trained-in-process".into(),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            ParamSource::Untrained => "ctista-untrained",
            _ => "ctista",
        }
    }

    /// Parameters for a scenario (already set to the evaluation SNR).
    fn params_for(&self, scn: &Scenario, model: &CtistaModel) -> CliResult<CtistaParams> {
        match self {
            ParamSource::File(p, _) => Ok(p.clone()),
            ParamSource::Untrained => Ok(model.init_params(Some(scn.sigma2()))),
            ParamSource::Train => Ok(train_logged(scn, model)?.params),
        }
    }
}

fn provenance(command: &str, cfg: &ScenarioConfig, source: &ParamSource) -> Provenance {
    Provenance {
        command: command.into(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        params: source.describe(),
    }
}

fn cmd_sweep_iter(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let scn = Scenario::build(cfg)?;
    let model = scn.model()?;
    let source = ParamSource::from_args(args, model.layers())?;
    let params = source.params_for(&scn, &model)?;
    let trials = args.trials.unwrap_or(scn.config().eval.trials);
    let rows = experiments::sweep_iter(
        &scn,
        &model,
        &params,
        source.label(),
        &args.baselines,
        trials,
    )?;
    let result = ExperimentResult {
        provenance: provenance("sweep-iter", scn.config(), &source),
        rows,
    };
    write_output(args.common.out.as_deref(), &result.to_csv())
}

fn cmd_sweep_snr(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    if cfg.eval.snr_grid.is_empty() {
        return Err(CliError::input(Error::Config(
            "eval.snr_grid is empty".into(),
        )));
    }
    let base = Scenario::build(cfg)?;
    let model = base.model()?;
    let source = ParamSource::from_args(args, model.layers())?;
    let shared = match (&source, base.config().eval.train_snr_db) {
        (ParamSource::Train, Some(snr)) => Some(source.params_for(&base.with_snr_db(snr), &model)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for &snr in &base.config().eval.snr_grid {
        let scn = base.with_snr_db(snr);
        let params = match &shared {
            Some(p) => p.clone(),
            None => source.params_for(&scn, &model)?,
        };
        let policy = TrialPolicy::from_scenario(&scn, args.trials);
        rows.extend(experiments::snr_point(
            &scn,
            &model,
            &params,
            source.label(),
            &args.baselines,
            policy,
        )?);
        eprintln!("snr {snr} dB done");
    }
    let result = ExperimentResult {
        provenance: provenance("sweep-snr", base.config(), &source),
        rows,
    };
    write_output(args.common.out.as_deref(), &result.to_csv())
}

fn cmd_scatter(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let scn = Scenario::build(cfg)?;
    let model = scn.model()?;
    let source = ParamSource::from_args(args, model.layers())?;
    let params = source.params_for(&scn, &model)?;
    let rows = experiments::scatter(&scn, &model, &params, source.label(), 0)?;
    let result = ExperimentResult {
        provenance: provenance("scatter", scn.config(), &source),
        rows,
    };
    write_output(args.common.out.as_deref(), &result.to_csv())
}

fn cmd_selftest() -> CliResult<()> {
    let results = crate::selftest::run_all();
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError {
            code: EXIT_DIVERGENCE,
            error: Error::invalid(format!("{failed} self-check(s) failed")),
        });
    }
    Ok(())
}
