use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gas_storage::config::{LsmcRows, ModelKind, RunConfig};
use gas_storage::lsmc::{lsmc_evaluate, lsmc_solve, LsmcPolicy};
use gas_storage::market::ScenarioSet;
use gas_storage::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use gas_storage::report::{comparison_table, PnLReport, ReportFile};
use gas_storage::storage::StorageSpec;
use gas_storage::train::{evaluate, train_sfmod, train_smod};

const THREADS_VAR: &str = "GAS_STORAGE_THREADS";

#[derive(Parser)]
#[command(
    name = "gas-storage",
    version,
    about = "Gas storage trading strategies: training, benchmark and reports"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: reference-smod or reference-sfmod.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    model: Option<ModelKind>,
    /// Forward liquidity cap for the forward model.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scenario set as CSV.
    Simulate,
    /// Train a network model and write checkpoint, log and report.
    Train,
    /// Fit the least-squares Monte-Carlo benchmark.
    Benchmark,
    /// Report terminal P&L of a saved policy.
    Evaluate {
        /// Checkpoint or benchmark table; defaults to the one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Side-by-side statistics of several report files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<(), AnyError> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .parse()
            .map_err(|_| format!("{THREADS_VAR} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, AnyError> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(model) = cli.model {
        config.model = model;
    }
    if let Some(alpha) = cli.alpha {
        config.sfmod.alpha = alpha;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), AnyError> {
    configure_threads()?;
    if let Command::Compare { reports } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        return compare(reports, &out);
    }
    let config = load_config(&cli)?;
    std::fs::create_dir_all(&config.out)?;
    match &cli.command {
        Command::Simulate => simulate(&config),
        Command::Train => train(&config),
        Command::Benchmark => benchmark(&config),
        Command::Evaluate { checkpoint } => evaluate_saved(&config, checkpoint.as_deref()),
        Command::Compare { .. } => unreachable!(),
    }
}

fn simulate(config: &RunConfig) -> Result<(), AnyError> {
    let set = config.scenario_set(false)?;
    let path = config.out.join("scenarios.csv");
    set.export_csv(&path)?;
    log::info!("{set} written to {}", path.display());
    Ok(())
}

/// Training and validation rows of the configured scenario set.
fn splits(config: &RunConfig, set: &ScenarioSet) -> Vec<(&'static str, ScenarioSet)> {
    let train = match config.model {
        ModelKind::Sfmod => config.sfmod_config().base,
        _ => config.train_config(),
    };
    let mut out = vec![("train", set.rows(0, train.train_count.min(set.scenarios())))];
    if train.val_count > 0 && train.train_count < set.scenarios() {
        let n = train.val_count.min(set.scenarios() - train.train_count);
        out.push(("validation", set.rows(train.train_count, n)));
    }
    out
}

fn write_reports(config: &RunConfig, splits: Vec<(&str, PnLReport)>) -> Result<(), AnyError> {
    let mut file = ReportFile::new(config.model.name(), config.seed);
    for (name, report) in splits {
        report.write_csv(&config.out, name)?;
        log::info!(
            "{name}: mean {:.2}, median {:.2}, std {:.2} over {} scenarios",
            report.summary.mean,
            report.summary.median,
            report.summary.std,
            report.summary.count
        );
        file.splits.push((name.to_string(), report));
    }
    file.save(&config.out.join("report.json"))?;
    Ok(())
}

fn network_reports(
    config: &RunConfig,
    params: &PolicyParams,
    set: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<(), AnyError> {
    let mut reports = Vec::new();
    for (name, rows) in splits(config, set) {
        reports.push((name, evaluate(params, &rows, spec)?));
    }
    write_reports(config, reports)
}

fn train(config: &RunConfig) -> Result<(), AnyError> {
    let forwards = config.model == ModelKind::Sfmod;
    let set = config.scenario_set(forwards)?;
    let spec = config.storage_spec(set.days())?;
    let (params, log) = match config.model {
        ModelKind::Smod => train_smod(&config.train_config(), &set, &spec)?,
        ModelKind::Sfmod => train_sfmod(&config.sfmod_config(), &set, &spec)?,
        ModelKind::Lsmc => {
            return Err("the benchmark is fitted with the `benchmark` subcommand".into())
        }
    };
    save_checkpoint(&config.out.join("checkpoint.json"), &params)?;
    log.write_jsonl(&config.out.join("train_log.jsonl"))?;
    log::info!("selected epoch {}", log.selected_epoch);
    network_reports(config, &params, &set, &spec)
}

fn lsmc_reports(
    config: &RunConfig,
    policy: &LsmcPolicy,
    set: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<(), AnyError> {
    let mut reports = Vec::new();
    for (name, rows) in splits(config, set) {
        reports.push((name, lsmc_evaluate(policy, &rows, spec)?));
    }
    write_reports(config, reports)
}

fn lsmc_fit_rows(config: &RunConfig, set: &ScenarioSet) -> ScenarioSet {
    let train = config.train_config();
    let n = match config.lsmc.fit_on {
        LsmcRows::Train => train.train_count,
        LsmcRows::All => train.train_count + train.val_count,
    };
    set.rows(0, n.min(set.scenarios()))
}

fn benchmark(config: &RunConfig) -> Result<(), AnyError> {
    let config = RunConfig {
        model: ModelKind::Lsmc,
        ..config.clone()
    };
    let set = config.scenario_set(false)?;
    let spec = config.storage_spec(set.days())?;
    let solution = lsmc_solve(&lsmc_fit_rows(&config, &set), &spec, &config.lsmc.solver)?;
    if solution.policy.incidents > 0 {
        log::warn!(
            "{} regressions needed extra regularization",
            solution.policy.incidents
        );
    }
    solution.policy.save(&config.out.join("lsmc_policy.json"))?;
    lsmc_reports(&config, &solution.policy, &set, &spec)
}

fn evaluate_saved(config: &RunConfig, checkpoint: Option<&Path>) -> Result<(), AnyError> {
    match config.model {
        ModelKind::Lsmc => {
            let path =
                checkpoint.map_or_else(|| config.out.join("lsmc_policy.json"), Path::to_path_buf);
            let policy = LsmcPolicy::load(&path)?;
            let set = config.scenario_set(false)?;
            let spec = config.storage_spec(set.days())?;
            lsmc_reports(config, &policy, &set, &spec)
        }
        model => {
            let path =
                checkpoint.map_or_else(|| config.out.join("checkpoint.json"), Path::to_path_buf);
            let params = load_checkpoint(&path)?;
            let forwards = params.output_dim() == 2;
            if forwards != (model == ModelKind::Sfmod) {
                return Err(format!(
                    "checkpoint {} does not hold a {} policy",
                    path.display(),
                    model.name()
                )
                .into());
            }
            let set = config.scenario_set(forwards)?;
            let spec = config.storage_spec(set.days())?;
            network_reports(config, &params, &set, &spec)
        }
    }
}

fn compare(paths: &[PathBuf], out: &Path) -> Result<(), AnyError> {
    let reports = paths
        .iter()
        .map(|p| ReportFile::load(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect::<Result<Vec<_>, _>>()?;
    let table = comparison_table(&reports);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.csv"), &table)?;
    print!("{table}");
    Ok(())
}
