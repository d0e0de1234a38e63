use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use steerbo_core::acquisition::{Acquisition, AcquisitionKind};
use steerbo_core::bo::{
    run_experiment, select_acquisition, write_curves_csv, write_finals_csv, write_run_log, ExperimentPlan,
    ExperimentSummary, Strategy,
};
use steerbo_core::objectives::ObjectiveSpec;
use steerbo_core::search_space::{build_stlstm_space, SearchSpace};

use crate::config::{digest, pick, prepare_output, resolve_seed, RunConfig};
use crate::{write_json, CliError, ConfigArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveKind {
    SyntheticStlstmSpace,
    SyntheticContinuous,
    External,
    ToyTrainer,
}

#[derive(Debug, Clone, Args)]
pub struct BoRunArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveKind>,
    /// Shell command for the external objective (run via `sh -c`).
    #[arg(long)]
    pub external: Option<String>,
    /// Per-evaluation timeout of the external objective, in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Cached dataset for the toy-trainer objective.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Search-space JSON; defaults to the eight-parameter ST-LSTM space.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Comma-separated acquisitions, each optionally `name:xi`.
    #[arg(long, value_delimiter = ',')]
    pub acq: Option<Vec<String>>,
    /// Also run random search with the same initial designs.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long)]
    pub n_init: Option<usize>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Base seed; falls back to the config file, then `STEERBO_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads across runs.
    #[arg(long)]
    pub parallel_runs: Option<usize>,
}

/// Fully resolved experiment settings; its digest goes in the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedBoRun {
    pub objective: ObjectiveSpec,
    pub space: SearchSpace,
    pub acquisitions: Vec<AcquisitionKind>,
    pub random_baseline: bool,
    pub plan: ExperimentPlan,
}

pub fn parse_acquisitions(items: &[String]) -> Result<Vec<AcquisitionKind>, CliError> {
    let mut out: Vec<AcquisitionKind> = Vec::new();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let (name, xi) = match item.split_once(':') {
            Some((n, x)) => (n, Some(x)),
            None => (item, None),
        };
        let kind: Acquisition = name.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let k = match xi {
            Some(x) => {
                let xi: f64 = x.parse().map_err(|_| CliError::Config(format!("bad xi '{x}' for {name}")))?;
                AcquisitionKind::new(kind, xi).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => AcquisitionKind::with_default_xi(kind),
        };
        if out.iter().any(|o| o.kind == k.kind) {
            return Err(CliError::Config(format!("acquisition {} listed twice", k.kind)));
        }
        out.push(k);
    }
    if out.is_empty() {
        return Err(CliError::Config("no acquisition selected".into()));
    }
    Ok(out)
}

fn resolve_objective(args: &BoRunArgs, file: &RunConfig) -> Result<ObjectiveSpec, CliError> {
    let Some(kind) = args.objective else {
        let mut spec = file.objective.clone().unwrap_or(ObjectiveSpec::SyntheticStlstmSpace);
        // Flags still refine a file-provided objective.
        match &mut spec {
            ObjectiveSpec::ExternalCommand { command, timeout_secs } => {
                if let Some(cmd) = &args.external {
                    *command = shell_command(cmd);
                }
                if let Some(t) = args.timeout {
                    *timeout_secs = t;
                }
            }
            ObjectiveSpec::ToyTrainer { dataset, .. } if args.dataset.is_some() => {
                dataset.clone_from(&args.dataset);
            }
            _ => {}
        }
        return Ok(spec);
    };
    Ok(match kind {
        ObjectiveKind::SyntheticStlstmSpace => ObjectiveSpec::SyntheticStlstmSpace,
        ObjectiveKind::SyntheticContinuous => ObjectiveSpec::SyntheticContinuous,
        ObjectiveKind::External => {
            let cmd = args
                .external
                .as_deref()
                .ok_or_else(|| CliError::Config("--objective external needs --external".into()))?;
            ObjectiveSpec::ExternalCommand { command: shell_command(cmd), timeout_secs: args.timeout.unwrap_or(600.0) }
        }
        ObjectiveKind::ToyTrainer => ObjectiveSpec::ToyTrainer {
            dataset: args.dataset.clone().or(file.dataset.clone()),
            synth_frames: file.synth_frames.unwrap_or(66),
            synth_seed: 0,
            epochs: file.epochs.unwrap_or(15),
            batch_size: file.batch_size.unwrap_or(50),
            patience: file.patience.unwrap_or(5),
        },
    })
}

fn shell_command(cmd: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), cmd.into()]
}

pub fn resolve(args: &BoRunArgs) -> Result<(ResolvedBoRun, PathBuf, Option<usize>), CliError> {
    let file = RunConfig::load(args.config.config.as_deref())?;
    let objective = resolve_objective(args, &file)?;
    let space = match &args.space {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read space {}: {e}", path.display())))?;
            SearchSpace::from_json(&text)?
        }
        None => file.space.clone().unwrap_or_else(build_stlstm_space),
    };
    if objective == ObjectiveSpec::SyntheticStlstmSpace && space.digest() != build_stlstm_space().digest() {
        return Err(CliError::Config("the synthetic stlstm-space objective requires the default search space".into()));
    }
    let acq_items = args
        .acq
        .clone()
        .or(file.acquisitions.clone())
        .unwrap_or_else(|| Acquisition::ALL.iter().map(|a| a.name().to_string()).collect());
    let acquisitions = parse_acquisitions(&acq_items)?;
    let defaults = ExperimentPlan::default();
    let plan = ExperimentPlan {
        n_init: pick(args.n_init, file.n_init, defaults.n_init),
        n_iter: pick(args.n_iter, file.n_iter, defaults.n_iter),
        n_runs: pick(args.runs, file.n_runs, defaults.n_runs),
        base_seed: resolve_seed(args.seed, file.base_seed)?,
    };
    let random_baseline = args.random_baseline || file.random_baseline.unwrap_or(false);
    let out = pick(args.out.clone(), file.output.clone(), PathBuf::from("bo-out"));
    let workers = args.parallel_runs.or(file.parallel_runs);
    if workers == Some(0) {
        return Err(CliError::Config("--parallel-runs must be at least 1".into()));
    }
    Ok((ResolvedBoRun { objective, space, acquisitions, random_baseline, plan }, out, workers))
}

#[derive(Serialize)]
struct StrategyStats {
    acquisition: String,
    xi: Option<f64>,
    completed_runs: usize,
    final_mean: f64,
    final_std: f64,
    final_median: f64,
    complete: bool,
}

#[derive(Serialize)]
struct FailureRecord {
    acquisition: String,
    seed: u64,
    error: String,
}

#[derive(Serialize)]
struct Summary {
    selected_acquisition: Option<AcquisitionKind>,
    strategies: Vec<StrategyStats>,
    failures: Vec<FailureRecord>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_digest: String,
    space_digest: String,
    config: &'a ResolvedBoRun,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn write_outputs(resolved: &ResolvedBoRun, summary: &ExperimentSummary, out: &std::path::Path) -> Result<(), CliError> {
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    for log in &summary.logs {
        let path = runs_dir.join(format!("{}-seed{}.jsonl", log.strategy.label(), log.seed));
        write_run_log(log, BufWriter::new(File::create(path)?))?;
    }
    write_curves_csv(summary, BufWriter::new(File::create(out.join("curves.csv"))?))?;
    write_finals_csv(summary, BufWriter::new(File::create(out.join("finals.csv"))?))?;

    let strategies = summary
        .entries
        .iter()
        .map(|e| {
            let mut finals: Vec<f64> = e.finals.iter().map(|(_, v)| *v).collect();
            StrategyStats {
                acquisition: e.strategy.label(),
                xi: match e.strategy {
                    Strategy::Acquisition(k) => Some(k.xi),
                    Strategy::RandomSearch => None,
                },
                completed_runs: finals.len(),
                final_mean: e.final_mean(),
                final_std: e.final_std(),
                final_median: median(&mut finals),
                complete: e.complete,
            }
        })
        .collect();
    let failures = summary
        .failures
        .iter()
        .map(|f| FailureRecord { acquisition: f.strategy.label(), seed: f.seed, error: f.error.to_string() })
        .collect();
    let doc = Summary { selected_acquisition: select_acquisition(summary).ok(), strategies, failures };
    write_json(&out.join("summary.json"), &doc)?;

    let manifest = Manifest {
        tool: "steerbo",
        version: env!("CARGO_PKG_VERSION"),
        command: "bo-run",
        config_digest: digest(resolved),
        space_digest: resolved.space.digest(),
        config: resolved,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

pub fn run(args: BoRunArgs) -> Result<(), CliError> {
    let (resolved, out, workers) = resolve(&args)?;
    prepare_output(&out)?;
    let objective = resolved.objective.build(&resolved.space)?;
    let mut strategies: Vec<Strategy> = resolved.acquisitions.iter().map(|k| Strategy::Acquisition(*k)).collect();
    if resolved.random_baseline {
        strategies.push(Strategy::RandomSearch);
    }
    let experiment = || run_experiment(&resolved.space, objective.as_ref(), &strategies, &resolved.plan);
    let summary = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?
            .install(experiment)?,
        None => experiment()?,
    };
    write_outputs(&resolved, &summary, &out)?;

    for e in &summary.entries {
        eprintln!(
            "{:>6}: final best-seen mean {:.6} std {:.6} over {} runs",
            e.strategy.label(),
            e.final_mean(),
            e.final_std(),
            e.finals.len()
        );
    }
    if let Some(first) = summary.failures.first() {
        return Err(CliError::Numeric(format!(
            "{} run(s) failed; first: {} seed {}: {}",
            summary.failures.len(),
            first.strategy.label(),
            first.seed,
            first.error
        )));
    }
    Ok(())
}
