use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use steerbo_core::metrics::{
    error_summary, model_comparison_report, write_pvalue_csv, write_summary_csv, ComparisonReport, ErrorKind,
};
use steerbo_nn::container::{network_from_container, network_to_container, Container};
use steerbo_nn::data::{load_split, DatasetSplit, Sample};
use steerbo_nn::model::{
    build_jnet, build_pilotnet, build_stlstm, predict_angles, train as train_network, ArchitectureDescriptor,
    JNetConfig, Network, PilotNetConfig, StLstmConfig, TrainReport, TrainSettings,
};

use crate::config::{pick, prepare_output, require, resolve_seed, Arch, RunConfig};
use crate::{write_json, CliError, ConfigArg};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Cached dataset produced by `preprocess` or `synth-data`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Defaults to the ST-LSTM config's rate, else 1e-3.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Architecture choice plus its hyperparameters, as recorded in reports.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelChoice {
    Stlstm(StLstmConfig),
    Pilotnet(PilotNetConfig),
    Jnet(JNetConfig),
}

impl ModelChoice {
    pub fn from_config(arch: Arch, file: &RunConfig) -> Self {
        match arch {
            Arch::Stlstm => ModelChoice::Stlstm(file.stlstm.clone().unwrap_or_default()),
            Arch::Pilotnet => ModelChoice::Pilotnet(file.pilotnet.clone().unwrap_or_default()),
            Arch::Jnet => ModelChoice::Jnet(file.jnet.clone().unwrap_or_default()),
        }
    }

    pub fn descriptor(&self, input_shape: [usize; 4]) -> Result<ArchitectureDescriptor, CliError> {
        let built = match self {
            ModelChoice::Stlstm(c) => build_stlstm(c, input_shape),
            ModelChoice::Pilotnet(c) => build_pilotnet(c, input_shape),
            ModelChoice::Jnet(c) => build_jnet(c, input_shape),
        };
        // Any failure here means the architecture does not fit the data.
        built.map_err(|e| CliError::Config(format!("architecture does not fit input {input_shape:?}: {e}")))
    }

    fn learning_rate(&self) -> Option<f64> {
        match self {
            ModelChoice::Stlstm(c) => Some(c.learning_rate),
            _ => None,
        }
    }
}

fn input_shape(split: &DatasetSplit) -> Result<[usize; 4], CliError> {
    let first = split
        .train
        .first()
        .or(split.validation.first())
        .or(split.test.first())
        .ok_or_else(|| CliError::Data("dataset has no samples".into()))?;
    <[usize; 4]>::try_from(first.frames.shape())
        .map_err(|_| CliError::Data(format!("sample shape {:?} is not [T, H, W, C]", first.frames.shape())))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    model: &'a ModelChoice,
    settings: &'a TrainSettings,
    param_count: usize,
    dataset_sizes: [usize; 3],
    report: &'a TrainReport,
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let file = RunConfig::load(args.config.config.as_deref())?;
    let arch = pick(args.arch, file.arch, Arch::Stlstm);
    let dataset = require(args.dataset.clone().or(file.dataset.clone()), "--dataset")?;
    let out = pick(args.out.clone(), file.output.clone(), PathBuf::from("train-out"));
    let choice = ModelChoice::from_config(arch, &file);
    let defaults = TrainSettings::default();
    let settings = TrainSettings {
        learning_rate: args.lr.or(file.learning_rate).or(choice.learning_rate()).unwrap_or(defaults.learning_rate),
        epochs: pick(args.epochs, file.epochs, defaults.epochs),
        batch_size: pick(args.batch, file.batch_size, defaults.batch_size),
        patience: pick(args.patience, file.patience, defaults.patience),
        seed: resolve_seed(args.seed, file.base_seed)?,
        restore_best: true,
    };
    if settings.batch_size == 0 {
        return Err(CliError::Config("batch size must be at least 1".into()));
    }
    prepare_output(&out)?;

    let split = load_split(&dataset)?;
    let desc = choice.descriptor(input_shape(&split)?)?;
    let mut net = Network::from_descriptor(&desc, settings.seed)?;
    let report = train_network(&mut net, &split, &settings)?;

    network_to_container(&net).save(&out.join("weights.bin"))?;
    let doc = TrainOutput {
        model: &choice,
        settings: &settings,
        param_count: net.param_count(),
        dataset_sizes: [split.train.len(), split.validation.len(), split.test.len()],
        report: &report,
    };
    write_json(&out.join("report.json"), &doc)?;
    eprintln!(
        "{}: {} epochs, best validation MSE {:.6} at epoch {}",
        arch.name(),
        report.epochs_run,
        report.best_val_mse,
        report.best_epoch
    );
    if report.diverged {
        return Err(CliError::Numeric("training diverged (non-finite loss)".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ErrorArg {
    Absolute,
    Signed,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// `name=path` or a bare path (named after its parent directory); repeatable.
    #[arg(long = "weights")]
    pub weights: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Expected architecture; weights built for anything else are rejected.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Errors fed to the rank test.
    #[arg(long, value_enum, default_value = "absolute")]
    pub errors: ErrorArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_weight_arg(item: &str) -> (String, PathBuf) {
    match item.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(item);
            let name = path
                .parent()
                .and_then(Path::file_name)
                .or(path.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| item.to_string());
            (name, path)
        }
    }
}

fn load_model(path: &Path, expected: Option<&ArchitectureDescriptor>) -> Result<Network, CliError> {
    let container = Container::load(path)?;
    network_from_container(&container, expected).map_err(|e| match e {
        steerbo_nn::NnError::Config(msg) => {
            CliError::Config(format!("{}: weights do not match the requested architecture: {msg}", path.display()))
        }
        other => other.into(),
    })
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let file = RunConfig::load(args.config.config.as_deref())?;
    let items = if args.weights.is_empty() { file.weights.clone().unwrap_or_default() } else { args.weights.clone() };
    if items.is_empty() {
        return Err(CliError::Config("missing --weights".into()));
    }
    let models: Vec<(String, PathBuf)> = items.iter().map(|s| parse_weight_arg(s)).collect();
    for (i, (name, _)) in models.iter().enumerate() {
        if models[..i].iter().any(|(n, _)| n == name) {
            return Err(CliError::Config(format!("model name '{name}' used twice")));
        }
    }
    let dataset = require(args.dataset.clone().or(file.dataset.clone()), "--dataset")?;
    let out = pick(args.out.clone(), file.output.clone(), PathBuf::from("eval-out"));
    prepare_output(&out)?;

    let split = load_split(&dataset)?;
    let shape = input_shape(&split)?;
    let expected = match args.arch.or(file.arch) {
        Some(arch) => Some(ModelChoice::from_config(arch, &file).descriptor(shape)?),
        None => None,
    };
    let samples: &[Sample] = match args.split {
        SplitName::Train => &split.train,
        SplitName::Validation => &split.validation,
        SplitName::Test => &split.test,
    };
    if samples.is_empty() {
        return Err(CliError::Data(format!("{:?} split is empty", args.split).to_lowercase()));
    }
    let y: Vec<f64> = samples.iter().map(|s| s.label).collect();

    let mut predictions = Vec::with_capacity(models.len());
    for (name, path) in &models {
        let net = load_model(path, expected.as_ref())?;
        if expected.is_none() && net.descriptor().input_shape != shape {
            return Err(CliError::Config(format!(
                "{}: model input {:?} does not match dataset samples {shape:?}",
                path.display(),
                net.descriptor().input_shape
            )));
        }
        let p = predict_angles(&net, samples)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numeric(format!("model {name} produced non-finite predictions")));
        }
        predictions.push((name.clone(), p));
    }

    let kind = match args.errors {
        ErrorArg::Absolute => ErrorKind::Absolute,
        ErrorArg::Signed => ErrorKind::Signed,
    };
    let report = if predictions.len() >= 2 {
        model_comparison_report(&predictions, &y, kind).map_err(|e| CliError::Numeric(e.to_string()))?
    } else {
        let (name, p) = &predictions[0];
        ComparisonReport {
            models: vec![name.clone()],
            summaries: vec![error_summary(&y, p).map_err(|e| CliError::Numeric(e.to_string()))?],
            p_values: vec![vec![1.0]],
        }
    };
    write_summary_csv(&report, BufWriter::new(File::create(out.join("summary.csv"))?))?;
    if report.models.len() >= 2 {
        write_pvalue_csv(&report, BufWriter::new(File::create(out.join("pvalues.csv"))?))?;
    }
    write_predictions(&out.join("predictions.csv"), &y, &predictions)?;
    for (name, s) in report.models.iter().zip(&report.summaries) {
        eprintln!("{name}: mse {:.6} mae {:.6} n {}", s.mse, s.mae, s.n);
    }
    Ok(())
}

/// `index,label,<model>...`
fn write_predictions(path: &Path, y: &[f64], predictions: &[(String, Vec<f64>)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend(predictions.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (i, label) in y.iter().enumerate() {
        let mut rec = vec![i.to_string(), label.to_string()];
        rec.extend(predictions.iter().map(|(_, p)| p[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
