use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use steerbo_nn::data::{
    load_frame_range, preprocess as preprocess_frame, save_split, split_dataset, stack_frames, synth_dataset,
    synth_frames, write_pnm, DatasetSplit, SynthSpec, DEFAULT_CROP_BOTTOM, DEFAULT_CROP_TOP,
};

use crate::config::{parse_split, pick, prepare_output, require, resolve_seed, RunConfig};
use crate::{write_json, CliError, ConfigArg};

const DEFAULT_SPLIT: [f64; 3] = [0.64, 0.16, 0.20];

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory holding the PGM/PPM frames.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// `<filename> <angle>` per line, in temporal order.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub crop_top: Option<usize>,
    #[arg(long)]
    pub crop_bottom: Option<usize>,
    /// Train, validation and test fractions, e.g. `0.64,0.16,0.2`.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[f64; 3]>,
    /// Half-open range `START:END` of labels-file records to use.
    #[arg(long, value_parser = parse_range)]
    pub range: Option<[usize; 2]>,
}

fn parse_range(text: &str) -> Result<[usize; 2], String> {
    let (a, b) = text.split_once(':').ok_or("range must look like START:END")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad range bound '{v}': {e}"));
    Ok([parse(a)?, parse(b)?])
}

#[derive(Serialize)]
struct DatasetInfo {
    frames: usize,
    samples: usize,
    sample_shape: Vec<usize>,
    counts: [usize; 3],
    split: [f64; 3],
}

fn write_dataset(
    split: &DatasetSplit,
    frames: usize,
    fractions: [f64; 3],
    out: &std::path::Path,
) -> Result<(), CliError> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_output(parent)?;
    }
    save_split(split, out)?;
    let first = split.train.first().or(split.validation.first()).or(split.test.first());
    let info = DatasetInfo {
        frames,
        samples: split.train.len() + split.validation.len() + split.test.len(),
        sample_shape: first.map(|s| s.frames.shape().to_vec()).unwrap_or_default(),
        counts: [split.train.len(), split.validation.len(), split.test.len()],
        split: fractions,
    };
    write_json(&out.with_extension("json"), &info)?;
    eprintln!("wrote {} ({} / {} / {} samples)", out.display(), info.counts[0], info.counts[1], info.counts[2]);
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<(), CliError> {
    let file = RunConfig::load(args.config.config.as_deref())?;
    let images = require(args.images.clone().or(file.images.clone()), "--images")?;
    let labels = require(args.labels.clone().or(file.labels.clone()), "--labels")?;
    let out = pick(args.out.clone(), file.dataset.clone(), PathBuf::from("dataset.bin"));
    let crop_top = pick(args.crop_top, file.crop_top, DEFAULT_CROP_TOP);
    let crop_bottom = pick(args.crop_bottom, file.crop_bottom, DEFAULT_CROP_BOTTOM);
    let fractions = pick(args.split, file.split, DEFAULT_SPLIT);

    let range = args.range.or(file.frame_range).map(|[a, b]| a..b);
    let frames = load_frame_range(&images, &labels, range)?;
    let n = frames.len();
    let processed = frames
        .iter()
        .map(|f| preprocess_frame(f, crop_top, crop_bottom).map(|im| (im, f.angle)))
        .collect::<Result<Vec<_>, _>>()?;
    let samples = stack_frames(&processed)?;
    let split = split_dataset(samples, (fractions[0], fractions[1], fractions[2]))?;
    write_dataset(&split, n, fractions, &out)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Number of frames; the dataset holds two fewer samples.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[f64; 3]>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the raw frames as PGM images plus a labels file, the
    /// layout `preprocess` reads.
    #[arg(long)]
    pub raw_dir: Option<PathBuf>,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let file = RunConfig::load(args.config.config.as_deref())?;
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        height: pick(args.height, file.synth_height, defaults.height),
        width: pick(args.width, file.synth_width, defaults.width),
        ..defaults
    };
    if spec.height == 0 || spec.width == 0 {
        return Err(CliError::Config("synthetic frames need positive height and width".into()));
    }
    let n = pick(args.frames, file.synth_frames, 66);
    let seed = resolve_seed(args.seed, file.base_seed)?;
    let fractions = pick(args.split, file.split, DEFAULT_SPLIT);
    let out = pick(args.out.clone(), file.dataset.clone(), PathBuf::from("synth.bin"));
    if n < 3 {
        return Err(CliError::Config("at least 3 frames are needed".into()));
    }

    let split = split_dataset(synth_dataset(n, &spec, seed)?, (fractions[0], fractions[1], fractions[2]))?;
    write_dataset(&split, n, fractions, &out)?;

    if let Some(dir) = &args.raw_dir {
        prepare_output(dir)?;
        let mut labels = String::new();
        for f in synth_frames(n, &spec, seed) {
            let name = format!("frame{:06}.pgm", f.index);
            write_pnm(&dir.join(&name), f.width, f.height, f.channels, &f.pixels)?;
            writeln!(labels, "{name} {}", f.angle).expect("writing to a String");
        }
        std::fs::write(dir.join("labels.txt"), labels)?;
    }
    Ok(())
}
