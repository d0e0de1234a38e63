//! Frame ingestion: labels file + binary PNM images, crop/resize to the
//! network input, 3-frame stacking, chronological splitting, and a
//! synthetic moving-bar generator for desk-scale experiments.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::{NnError, Tensor};

pub const TARGET_HEIGHT: usize = 66;
pub const TARGET_WIDTH: usize = 200;
pub const STACK: usize = 3;
pub const DEFAULT_CROP_TOP: usize = 80;
pub const DEFAULT_CROP_BOTTOM: usize = 26;

/// One 8-bit camera frame and its steering angle.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub index: usize,
    pub angle: f64,
}

/// Real-valued `height × width × channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Three stacked frames `[3, H, W, C]` labelled with the newest frame's angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Tensor,
    pub label: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Reads a binary PGM (P5) or PPM (P6) image with maxval ≤ 255.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), NnError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| NnError::Data(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported format {other}, expected P5 or P6"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let len = width * height * channels;
    if bytes.len() < pos + len {
        return Err(bad("truncated raster"));
    }
    Ok((width, height, channels, bytes[pos..pos + len].to_vec()))
}

pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<(), NnError> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(NnError::Data(format!("cannot write {c}-channel PNM"))),
    };
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Parses `<filename> <angle>` records, skipping blank lines.
pub fn parse_labels(text: &str) -> Result<Vec<(String, f64)>, NnError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(angle), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(NnError::Data(format!("line {}: expected `<filename> <angle>`", lineno + 1)));
        };
        let angle: f64 = angle
            .parse()
            .map_err(|_| NnError::Data(format!("line {}: angle '{angle}' is not a number", lineno + 1)))?;
        out.push((name.to_string(), angle));
    }
    Ok(out)
}

/// Loads frames in labels-file order. Image paths are relative to `image_dir`.
pub fn load_frames(image_dir: &Path, labels_file: &Path) -> Result<Vec<RawFrame>, NnError> {
    load_frame_range(image_dir, labels_file, None)
}

/// Like [`load_frames`], reading only records `range` of the labels file.
/// Frame indices stay relative to the whole file.
pub fn load_frame_range(
    image_dir: &Path,
    labels_file: &Path,
    range: Option<Range<usize>>,
) -> Result<Vec<RawFrame>, NnError> {
    let records = parse_labels(&fs::read_to_string(labels_file)?)?;
    let range = range.unwrap_or(0..records.len());
    if range.start > range.end || range.end > records.len() {
        return Err(NnError::Data(format!(
            "frame range {}..{} outside the {} labelled frames",
            range.start,
            range.end,
            records.len()
        )));
    }
    let mut frames: Vec<RawFrame> = Vec::with_capacity(range.len());
    for (index, (name, angle)) in records.into_iter().enumerate().skip(range.start).take(range.len()) {
        let path = image_dir.join(&name);
        if !path.exists() {
            return Err(NnError::Data(format!("missing image {}", path.display())));
        }
        let (width, height, channels, pixels) = read_pnm(&path)?;
        if let Some(first) = frames.first() {
            if (first.width, first.height, first.channels) != (width, height, channels) {
                return Err(NnError::Data(format!(
                    "{name}: {width}x{height}x{channels} differs from {}x{}x{}",
                    first.width, first.height, first.channels
                )));
            }
        }
        frames.push(RawFrame { width, height, channels, pixels, index, angle });
    }
    Ok(frames)
}

/// Bilinear resampling with half-pixel centers, clamped at the borders.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let coord = |d: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let c = img.channels;
    let mut data = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, sy, img.height);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, sx, img.width);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                data[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image { height: out_h, width: out_w, channels: c, data }
}

pub fn scale_pixel(v: f64) -> f64 {
    v / 127.5 - 1.0
}

/// Crops rows, resizes to 66×200 and maps pixel values to `[-1, 1]`.
pub fn preprocess(frame: &RawFrame, crop_top: usize, crop_bottom: usize) -> Result<Image, NnError> {
    if crop_top + crop_bottom >= frame.height {
        return Err(NnError::Data(format!(
            "crop {crop_top}+{crop_bottom} leaves no rows of a {}-row frame",
            frame.height
        )));
    }
    if frame.pixels.len() != frame.width * frame.height * frame.channels {
        return Err(NnError::Data("frame pixel count does not match its dimensions".into()));
    }
    let rows = frame.height - crop_top - crop_bottom;
    let row_len = frame.width * frame.channels;
    let data = frame.pixels[crop_top * row_len..(crop_top + rows) * row_len].iter().map(|&p| f64::from(p)).collect();
    let cropped = Image { height: rows, width: frame.width, channels: frame.channels, data };
    let mut out = resize_bilinear(&cropped, TARGET_HEIGHT, TARGET_WIDTH);
    out.data.iter_mut().for_each(|v| *v = scale_pixel(*v));
    Ok(out)
}

/// Sliding window of three consecutive images; label from the newest.
pub fn stack_frames(images: &[(Image, f64)]) -> Result<Vec<Sample>, NnError> {
    if images.len() < STACK {
        return Err(NnError::Data(format!("need at least {STACK} frames, got {}", images.len())));
    }
    let (h, w, c) = (images[0].0.height, images[0].0.width, images[0].0.channels);
    if images.iter().any(|(im, _)| (im.height, im.width, im.channels) != (h, w, c)) {
        return Err(NnError::Data("frames differ in size".into()));
    }
    let mut out = Vec::with_capacity(images.len() - 2);
    for win in images.windows(STACK) {
        let mut data = Vec::with_capacity(STACK * h * w * c);
        for (im, _) in win {
            data.extend_from_slice(&im.data);
        }
        out.push(Sample { frames: Tensor::new(&[STACK, h, w, c], data)?, label: win[STACK - 1].1 });
    }
    Ok(out)
}

/// Contiguous split: ⌊f₀·n⌋ train, ⌊f₁·n⌋ validation, remainder test.
pub fn split_dataset(samples: Vec<Sample>, fractions: (f64, f64, f64)) -> Result<DatasetSplit, NnError> {
    if samples.is_empty() {
        return Err(NnError::Data("cannot split an empty dataset".into()));
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(NnError::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = samples.len();
    let (n_train, n_val) = split_sizes(n, a, b);
    let mut rest = samples;
    let mut tail = rest.split_off(n_train);
    let test = tail.split_off(n_val);
    Ok(DatasetSplit { train: rest, validation: tail, test })
}

/// Train/validation sizes; a small guard absorbs binary representation error
/// in products such as `0.16 * 39000`.
pub fn split_sizes(n: usize, train: f64, val: f64) -> (usize, usize) {
    let n_train = (train * n as f64 + 1e-9).floor() as usize;
    let n_val = ((val * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    (n_train, n_val)
}

/// Settings of the moving-bar generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the label noise.
    pub label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { height: 16, width: 32, channels: 1, label_noise: 0.02 }
    }
}

/// Frames showing a bright vertical bar drifting smoothly across a noisy
/// background; each frame's angle is `2 (p - 1/2)` of the bar position
/// `p ∈ [0, 1]` plus Gaussian-like label noise.
pub fn synth_frames(n: usize, spec: &SynthSpec, seed: u64) -> Vec<RawFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p1, p2): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let bar = (w / 8).max(1);
    (0..n)
        .map(|t| {
            let tf = t as f64;
            let pos = 0.5 + 0.3 * (tf / 7.0 + p1).sin() + 0.15 * (tf / 3.1 + p2).sin();
            let pos = pos.clamp(0.0, 1.0);
            let center = (pos * (w - 1) as f64).round() as isize;
            let mut pixels = Vec::with_capacity(w * h * c);
            for _y in 0..h {
                for x in 0..w {
                    let on = (x as isize - center).abs() <= (bar / 2) as isize;
                    for _ in 0..c {
                        let noise: f64 = rng.gen_range(0.0..20.0);
                        let base = if on { 220.0 } else { 30.0 };
                        pixels.push((base + noise).min(255.0) as u8);
                    }
                }
            }
            // sum of uniforms: cheap, seeded, approximately normal
            let z: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            let angle = 2.0 * (pos - 0.5) + spec.label_noise * z;
            RawFrame { width: w, height: h, channels: c, pixels, index: t, angle }
        })
        .collect()
}

/// Bar position the generator used for frame `t`, recovered from pixels.
pub fn bar_position(frame: &RawFrame) -> f64 {
    let (w, c) = (frame.width, frame.channels);
    let mut col_mean = vec![0.0; w];
    for y in 0..frame.height {
        for x in 0..w {
            for ch in 0..c {
                col_mean[x] += f64::from(frame.pixels[(y * w + x) * c + ch]);
            }
        }
    }
    let total: f64 = col_mean.iter().map(|v| v.max(0.0)).sum();
    let weighted: f64 = col_mean.iter().enumerate().map(|(x, v)| x as f64 * v).sum();
    // Subtract the uniform background so the centroid is dominated by the bar.
    let bg = col_mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let excess: Vec<f64> = col_mean.iter().map(|v| v - bg).collect();
    let ex_total: f64 = excess.iter().sum();
    if ex_total <= 0.0 {
        return weighted / total / (w - 1).max(1) as f64;
    }
    excess.iter().enumerate().map(|(x, v)| x as f64 * v).sum::<f64>() / ex_total / (w - 1).max(1) as f64
}

/// `n` synthetic frames scaled to `[-1, 1]` and stacked: `n - 2` samples.
pub fn synth_dataset(n: usize, spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>, NnError> {
    if n < STACK {
        return Err(NnError::Data(format!("synthetic dataset needs at least {STACK} frames")));
    }
    let images: Vec<(Image, f64)> = synth_frames(n, spec, seed)
        .into_iter()
        .map(|f| {
            let data = f.pixels.iter().map(|&p| scale_pixel(f64::from(p))).collect();
            (Image { height: f.height, width: f.width, channels: f.channels, data }, f.angle)
        })
        .collect();
    stack_frames(&images)
}

fn samples_to_arrays(samples: &[Sample], frame_shape: &[usize]) -> Result<(Tensor, Tensor), NnError> {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(frame_shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        data.extend_from_slice(s.frames.data());
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((Tensor::new(&shape, data)?, Tensor::new(&[samples.len()], labels)?))
}

/// Caches a split in the binary container format.
pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<(), NnError> {
    let first = split
        .train
        .first()
        .or(split.validation.first())
        .or(split.test.first())
        .ok_or_else(|| NnError::Data("empty split".into()))?;
    let frame_shape = first.frames.shape().to_vec();
    let meta = serde_json::json!({
        "kind": "dataset",
        "frame_shape": frame_shape,
        "counts": [split.train.len(), split.validation.len(), split.test.len()],
    });
    let mut c = Container::new(meta);
    for (name, part) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        let (x, y) = samples_to_arrays(part, &frame_shape)?;
        c.push(format!("{name}.frames"), x);
        c.push(format!("{name}.labels"), y);
    }
    c.save(path)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit, NnError> {
    let c = Container::load(path)?;
    if c.meta.get("kind").and_then(|v| v.as_str()) != Some("dataset") {
        return Err(NnError::Data(format!("{} is not a cached dataset", path.display())));
    }
    let mut parts = Vec::with_capacity(3);
    for name in ["train", "validation", "test"] {
        let x = c.get(&format!("{name}.frames")).ok_or_else(|| NnError::Data(format!("missing {name}.frames")))?;
        let y = c.get(&format!("{name}.labels")).ok_or_else(|| NnError::Data(format!("missing {name}.labels")))?;
        let n = y.len();
        if x.shape().first() != Some(&n) {
            return Err(NnError::Data(format!("{name}: frame/label count mismatch")));
        }
        parts.push((0..n).map(|i| Sample { frames: x.index_outer(i), label: y.data()[i] }).collect::<Vec<_>>());
    }
    let test = parts.pop().unwrap_or_default();
    let validation = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(DatasetSplit { train, validation, test })
}
