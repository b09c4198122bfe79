//! Datasets, label noise and the external atypicality score file.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{below, splitmix, unit_f64};
use crate::tensor_io::{read_tensor, TensorData};
use crate::trainer::model::InputShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub input: InputShape,
    /// Valid pixel range when inputs are bounded; enables clamping of plane
    /// grid points.
    #[serde(default)]
    pub pixel_range: Option<[f64; 2]>,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Class prototypes plus Gaussian pixel noise. A `hard_fraction` of the
    /// examples blend in another class's prototype.
    Synthetic {
        seed: u64,
        n_train: usize,
        n_test: usize,
        noise_std: f64,
        #[serde(default)]
        hard_fraction: f64,
    },
    /// REPDYN01 tensors: inputs `[n, C·H·W]` (or `[n, C, H, W]`), labels `[n]` u32.
    Files {
        train_inputs: PathBuf,
        train_labels: PathBuf,
        test_inputs: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Array2<f64>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    pub input: InputShape,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        if self.num_classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if let Some([lo, hi]) = self.pixel_range {
            if !(lo < hi) {
                return Err(Error::Config(format!("pixel_range [{lo}, {hi}] is empty")));
            }
        }
        let (train, test) = match &self.source {
            DataSource::Synthetic {
                seed,
                n_train,
                n_test,
                noise_std,
                hard_fraction,
            } => synthetic(self, *seed, *n_train, *n_test, *noise_std, *hard_fraction)?,
            DataSource::Files {
                train_inputs,
                train_labels,
                test_inputs,
                test_labels,
            } => (
                load_split(self, train_inputs, train_labels)?,
                load_split(self, test_inputs, test_labels)?,
            ),
        };
        Ok(Dataset {
            train,
            test,
            num_classes: self.num_classes,
            input: self.input,
        })
    }
}

fn synthetic(
    cfg: &DatasetConfig,
    seed: u64,
    n_train: usize,
    n_test: usize,
    noise_std: f64,
    hard_fraction: f64,
) -> Result<(Split, Split)> {
    if n_train < cfg.num_classes || n_test == 0 {
        return Err(Error::Config(format!(
            "synthetic dataset too small: {n_train} train / {n_test} test for {} classes",
            cfg.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&hard_fraction) || !(noise_std >= 0.0) {
        return Err(Error::Config("hard_fraction must be in [0,1] and noise_std >= 0".into()));
    }
    let d = cfg.input.dim();
    let classes = cfg.num_classes;
    let mut rng = splitmix(seed);
    let prototypes = class_prototypes(cfg.input, classes, &mut rng);
    let (lo, hi) = match cfg.pixel_range {
        Some([lo, hi]) => (lo, hi),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let mut make = |n: usize| {
        let mut inputs = Array2::zeros((n, d));
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
            let c = labels[i] as usize;
            let hard = unit_f64(&mut rng) < hard_fraction;
            let other = (c + 1 + below(&mut rng, classes as u64 - 1) as usize) % classes;
            let mix = if hard { 0.45 } else { 0.0 };
            for (j, v) in row.iter_mut().enumerate() {
                let base = (1.0 - mix) * prototypes[c][j] + mix * prototypes[other][j];
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = (base + noise_std * noise).clamp(lo, hi);
            }
        }
        Split { inputs, labels }
    };
    let train = make(n_train);
    let test = make(n_test);
    Ok((train, test))
}

/// Smooth random images: a 3×3 grid of uniform values per channel,
/// bilinearly upsampled to the input size.
fn class_prototypes(shape: InputShape, classes: usize, rng: &mut crate::rng::SplitMix64) -> Vec<Vec<f64>> {
    let InputShape { channels, height, width } = shape;
    (0..classes)
        .map(|_| {
            let mut img = vec![0.0; shape.dim()];
            for c in 0..channels {
                let coarse: Vec<f64> = (0..9).map(|_| unit_f64(rng)).collect();
                for y in 0..height {
                    let fy = if height > 1 { 2.0 * y as f64 / (height - 1) as f64 } else { 0.0 };
                    let (y0, ty) = ((fy.floor() as usize).min(1), fy - (fy.floor().min(1.0)));
                    for x in 0..width {
                        let fx = if width > 1 { 2.0 * x as f64 / (width - 1) as f64 } else { 0.0 };
                        let (x0, tx) = ((fx.floor() as usize).min(1), fx - (fx.floor().min(1.0)));
                        let at = |yy: usize, xx: usize| coarse[yy * 3 + xx];
                        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                        img[(c * height + y) * width + x] = top * (1.0 - ty) + bottom * ty;
                    }
                }
            }
            img
        })
        .collect()
}

fn load_split(cfg: &DatasetConfig, inputs: &Path, labels: &Path) -> Result<Split> {
    let x = read_tensor(inputs)?;
    let n = x.shape()[0];
    let d: usize = x.shape()[1..].iter().product();
    if d != cfg.input.dim() {
        return Err(Error::Config(format!(
            "{}: {d} features per example, config declares {}",
            inputs.display(),
            cfg.input.dim()
        )));
    }
    let values: Vec<f64> = match x.into_data() {
        TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
        TensorData::F64(v) => v,
        TensorData::U32(_) => {
            return Err(Error::Config(format!("{}: inputs must be f32 or f64", inputs.display())))
        }
    };
    let y = read_tensor(labels)?;
    let labels_vec = y
        .as_u32()
        .filter(|_| y.shape().len() == 1)
        .ok_or_else(|| Error::Config(format!("{}: labels must be a u32 vector", labels.display())))?
        .to_vec();
    if labels_vec.len() != n {
        return Err(Error::Config(format!(
            "{} has {} labels for {n} inputs",
            labels.display(),
            labels_vec.len()
        )));
    }
    if let Some(bad) = labels_vec.iter().find(|&&l| l as usize >= cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} >= num_classes {}", cfg.num_classes)));
    }
    Ok(Split {
        inputs: Array2::from_shape_vec((n, d), values).expect("sizes checked"),
        labels: labels_vec,
    })
}

/// Replaces `round(fraction·n)` distinct labels with a uniformly chosen
/// different class. Returns the noisy labels and the sorted flipped indices.
pub fn inject_label_noise(labels: &[u32], fraction: f64, num_classes: usize, seed: u64) -> Result<(Vec<u32>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("label noise fraction must be in [0, 1), got {fraction}")));
    }
    let n = labels.len();
    let count = (fraction * n as f64).round() as usize;
    if count > 0 && num_classes < 2 {
        return Err(Error::Config("label noise needs at least 2 classes".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Config(format!("label {bad} >= num_classes {num_classes}")));
    }
    let mut rng = splitmix(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + below(&mut rng, (n - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut flipped = order[..count].to_vec();
    flipped.sort_unstable();
    let mut noisy = labels.to_vec();
    for &i in &flipped {
        let r = below(&mut rng, num_classes as u64 - 1) as u32;
        noisy[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok((noisy, flipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Greater,
    Less,
}

/// Reads an `index,score` CSV covering every training index and returns the
/// indices whose score is strictly greater (or less) than `threshold`.
pub fn load_atypical_subset(path: &Path, n_train: usize, threshold: f64, direction: Direction) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut scores: Vec<Option<f64>> = vec![None; n_train];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("index")) {
            continue;
        }
        let (idx, score) = line
            .split_once(',')
            .ok_or_else(|| parse_err(lineno + 1, "expected `index,score`".into()))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno + 1, format!("bad index: {e}")))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno + 1, format!("bad score: {e}")))?;
        if idx >= n_train {
            return Err(parse_err(lineno + 1, format!("index {idx} >= training set size {n_train}")));
        }
        scores[idx] = Some(score);
    }
    let missing: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| i)
        .take(5)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("scores missing for training indices, first few: {missing:?}"),
        });
    }
    let subset: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let s = s.unwrap();
            match direction {
                Direction::Greater => s > threshold,
                Direction::Less => s < threshold,
            }
        })
        .map(|(i, _)| i)
        .collect();
    if subset.is_empty() {
        log::warn!(
            "{}: no score is {} than {threshold}; atypical subset is empty",
            path.display(),
            match direction {
                Direction::Greater => "greater",
                Direction::Less => "less",
            }
        );
    }
    Ok(subset)
}
