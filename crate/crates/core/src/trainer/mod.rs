//! Deterministic desk-scale reference trainer.
//!
//! A run writes a checkpoint store: `run.json`, `labels.rdt` for the probe
//! set, `errors.csv`, per-grid-epoch activations under `epochs/<t>/` and the
//! model parameters under `params/<t>/`.

mod data;
mod grid;
mod model;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use data::{inject_label_noise, load_atypical_subset, DataSource, Dataset, DatasetConfig, Direction, Split};
pub use grid::{paper_epoch_grid, EpochGrid};
pub use model::{InputShape, LayerMap, Model, ModelKind, ParamSpec};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerConfig, OptimizerKind, SgdState};

use crate::error::{Error, Result};
use crate::rng::{shuffle, splitmix};
use crate::tensor_io::{open_checkpoint_store, write_manifest, write_tensor, CheckpointStore, RepresentationMatrix, RunManifest, StoreLayout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    #[default]
    Test,
}

/// The fixed examples whose activations are dumped at every grid epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ProbeSetConfig {
    #[serde(default)]
    pub source: SplitKind,
    /// First `count` examples of the split; all of them when absent.
    #[serde(default)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtypicalConfig {
    pub score_file: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub direction: Direction,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_batch_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub model: ModelKind,
    pub width_k: usize,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub total_epochs: u32,
    #[serde(default)]
    pub label_noise_fraction: f64,
    #[serde(default)]
    pub seeds: Seeds,
    pub epoch_grid: EpochGrid,
    #[serde(default)]
    pub probe_set: ProbeSetConfig,
    /// Layers whose parameters are never updated.
    #[serde(default)]
    pub frozen_layers: Vec<String>,
    #[serde(default)]
    pub atypical: Option<AtypicalConfig>,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.epoch_grid.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epoch_grid.last() > self.total_epochs {
            return Err(Error::Config(format!(
                "epoch grid reaches {} but total_epochs is {}",
                self.epoch_grid.last(),
                self.total_epochs
            )));
        }
        let layers = Model::layer_names(self.model);
        if let Some(bad) = self.frozen_layers.iter().find(|l| !layers.contains(&l.as_str())) {
            return Err(Error::Config(format!("frozen layer `{bad}` not in {layers:?}")));
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        Model::layer_names(self.model).iter().map(|s| s.to_string()).collect()
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::init(self.model, self.dataset.input, self.width_k, self.dataset.num_classes, self.seeds.init)
    }

    /// Materializes the dataset with label noise applied to the training
    /// labels. Also returns the flipped indices.
    pub fn training_data(&self) -> Result<(Dataset, Vec<usize>)> {
        let mut data = self.dataset.load()?;
        let (noisy, flipped) =
            inject_label_noise(&data.train.labels, self.label_noise_fraction, data.num_classes, self.seeds.noise)?;
        data.train.labels = noisy;
        Ok((data, flipped))
    }

    pub fn probe_split<'a>(&self, data: &'a Dataset) -> Result<(ndarray::ArrayView2<'a, f64>, &'a [u32])> {
        let split = match self.probe_set.source {
            SplitKind::Train => &data.train,
            SplitKind::Test => &data.test,
        };
        let count = self.probe_set.count.unwrap_or(split.len());
        if count < 2 || count > split.len() {
            return Err(Error::Config(format!(
                "probe set needs 2..={} examples, asked for {count}",
                split.len()
            )));
        }
        Ok((split.inputs.slice(ndarray::s![..count, ..]), &split.labels[..count]))
    }
}

/// Per-epoch misclassification rates, index = epoch (0 = before training).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorCurves {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub subset: Option<Vec<f64>>,
}

impl ErrorCurves {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

pub fn error_rate(predictions: &[u32], labels: &[u32]) -> f64 {
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

/// Misclassified fraction restricted to `subset`.
pub fn subset_error(predictions: &[u32], labels: &[u32], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("subset is empty".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut wrong = 0usize;
    for &i in subset {
        if i >= labels.len() {
            return Err(Error::InvalidArgument(format!("subset index {i} out of range")));
        }
        wrong += usize::from(predictions[i] != labels[i]);
    }
    Ok(wrong as f64 / subset.len() as f64)
}

/// First epoch whose train error is strictly below `threshold`.
pub fn detect_phase3(train_error: &[f64], threshold: f64) -> Option<u32> {
    train_error.iter().position(|&e| e < threshold).map(|t| t as u32)
}

fn dump_epoch(
    layout: &StoreLayout,
    model: &Model,
    epoch: u32,
    probe_inputs: ndarray::ArrayView2<f64>,
) -> Result<()> {
    let dir = layout.epoch_dir(epoch);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for layer in Model::layer_names(model.kind()) {
        let acts = model.layer_output(layer, probe_inputs)?;
        let rep = RepresentationMatrix::from_array(epoch, *layer, &acts)?;
        write_tensor(layout.activation(epoch, layer), rep.tensor())?;
    }
    model.save_params(&layout.params_dir(epoch))
}

pub fn write_errors_csv(path: &Path, curves: &ErrorCurves) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("no error curve entries to write".into()));
    }
    let mut out = String::from("epoch,train_error,test_error,subset_error\n");
    for t in 0..curves.len() {
        let subset = curves
            .subset
            .as_ref()
            .map(|s| format!("{:.6}", s[t]))
            .unwrap_or_default();
        out.push_str(&format!("{t},{:.6},{:.6},{subset}\n", curves.train[t], curves.test[t]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_errors_csv(path: &Path) -> Result<ErrorCurves> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut curves = ErrorCurves::default();
    let mut subset = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(i + 1, "expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(i + 1, "bad number"));
        curves.train.push(num(fields[1])?);
        curves.test.push(num(fields[2])?);
        if !fields[3].is_empty() {
            subset.push(num(fields[3])?);
        }
    }
    if !subset.is_empty() {
        if subset.len() != curves.train.len() {
            return Err(parse_err(0, "subset_error column partially filled"));
        }
        curves.subset = Some(subset);
    }
    Ok(curves)
}

/// Outcome of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: CheckpointStore,
    pub curves: ErrorCurves,
    pub phase3_epoch: Option<u32>,
}

/// Trains from the seeded initialization and writes a checkpoint store
/// under `out_root`. Epoch 0 is dumped before any update.
pub fn train_run(cfg: &TrainRunConfig, run_id: &str, out_root: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (data, flipped) = cfg.training_data()?;
    let subset: Option<Vec<usize>> = if !flipped.is_empty() {
        Some(flipped)
    } else if let Some(a) = &cfg.atypical {
        Some(load_atypical_subset(&a.score_file, data.train.len(), a.threshold, a.direction)?)
    } else {
        None
    };
    let subset = subset.filter(|s| !s.is_empty());

    let layout = StoreLayout::new(out_root);
    fs::create_dir_all(layout.epochs_dir()).map_err(|e| Error::io(layout.epochs_dir(), e))?;
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        layers: cfg.layer_names(),
        config: cfg.clone(),
    };
    write_manifest(&layout, &manifest)?;
    let (probe_inputs, probe_labels) = cfg.probe_split(&data)?;
    write_tensor(layout.labels(), &Tensor::from_u32(vec![probe_labels.len()], probe_labels.to_vec())?)?;

    let mut model = cfg.build_model()?;
    let trainable: Vec<bool> = model
        .param_specs()
        .iter()
        .map(|s| !cfg.frozen_layers.iter().any(|l| l == s.layer))
        .collect();
    let sizes: Vec<usize> = model.param_specs().iter().map(ParamSpec::len).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &sizes);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = splitmix(cfg.seeds.shuffle);

    let mut curves = ErrorCurves {
        subset: subset.as_ref().map(|_| Vec::new()),
        ..Default::default()
    };
    let record = |model: &Model, curves: &mut ErrorCurves| -> Result<()> {
        let train_pred = model.predict(data.train.inputs.view())?;
        let test_pred = model.predict(data.test.inputs.view())?;
        curves.train.push(error_rate(&train_pred, &data.train.labels));
        curves.test.push(error_rate(&test_pred, &data.test.labels));
        if let (Some(s), Some(idx)) = (curves.subset.as_mut(), subset.as_ref()) {
            s.push(subset_error(&train_pred, &data.train.labels, idx)?);
        }
        Ok(())
    };

    record(&model, &mut curves)?;
    if cfg.epoch_grid.contains(0) {
        dump_epoch(&layout, &model, 0, probe_inputs)?;
    }

    let d = data.train.inputs.ncols();
    for epoch in 1..=cfg.total_epochs {
        shuffle(&mut shuffle_rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x: Array2<f64> = data.train.inputs.select(Axis(0), batch);
            debug_assert_eq!(x.ncols(), d);
            let y: Vec<u32> = batch.iter().map(|&i| data.train.labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(x.view(), &y)?;
            if !loss.is_finite() {
                write_errors_csv(&layout.errors(), &curves)?;
                return Err(Error::Divergence { epoch });
            }
            optimizer.step(model.params_mut(), &grads, &trainable)?;
        }
        if model.params().iter().flatten().any(|v| !v.is_finite()) {
            write_errors_csv(&layout.errors(), &curves)?;
            return Err(Error::Divergence { epoch });
        }
        record(&model, &mut curves)?;
        if cfg.epoch_grid.contains(epoch) {
            dump_epoch(&layout, &model, epoch, probe_inputs)?;
        }
        log::debug!("epoch {epoch}: train error {:.4}", curves.train[epoch as usize]);
    }
    write_errors_csv(&layout.errors(), &curves)?;

    let phase3_epoch = detect_phase3(&curves.train, 1e-3);
    let store = open_checkpoint_store(out_root)?;
    Ok(TrainOutcome {
        store,
        curves,
        phase3_epoch,
    })
}

/// Rebuilds the model saved at a grid epoch of a store.
pub fn load_model(store: &CheckpointStore, epoch: u32) -> Result<Model> {
    let cfg = store.run_config();
    let mut model = Model::zeros(cfg.model, cfg.dataset.input, cfg.width_k, cfg.dataset.num_classes)?;
    let dir = store.layout().params_dir(epoch);
    if !dir.is_dir() {
        return Err(Error::Inconsistent(format!(
            "no saved parameters for epoch {epoch} at {}",
            dir.display()
        )));
    }
    model.load_params(&dir)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase3_first_crossing() {
        assert_eq!(detect_phase3(&[0.5, 0.0005, 0.002], 1e-3), Some(1));
        assert_eq!(detect_phase3(&[0.5, 0.2, 0.01], 1e-3), None);
        assert_eq!(detect_phase3(&[0.3, 0.0, 0.0], 0.0), None);
    }

    #[test]
    fn subset_error_cases() {
        let labels = [0, 1, 2, 3, 4];
        assert_eq!(subset_error(&labels, &labels, &[0, 1, 2, 3, 4]).unwrap(), 0.0);
        let pred = [0, 1, 0, 3, 4];
        assert_eq!(subset_error(&pred, &labels, &[1, 2, 3, 4]).unwrap(), 0.25);
        assert!(subset_error(&pred, &labels, &[]).is_err());
        assert!(subset_error(&pred, &labels, &[7]).is_err());
    }

    #[test]
    fn subset_error_vs_loop() {
        let mut rng = splitmix(17);
        let n = 200;
        let labels: Vec<u32> = (0..n).map(|_| crate::rng::below(&mut rng, 5) as u32).collect();
        let pred: Vec<u32> = (0..n).map(|_| crate::rng::below(&mut rng, 5) as u32).collect();
        let subset: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let mut wrong = 0;
        for &i in &subset {
            if pred[i] != labels[i] {
                wrong += 1;
            }
        }
        assert_eq!(subset_error(&pred, &labels, &subset).unwrap(), wrong as f64 / subset.len() as f64);
    }
}
