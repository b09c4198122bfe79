//! Linear classifier probes on frozen layer representations.
//!
//! A probe is a bias-free weight matrix `W` (classes × features) scored as
//! `softmax(W·f(x))` and trained with cross-entropy and Adam.

use std::collections::BTreeMap;
use std::fs;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{shuffle, splitmix};
use crate::tensor_io::{read_tensor, write_tensor, CheckpointStore, RepresentationMatrix, StoreLayout, Tensor};
use crate::trainer::{adam_step, AdamState, OptimizerConfig};

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its gradient
/// with respect to the logits. Uses max-subtraction for stability.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Array2::zeros((n, classes));
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[i] as usize;
        loss += lse - row[y];
        let mut g = grad.row_mut(i);
        for (c, &z) in row.iter().enumerate() {
            g[c] = ((z - lse).exp() - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<u32> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Loss and weight gradient of a probe on one batch.
pub fn probe_loss_grad(weights: &Array2<f64>, reps: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    if reps.ncols() != weights.ncols() {
        return Err(Error::Shape(format!(
            "probe has {} inputs, representation has {}",
            weights.ncols(),
            reps.ncols()
        )));
    }
    let logits = reps.dot(&weights.t());
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, dlogits.t().dot(&reps)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 128,
            shuffle_seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Array2<f64>,
    pub layer_name: String,
    pub source_epoch: u32,
    pub config: ProbeTrainConfig,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn predict(&self, reps: ArrayView2<f64>) -> Result<Vec<u32>> {
        probe_predict(self, reps)
    }
}

/// Trains a zero-initialized probe for `cfg.epochs` passes over the data,
/// visiting minibatches in a freshly shuffled order each epoch.
pub fn train_probe(reps: &RepresentationMatrix, labels: &[u32], num_classes: usize, cfg: &ProbeTrainConfig) -> Result<LinearProbe> {
    if labels.len() != reps.rows() {
        return Err(Error::Shape(format!("{} labels for {} representation rows", labels.len(), reps.rows())));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 classes".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("labels contain a single class".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config("probe batch_size must be positive and learning_rate >= 0".into()));
    }
    let x = reps.to_f64();
    let opt = cfg.optimizer();
    let mut weights = Array2::<f64>::zeros((num_classes, reps.cols()));
    let mut state = AdamState::new(weights.len());
    let mut order: Vec<usize> = (0..reps.rows()).collect();
    let mut rng = splitmix(cfg.shuffle_seed);
    for _ in 0..cfg.epochs {
        shuffle(&mut rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(ndarray::Axis(0), batch);
            let yb: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grad) = probe_loss_grad(&weights, xb.view(), &yb)?;
            let w = weights.as_slice_mut().expect("standard layout");
            adam_step(w, grad.as_slice().expect("standard layout"), &mut state, &opt)?;
        }
    }
    Ok(LinearProbe {
        weights,
        layer_name: reps.layer_name.clone(),
        source_epoch: reps.epoch,
        config: cfg.clone(),
    })
}

/// One probe per grid epoch of a store's layer, trained in parallel on the
/// store's probe set.
pub fn train_store_probes(store: &CheckpointStore, layer: &str, cfg: &ProbeTrainConfig) -> Result<BTreeMap<u32, LinearProbe>> {
    store.check_layer(layer)?;
    let classes = store.run_config().dataset.num_classes;
    store
        .epoch_grid()
        .epochs()
        .par_iter()
        .map(|&t| {
            let reps = store.load_representation(t, layer)?;
            Ok((t, train_probe(&reps, store.labels(), classes, cfg)?))
        })
        .collect()
}

/// Loads a layer's probes for every grid epoch of a store.
pub fn load_store_probes(store: &CheckpointStore, layer: &str) -> Result<BTreeMap<u32, LinearProbe>> {
    store.check_layer(layer)?;
    store
        .epoch_grid()
        .epochs()
        .iter()
        .map(|&t| Ok((t, load_probe(store.layout(), layer, t)?)))
        .collect()
}

/// Class with the largest score `W·x` per row. Softmax is monotone, so it is
/// skipped.
pub fn probe_predict(probe: &LinearProbe, reps: ArrayView2<f64>) -> Result<Vec<u32>> {
    if reps.ncols() != probe.input_dim() {
        return Err(Error::Shape(format!(
            "probe expects {} features, got {}",
            probe.input_dim(),
            reps.ncols()
        )));
    }
    Ok(argmax_rows(&reps.dot(&probe.weights.t())))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeSidecar {
    layer: String,
    epoch: u32,
    num_classes: usize,
    features: usize,
    config: ProbeTrainConfig,
}

pub fn save_probe(layout: &StoreLayout, probe: &LinearProbe) -> Result<()> {
    let path = layout.probe(&probe.layer_name, probe.source_epoch);
    let dir = path.parent().expect("probe path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = Tensor::from_f64(
        vec![probe.num_classes(), probe.input_dim()],
        probe.weights.iter().cloned().collect(),
    )?;
    write_tensor(&path, &t)?;
    let sidecar = ProbeSidecar {
        layer: probe.layer_name.clone(),
        epoch: probe.source_epoch,
        num_classes: probe.num_classes(),
        features: probe.input_dim(),
        config: probe.config.clone(),
    };
    let side = layout.probe_sidecar(&probe.layer_name, probe.source_epoch);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, text + "\n").map_err(|e| Error::io(side, e))
}

pub fn load_probe(layout: &StoreLayout, layer: &str, epoch: u32) -> Result<LinearProbe> {
    let path = layout.probe(layer, epoch);
    if !path.is_file() {
        return Err(Error::MissingProbe {
            layer: layer.to_string(),
            epoch,
        });
    }
    let t = read_tensor(&path)?;
    let weights = match (t.as_f64(), t.shape()) {
        (Some(v), &[c, p]) => Array2::from_shape_vec((c, p), v.to_vec()).expect("shape checked"),
        _ => {
            return Err(Error::Inconsistent(format!(
                "{}: probe weights must be a 2-D f64 tensor",
                path.display()
            )))
        }
    };
    let side = layout.probe_sidecar(layer, epoch);
    let config = match fs::read_to_string(&side) {
        Ok(text) => {
            let s: ProbeSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: side.clone(),
                message: e.to_string(),
            })?;
            s.config
        }
        Err(e) => return Err(Error::io(side, e)),
    };
    Ok(LinearProbe {
        weights,
        layer_name: layer.to_string(),
        source_epoch: epoch,
        config,
    })
}
