//! Decision region similarity of layer probes over input-space planes, and
//! decision-region fragmentation.
//!
//! Connectivity is 4-neighbour throughout.

use std::collections::BTreeMap;
use std::fs;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::cka::{Metric, SimilarityDiagram};
use crate::error::{Error, Result};
use crate::plane::{sample_grid, PlaneGrid, PlaneSpec, TripletSet};
use crate::probe::{argmax_rows, probe_predict, LinearProbe};
use crate::tensor_io::{read_tensor, write_tensor, CheckpointStore, StoreLayout, Tensor};
use crate::trainer::{load_model, EpochGrid, Model};

/// Maps raw inputs to a layer's representation.
pub trait FeatureMap: Sync {
    fn input_dim(&self) -> usize;
    fn features(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Maps raw inputs to class scores.
pub trait Classifier: Sync {
    fn input_dim(&self) -> usize;
    fn scores(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// The input itself as the representation.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl FeatureMap for IdentityMap {
    fn input_dim(&self) -> usize {
        self.0
    }

    fn features(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(inputs.to_owned())
    }
}

/// Predicted class per plane grid cell, row index along `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub plane_index: usize,
    rows: usize,
    cols: usize,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(plane_index: usize, rows: usize, cols: usize, labels: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || labels.len() != rows * cols {
            return Err(Error::Shape(format!(
                "label grid {rows}x{cols} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(LabelGrid {
            plane_index,
            rows,
            cols,
            labels,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.cols + j]
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_u32(vec![self.rows, self.cols], self.labels.clone())
    }
}

/// Something that assigns a class to every point of a plane grid.
pub trait GridLabeler: Sync {
    fn input_dim(&self) -> usize;
    fn label_points(&self, points: ArrayView2<f64>) -> Result<Vec<u32>>;
}

/// A layer feature map followed by its linear probe.
pub struct ProbeLabeler<'a, F: FeatureMap> {
    pub extractor: &'a F,
    pub probe: &'a LinearProbe,
}

impl<F: FeatureMap> GridLabeler for ProbeLabeler<'_, F> {
    fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    fn label_points(&self, points: ArrayView2<f64>) -> Result<Vec<u32>> {
        let feats = self.extractor.features(points)?;
        probe_predict(self.probe, feats.view())
    }
}

/// The full model's own prediction.
pub struct OutputLabeler<'a, C: Classifier>(pub &'a C);

impl<C: Classifier> GridLabeler for OutputLabeler<'_, C> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn label_points(&self, points: ArrayView2<f64>) -> Result<Vec<u32>> {
        Ok(argmax_rows(&self.0.scores(points)?))
    }
}

fn label_grid_with(labeler: &dyn GridLabeler, grid: &PlaneGrid, plane_index: usize) -> Result<LabelGrid> {
    if labeler.input_dim() != grid.points.ncols() {
        return Err(Error::Shape(format!(
            "labeler expects {} input features, plane points have {}",
            labeler.input_dim(),
            grid.points.ncols()
        )));
    }
    let labels = labeler.label_points(grid.points.view())?;
    LabelGrid::new(plane_index, grid.resolution.0, grid.resolution.1, labels)
}

/// Probe predictions of a layer over every point of a plane grid.
pub fn label_map<F: FeatureMap>(extractor: &F, probe: &LinearProbe, grid: &PlaneGrid, plane_index: usize) -> Result<LabelGrid> {
    label_grid_with(&ProbeLabeler { extractor, probe }, grid, plane_index)
}

/// Full-model predictions over every point of a plane grid.
pub fn output_label_map<C: Classifier>(model: &C, grid: &PlaneGrid, plane_index: usize) -> Result<LabelGrid> {
    label_grid_with(&OutputLabeler(model), grid, plane_index)
}

/// Number of cells on which two lists of label grids agree, and the total.
pub fn drs_counts(a: &[LabelGrid], b: &[LabelGrid]) -> Result<(u64, u64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("DRS needs equally many planes, got {} and {}", a.len(), b.len())));
    }
    let mut agree = 0u64;
    let mut total = 0u64;
    for (ga, gb) in a.iter().zip(b) {
        if ga.shape() != gb.shape() {
            return Err(Error::Shape(format!("plane grids {:?} and {:?} differ", ga.shape(), gb.shape())));
        }
        agree += ga.labels.iter().zip(&gb.labels).filter(|(x, y)| x == y).count() as u64;
        total += ga.labels.len() as u64;
    }
    Ok((agree, total))
}

/// Fraction of plane grid cells on which the two label maps agree.
pub fn drs(a: &[LabelGrid], b: &[LabelGrid]) -> Result<f64> {
    let (agree, total) = drs_counts(a, b)?;
    Ok(agree as f64 / total as f64)
}

/// Grid sampling parameters shared by every plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSampling {
    pub resolution: (usize, usize),
    pub margin: f64,
    pub clamp: Option<[f64; 2]>,
}

impl Default for GridSampling {
    fn default() -> Self {
        GridSampling {
            resolution: (crate::plane::DEFAULT_RESOLUTION, crate::plane::DEFAULT_RESOLUTION),
            margin: crate::plane::DEFAULT_MARGIN,
            clamp: None,
        }
    }
}

/// Label grids indexed `[labeler][plane]`. Each plane grid is sampled once
/// and shared by all labelers; planes are processed in parallel.
pub fn compute_label_maps(
    planes: &[PlaneSpec],
    sampling: GridSampling,
    labelers: &[&dyn GridLabeler],
) -> Result<Vec<Vec<LabelGrid>>> {
    let per_plane: Vec<Vec<LabelGrid>> = planes
        .par_iter()
        .enumerate()
        .map(|(p, spec)| {
            let grid = sample_grid(spec, sampling.resolution, sampling.margin, sampling.clamp)?;
            labelers.iter().map(|l| label_grid_with(*l, &grid, p)).collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<LabelGrid>> = (0..labelers.len()).map(|_| Vec::with_capacity(planes.len())).collect();
    for plane_maps in per_plane {
        for (l, g) in plane_maps.into_iter().enumerate() {
            out[l].push(g);
        }
    }
    Ok(out)
}

/// DRS between every pair of grid epochs from per-epoch label maps. Only the
/// upper triangle is evaluated; the result is mirrored.
pub fn drs_diagram_from_maps(
    grid: &EpochGrid,
    layer: &str,
    run_id: &str,
    maps: &[Vec<LabelGrid>],
) -> Result<SimilarityDiagram> {
    let n = grid.len();
    if maps.len() != n {
        return Err(Error::Shape(format!("{} label-map sets for {n} grid epochs", maps.len())));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| drs(&maps[i], &maps[j]))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((n, n));
    for (&(i, j), &v) in pairs.iter().zip(&vals) {
        values[(i, j)] = v;
        values[(j, i)] = v;
    }
    Ok(SimilarityDiagram {
        row_grid: grid.clone(),
        col_grid: grid.clone(),
        values,
        metric: Metric::Drs,
        layer_name: layer.to_string(),
        run_id_row: run_id.to_string(),
        run_id_col: run_id.to_string(),
    })
}

/// Plane specs for a triplet set over a store's training inputs.
pub fn store_planes(store: &CheckpointStore, triplets: &TripletSet) -> Result<Vec<PlaneSpec>> {
    let (data, _) = store.run_config().training_data()?;
    triplets.planes(data.train.inputs.view())
}

/// Grid sampling for a store: clamped when the dataset declares a pixel range.
pub fn store_sampling(store: &CheckpointStore, margin: f64) -> GridSampling {
    GridSampling {
        margin,
        clamp: store.run_config().dataset.pixel_range,
        ..Default::default()
    }
}

fn load_models(store: &CheckpointStore) -> Result<Vec<Model>> {
    store
        .epoch_grid()
        .epochs()
        .iter()
        .map(|&t| load_model(store, t))
        .collect()
}

/// Label maps of a layer's probes at every grid epoch, `[epoch][plane]`.
pub fn probe_label_maps(
    store: &CheckpointStore,
    layer: &str,
    probes: &BTreeMap<u32, LinearProbe>,
    planes: &[PlaneSpec],
    sampling: GridSampling,
) -> Result<Vec<Vec<LabelGrid>>> {
    store.check_layer(layer)?;
    let epochs = store.epoch_grid().epochs();
    for &t in epochs {
        if !probes.contains_key(&t) {
            return Err(Error::MissingProbe {
                layer: layer.to_string(),
                epoch: t,
            });
        }
    }
    let models = load_models(store)?;
    let extractors: Vec<_> = models.iter().map(|m| m.layer(layer)).collect::<Result<_>>()?;
    let labelers: Vec<ProbeLabeler<'_, _>> = extractors
        .iter()
        .zip(epochs)
        .map(|(extractor, t)| ProbeLabeler {
            extractor,
            probe: &probes[t],
        })
        .collect();
    let dyn_labelers: Vec<&dyn GridLabeler> = labelers.iter().map(|l| l as &dyn GridLabeler).collect();
    compute_label_maps(planes, sampling, &dyn_labelers)
}

/// Label maps of the full model's prediction at every grid epoch.
pub fn output_label_maps(store: &CheckpointStore, planes: &[PlaneSpec], sampling: GridSampling) -> Result<Vec<Vec<LabelGrid>>> {
    let models = load_models(store)?;
    let labelers: Vec<OutputLabeler<'_, Model>> = models.iter().map(OutputLabeler).collect();
    let dyn_labelers: Vec<&dyn GridLabeler> = labelers.iter().map(|l| l as &dyn GridLabeler).collect();
    compute_label_maps(planes, sampling, &dyn_labelers)
}

/// DRS diagram of a layer over the store's epoch grid. Also returns the
/// label maps, `[epoch][plane]`, so they can be persisted.
pub fn drs_diagram(
    store: &CheckpointStore,
    layer: &str,
    probes: &BTreeMap<u32, LinearProbe>,
    triplets: &TripletSet,
    margin: f64,
) -> Result<(SimilarityDiagram, Vec<Vec<LabelGrid>>)> {
    let planes = store_planes(store, triplets)?;
    let maps = probe_label_maps(store, layer, probes, &planes, store_sampling(store, margin))?;
    let diagram = drs_diagram_from_maps(store.epoch_grid(), layer, store.run_id(), &maps)?;
    Ok((diagram, maps))
}

/// Persists one epoch's label maps as a u32 tensor `[planes, rows, cols]`.
pub fn save_label_maps(layout: &StoreLayout, layer: &str, epoch: u32, maps: &[LabelGrid]) -> Result<()> {
    let path = layout.label_maps(layer, epoch);
    let dir = path.parent().expect("label map path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = maps.first().map(LabelGrid::shape).ok_or_else(|| Error::InvalidArgument("no label maps to save".into()))?;
    let mut data = Vec::with_capacity(maps.len() * rows * cols);
    for m in maps {
        if m.shape() != (rows, cols) {
            return Err(Error::Shape("label maps of one epoch must share a shape".into()));
        }
        data.extend_from_slice(&m.labels);
    }
    write_tensor(path, &Tensor::from_u32(vec![maps.len(), rows, cols], data)?)
}

pub fn load_label_maps(layout: &StoreLayout, layer: &str, epoch: u32) -> Result<Vec<LabelGrid>> {
    let path = layout.label_maps(layer, epoch);
    let t = read_tensor(&path)?;
    match (t.as_u32(), t.shape()) {
        (Some(data), &[planes, rows, cols]) => (0..planes)
            .map(|p| LabelGrid::new(p, rows, cols, data[p * rows * cols..(p + 1) * rows * cols].to_vec()))
            .collect(),
        _ => Err(Error::Inconsistent(format!(
            "{}: label maps must be a 3-D u32 tensor",
            path.display()
        ))),
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Number of maximal 4-connected regions of equal label.
pub fn fragment_count(grid: &LabelGrid) -> usize {
    let (rows, cols) = grid.shape();
    let mut ds = DisjointSet::new(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let here = i * cols + j;
            if j + 1 < cols && grid.labels[here] == grid.labels[here + 1] {
                ds.union(here, here + 1);
            }
            if i + 1 < rows && grid.labels[here] == grid.labels[here + cols] {
                ds.union(here, here + cols);
            }
        }
    }
    (0..rows * cols).filter(|&x| ds.find(x) == x).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentationScore {
    pub per_plane_counts: Vec<usize>,
    pub mean: f64,
}

/// Per-plane region counts and their mean.
pub fn fragmentation_score(grids: &[LabelGrid]) -> Result<FragmentationScore> {
    if grids.is_empty() {
        return Err(Error::InvalidArgument("fragmentation needs at least one plane".into()));
    }
    let per_plane_counts: Vec<usize> = grids.iter().map(fragment_count).collect();
    let mean = per_plane_counts.iter().sum::<usize>() as f64 / grids.len() as f64;
    Ok(FragmentationScore { per_plane_counts, mean })
}
