//! Linear-kernel centered kernel alignment between representation matrices,
//! batched averaging, and epoch-by-epoch similarity diagrams.
//!
//! All arithmetic is f64 regardless of the stored activation precision.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{CheckpointStore, RepresentationMatrix};
use crate::trainer::EpochGrid;

/// Relative size below which a centered Gram matrix counts as zero.
const ZERO_VARIANCE_RTOL: f64 = 1e-12;

/// `K = F·Fᵀ` for a representation matrix.
pub fn gram(f: &RepresentationMatrix) -> Array2<f64> {
    gram_of(f.to_f64().view())
}

pub fn gram_of(f: ArrayView2<f64>) -> Array2<f64> {
    f.dot(&f.t())
}

/// `H·K·H` with `H = I − 11ᵀ/m`, computed by subtracting row and column means.
pub fn center(k: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, n) = k.dim();
    if m != n {
        return Err(Error::Shape(format!("centering needs a square matrix, got {m}x{n}")));
    }
    if m < 2 {
        return Err(Error::Shape("centering needs m >= 2".into()));
    }
    let inv = 1.0 / m as f64;
    let row_means: Vec<f64> = k.rows().into_iter().map(|r| r.sum() * inv).collect();
    let col_means: Vec<f64> = k.columns().into_iter().map(|c| c.sum() * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    Ok(Array2::from_shape_fn((m, m), |(i, j)| {
        k[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

/// Sample-size normalization applied to `vec(K')·vec(L')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HsicDenominator {
    /// `m − 1`
    #[default]
    Linear,
    /// `(m − 1)²`
    Squared,
}

impl HsicDenominator {
    fn value(self, m: usize) -> f64 {
        let d = (m - 1) as f64;
        match self {
            HsicDenominator::Linear => d,
            HsicDenominator::Squared => d * d,
        }
    }
}

/// `vec(Kc)·vec(Lc) / (m − 1)` for centered Gram matrices.
pub fn hsic0(kc: &Array2<f64>, lc: &Array2<f64>) -> Result<f64> {
    hsic0_with(kc, lc, HsicDenominator::Linear)
}

pub fn hsic0_with(kc: &Array2<f64>, lc: &Array2<f64>, denom: HsicDenominator) -> Result<f64> {
    if kc.dim() != lc.dim() || kc.nrows() != kc.ncols() {
        return Err(Error::Shape(format!(
            "HSIC operands must be equal square matrices, got {:?} and {:?}",
            kc.dim(),
            lc.dim()
        )));
    }
    if kc.nrows() < 2 {
        return Err(Error::Shape("HSIC needs m >= 2".into()));
    }
    let dot: f64 = kc.iter().zip(lc.iter()).map(|(a, b)| a * b).sum();
    Ok(dot / denom.value(kc.nrows()))
}

/// A centered Gram matrix together with its self-HSIC, ready for pairing.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    centered: Array2<f64>,
    self_hsic: f64,
}

impl CenteredGram {
    pub fn new(f: ArrayView2<f64>, denom: HsicDenominator) -> Result<Self> {
        let k = gram_of(f);
        let centered = center(&k)?;
        let self_hsic = hsic0_with(&centered, &centered, denom)?;
        let k_norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        let kc_norm = (self_hsic * denom.value(k.nrows())).sqrt();
        if !(kc_norm > ZERO_VARIANCE_RTOL * k_norm) {
            return Err(Error::ZeroVariance);
        }
        Ok(CenteredGram { centered, self_hsic })
    }

    pub fn alignment(&self, other: &CenteredGram, denom: HsicDenominator) -> Result<f64> {
        let cross = hsic0_with(&self.centered, &other.centered, denom)?;
        Ok(cross / (self.self_hsic * other.self_hsic).sqrt())
    }
}

/// CKA of two full activation matrices (rows are the same examples).
pub fn cka_arrays(f: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    cka_arrays_with(f, g, HsicDenominator::Linear)
}

pub fn cka_arrays_with(f: ArrayView2<f64>, g: ArrayView2<f64>, denom: HsicDenominator) -> Result<f64> {
    if f.nrows() != g.nrows() {
        return Err(Error::Shape(format!(
            "representations cover {} and {} examples",
            f.nrows(),
            g.nrows()
        )));
    }
    let kf = CenteredGram::new(f, denom)?;
    let kg = CenteredGram::new(g, denom)?;
    kf.alignment(&kg, denom)
}

fn check_batch(batch: &[usize], m: usize) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("a CKA batch needs at least 2 examples".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= m) {
        return Err(Error::InvalidArgument(format!("batch index {bad} out of range for m = {m}")));
    }
    Ok(())
}

/// `HSIC₀(F,G) / √(HSIC₀(F,F)·HSIC₀(G,G))` on the rows listed in `batch`.
pub fn cka(f: &RepresentationMatrix, g: &RepresentationMatrix, batch: &[usize]) -> Result<f64> {
    if f.rows() != g.rows() {
        return Err(Error::Shape(format!("representations cover {} and {} examples", f.rows(), g.rows())));
    }
    check_batch(batch, f.rows())?;
    cka_arrays(f.select_rows_f64(batch).view(), g.select_rows_f64(batch).view())
}

/// Disjoint example batches over the probe set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkaBatchPlan {
    batches: Vec<Vec<usize>>,
}

impl CkaBatchPlan {
    pub fn new(batches: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("batch plan is empty".into()));
        }
        let mut seen = vec![false; m];
        for b in &batches {
            check_batch(b, m)?;
            for &i in b {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("example {i} appears in two batches")));
                }
            }
        }
        Ok(CkaBatchPlan { batches })
    }

    /// One batch holding every example.
    pub fn full(m: usize) -> Result<Self> {
        Self::new(vec![(0..m).collect()], m)
    }

    /// `batch_count` batches of `batch_size`, filled from a class-interleaved
    /// ordering so each batch holds nearly equal counts per class.
    pub fn stratified(labels: &[u32], batch_count: usize, batch_size: usize) -> Result<Self> {
        let m = labels.len();
        if batch_count == 0 || batch_count * batch_size > m {
            return Err(Error::InvalidArgument(format!(
                "{batch_count} batches of {batch_size} do not fit in {m} examples"
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let longest = by_class.values().map(Vec::len).max().unwrap_or(0);
        let mut order = Vec::with_capacity(m);
        for r in 0..longest {
            for members in by_class.values() {
                if let Some(&i) = members.get(r) {
                    order.push(i);
                }
            }
        }
        let batches = order
            .chunks(batch_size)
            .take(batch_count)
            .map(|c| c.to_vec())
            .collect();
        Self::new(batches, m)
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn max_index(&self) -> usize {
        self.batches.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Mean of per-batch CKA values.
pub fn batched_cka(f: &RepresentationMatrix, g: &RepresentationMatrix, plan: &CkaBatchPlan) -> Result<f64> {
    let mut total = 0.0;
    for batch in plan.batches() {
        total += cka(f, g, batch)?;
    }
    Ok(total / plan.batches().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cka,
    Drs,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cka => "cka",
            Metric::Drs => "drs",
        }
    }
}

/// Similarity values for every (row epoch, column epoch) pair of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDiagram {
    pub row_grid: EpochGrid,
    pub col_grid: EpochGrid,
    pub values: Array2<f64>,
    pub metric: Metric,
    pub layer_name: String,
    pub run_id_row: String,
    pub run_id_col: String,
}

impl SimilarityDiagram {
    pub fn is_square_same_run(&self) -> bool {
        self.run_id_row == self.run_id_col && self.row_grid == self.col_grid
    }

    pub fn max_asymmetry(&self) -> f64 {
        let (r, c) = self.values.dim();
        if r != c {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..i {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst
    }
}

fn centered_grams(
    store: &CheckpointStore,
    layer: &str,
    plan: &CkaBatchPlan,
) -> Result<Vec<Vec<CenteredGram>>> {
    store
        .epoch_grid()
        .epochs()
        .par_iter()
        .map(|&epoch| {
            let rep = store.load_representation(epoch, layer)?;
            plan.batches()
                .iter()
                .map(|b| CenteredGram::new(rep.select_rows_f64(b).view(), HsicDenominator::Linear))
                .collect()
        })
        .collect()
}

fn pair_value(a: &[CenteredGram], b: &[CenteredGram]) -> Result<f64> {
    let mut total = 0.0;
    for (ka, kb) in a.iter().zip(b) {
        total += ka.alignment(kb, HsicDenominator::Linear)?;
    }
    Ok(total / a.len() as f64)
}

/// CKA between every row-store epoch and every column-store epoch. When both
/// arguments are the same store only the upper triangle is computed and then
/// mirrored.
pub fn cka_diagram(
    store_row: &CheckpointStore,
    store_col: &CheckpointStore,
    layer: &str,
    plan: &CkaBatchPlan,
) -> Result<SimilarityDiagram> {
    store_row.check_layer(layer)?;
    store_col.check_layer(layer)?;
    if store_row.labels() != store_col.labels() {
        return Err(Error::Inconsistent(
            "stores were evaluated on different probe sets (labels differ)".into(),
        ));
    }
    if plan.max_index() >= store_row.probe_count() {
        return Err(Error::InvalidArgument(format!(
            "batch plan indexes example {} but the probe set has {}",
            plan.max_index(),
            store_row.probe_count()
        )));
    }
    let same = std::ptr::eq(store_row, store_col) || store_row.root() == store_col.root();

    let row_grams = centered_grams(store_row, layer, plan)?;
    let col_grams_owned;
    let col_grams = if same {
        &row_grams
    } else {
        col_grams_owned = centered_grams(store_col, layer, plan)?;
        &col_grams_owned
    };

    let (rows, cols) = (row_grams.len(), col_grams.len());
    let pairs: Vec<(usize, usize)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .filter(|&(i, j)| !same || j >= i)
        .collect();
    let computed: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| pair_value(&row_grams[i], &col_grams[j]))
        .collect::<Result<_>>()?;

    let mut values = Array2::zeros((rows, cols));
    for (&(i, j), &v) in pairs.iter().zip(&computed) {
        values[(i, j)] = v;
        if same {
            values[(j, i)] = v;
        }
    }
    Ok(SimilarityDiagram {
        row_grid: store_row.epoch_grid().clone(),
        col_grid: store_col.epoch_grid().clone(),
        values,
        metric: Metric::Cka,
        layer_name: layer.to_string(),
        run_id_row: store_row.run_id().to_string(),
        run_id_col: store_col.run_id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{splitmix, unit_f64};

    fn random(m: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = splitmix(seed);
        Array2::from_shape_fn((m, p), |_| unit_f64(&mut rng) * 2.0 - 1.0)
    }

    fn explicit_h(m: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64)
    }

    #[test]
    fn gram_small_cases() {
        let eye = RepresentationMatrix::from_rows(0, "l", 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram(&eye), Array2::<f64>::eye(2));
        let dup = RepresentationMatrix::from_rows(0, "l", 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(gram(&dup), Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn gram_matches_brute_force() {
        let f = random(5, 3, 1);
        let k = gram_of(f.view());
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += f[(i, c)] * f[(j, c)];
                }
                assert!((k[(i, j)] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn centering_cases() {
        let ones = Array2::<f64>::ones((5, 5));
        assert!(center(&ones).unwrap().iter().all(|v| v.abs() < 1e-15));

        let mut rng = splitmix(2);
        let a = Array2::from_shape_fn((6, 6), |_| unit_f64(&mut rng));
        let k = &a + &a.t();
        let h = explicit_h(6);
        let explicit = h.dot(&k).dot(&h);
        let fast = center(&k).unwrap();
        assert!((&fast - &explicit).iter().all(|v| v.abs() <= 1e-12));

        let again = center(&fast).unwrap();
        assert!((&again - &fast).iter().all(|v| v.abs() <= 1e-12));
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in fast.rows() {
            assert!(r.sum().abs() <= 1e-9 * norm);
        }
        assert!(center(&Array2::ones((1, 1))).is_err());
        assert!(center(&Array2::ones((2, 3))).is_err());
    }

    #[test]
    fn hsic_cases() {
        let kc = center(&gram_of(random(4, 3, 3).view())).unwrap();
        let zero = Array2::zeros((4, 4));
        assert_eq!(hsic0(&kc, &zero).unwrap(), 0.0);
        let self_h = hsic0(&kc, &kc).unwrap();
        let fro: f64 = kc.iter().map(|v| v * v).sum();
        assert!((self_h - fro / 3.0).abs() <= 1e-12);
        assert!(self_h >= 0.0);

        let lc = center(&gram_of(random(4, 2, 4).view())).unwrap();
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += kc[(i, j)] * lc[(i, j)];
            }
        }
        assert!((hsic0(&kc, &lc).unwrap() - s / 3.0).abs() <= 1e-12);
        assert!(hsic0(&kc, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn self_similarity_and_scaling() {
        let f = random(20, 6, 5);
        assert!((cka_arrays(f.view(), f.view()).unwrap() - 1.0).abs() <= 1e-9);
        let scaled = &f * 3.7;
        assert!((cka_arrays(f.view(), scaled.view()).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_representation_is_an_error() {
        let f = Array2::from_elem((6, 3), 0.7);
        let g = random(6, 3, 6);
        assert!(matches!(cka_arrays(f.view(), g.view()), Err(Error::ZeroVariance)));
    }

    #[test]
    fn denominator_cancels() {
        let f = random(12, 5, 7);
        let g = random(12, 9, 8);
        let a = cka_arrays_with(f.view(), g.view(), HsicDenominator::Linear).unwrap();
        let b = cka_arrays_with(f.view(), g.view(), HsicDenominator::Squared).unwrap();
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }

    #[test]
    fn stratified_plan_balances_classes() {
        let labels: Vec<u32> = (0..100).map(|i| (i * 7 % 5) as u32).collect();
        let plan = CkaBatchPlan::stratified(&labels, 4, 20).unwrap();
        assert_eq!(plan.batches().len(), 4);
        for b in plan.batches() {
            let mut counts = [0; 5];
            b.iter().for_each(|&i| counts[labels[i] as usize] += 1);
            assert_eq!(counts, [4; 5]);
        }
        assert!(CkaBatchPlan::stratified(&labels, 4, 30).is_err());
        assert!(CkaBatchPlan::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(CkaBatchPlan::new(vec![vec![0]], 3).is_err());
    }

    #[test]
    fn batched_mean() {
        let f = RepresentationMatrix::from_array(0, "l", &random(30, 4, 9)).unwrap();
        let g = RepresentationMatrix::from_array(0, "l", &random(30, 6, 10)).unwrap();
        let full = CkaBatchPlan::full(30).unwrap();
        assert_eq!(batched_cka(&f, &g, &full).unwrap(), cka(&f, &g, &(0..30).collect::<Vec<_>>()).unwrap());
        let b1: Vec<usize> = (0..15).collect();
        let b2: Vec<usize> = (15..30).collect();
        let plan = CkaBatchPlan::new(vec![b1.clone(), b2.clone()], 30).unwrap();
        let expected = (cka(&f, &g, &b1).unwrap() + cka(&f, &g, &b2).unwrap()) / 2.0;
        assert!((batched_cka(&f, &g, &plan).unwrap() - expected).abs() <= 1e-12);
        assert!((batched_cka(&f, &f, &plan).unwrap() - 1.0).abs() <= 1e-9);
    }
}
