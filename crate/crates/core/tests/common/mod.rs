//! Independent reference implementations shared by the integration tests.
//! None of them call into the library's numerical code.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn to_array(a: &Mat) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((a.len(), a[0].len()), |(i, j)| a[i][j])
}

/// `H·K·H` with the explicit centering matrix `H = I − 11ᵀ/m`.
fn center_explicit(k: &Mat) -> Mat {
    let m = k.len();
    let h: Mat = (0..m)
        .map(|i| (0..m).map(|j| f64::from(u8::from(i == j)) - 1.0 / m as f64).collect())
        .collect();
    matmul(&matmul(&h, k), &h)
}

fn vec_dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum()
}

/// Linear CKA written out from its definition.
pub fn oracle_cka(f: &Mat, g: &Mat) -> f64 {
    let m = f.len() as f64;
    let kc = center_explicit(&matmul(f, &transpose(f)));
    let lc = center_explicit(&matmul(g, &transpose(g)));
    let hsic = |a: &Mat, b: &Mat| vec_dot(a, b) / ((m - 1.0) * (m - 1.0));
    hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut Xoshiro256PlusPlus, n: usize) -> Mat {
    let a = gaussian(rng, n, n);
    let mut q: Mat = Vec::with_capacity(n);
    for col in a {
        let mut v = col;
        for _ in 0..2 {
            for b in &q {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    q
}

/// Connected 4-neighbour regions of equal label, by recursive flood fill.
pub fn flood_fill_count(labels: &[u32], rows: usize, cols: usize) -> usize {
    fn fill(labels: &[u32], seen: &mut [bool], rows: usize, cols: usize, i: usize, j: usize, label: u32) {
        let at = i * cols + j;
        if seen[at] || labels[at] != label {
            return;
        }
        seen[at] = true;
        if i > 0 {
            fill(labels, seen, rows, cols, i - 1, j, label);
        }
        if i + 1 < rows {
            fill(labels, seen, rows, cols, i + 1, j, label);
        }
        if j > 0 {
            fill(labels, seen, rows, cols, i, j - 1, label);
        }
        if j + 1 < cols {
            fill(labels, seen, rows, cols, i, j + 1, label);
        }
    }
    let mut seen = vec![false; labels.len()];
    let mut count = 0;
    for i in 0..rows {
        for j in 0..cols {
            if !seen[i * cols + j] {
                count += 1;
                fill(labels, &mut seen, rows, cols, i, j, labels[i * cols + j]);
            }
        }
    }
    count
}

/// A small MLP run config; `lr = 0` gives a run whose parameters never move.
pub fn tiny_config(lr: f64, epochs: u32, grid: &[u32]) -> repdyn::trainer::TrainRunConfig {
    let cfg = serde_json::json!({
        "model": "mlp",
        "width_k": 6,
        "dataset": {
            "num_classes": 3,
            "input": { "channels": 1, "height": 2, "width": 3 },
            "source": { "kind": "synthetic", "seed": 5, "n_train": 90, "n_test": 100, "noise_std": 0.3 }
        },
        "optimizer": { "kind": "adam", "learning_rate": lr },
        "batch_size": 32,
        "total_epochs": epochs,
        "seeds": { "init": 1, "shuffle": 2, "noise": 3 },
        "epoch_grid": grid
    });
    serde_json::from_value(cfg).unwrap()
}

pub fn tiny_store(dir: &Path, name: &str, lr: f64) -> PathBuf {
    let root = dir.join(name);
    repdyn::trainer::train_run(&tiny_config(lr, 4, &[0, 1, 2, 4]), name, &root).unwrap();
    root
}

/// All files under `root`, as sorted relative paths.
pub fn list_files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
