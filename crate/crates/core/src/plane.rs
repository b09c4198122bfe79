//! Planes in input space through triplets of training examples, and their
//! uniform sample grids.
//!
//! The origin is the first anchor, `u` points from it to the second anchor
//! and `v` is the Gram-Schmidt residual of the third. Grids cover the
//! anchors' bounding box in `(u, v)` coordinates, widened by a margin.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{below, splitmix};

pub const DEFAULT_RESOLUTION: usize = 50;
pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_PLANES: usize = 500;

/// Collinearity tolerance relative to `‖x3 − x1‖`.
const COLLINEAR_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSpec {
    pub anchor_indices: [usize; 3],
    pub origin: Vec<f64>,
    pub basis_u: Vec<f64>,
    pub basis_v: Vec<f64>,
    pub anchor_coords: [(f64, f64); 3],
}

impl PlaneSpec {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// `origin + a·u + b·v`
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.basis_u)
            .zip(&self.basis_v)
            .map(|((o, u), v)| o + a * u + b * v)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn make_plane(x1: &[f64], x2: &[f64], x3: &[f64], indices: [usize; 3]) -> Result<PlaneSpec> {
    if x1.len() != x2.len() || x1.len() != x3.len() || x1.is_empty() {
        return Err(Error::Shape(format!(
            "triplet vectors have dimensions {}, {}, {}",
            x1.len(),
            x2.len(),
            x3.len()
        )));
    }
    let d12 = sub(x2, x1);
    let d13 = sub(x3, x1);
    let len12 = norm(&d12);
    let len13 = norm(&d13);
    let tolerance = COLLINEAR_RTOL * len13;
    if len12 == 0.0 {
        return Err(Error::Collinear { residual: 0.0, tolerance });
    }
    let u: Vec<f64> = d12.iter().map(|x| x / len12).collect();
    let a3 = dot(&d13, &u);
    let residual: Vec<f64> = d13.iter().zip(&u).map(|(d, uu)| d - a3 * uu).collect();
    let res_norm = norm(&residual);
    if res_norm == 0.0 || res_norm < tolerance {
        return Err(Error::Collinear {
            residual: res_norm,
            tolerance,
        });
    }
    let mut v: Vec<f64> = residual.iter().map(|x| x / res_norm).collect();
    // one re-orthogonalization pass against u
    let drift = dot(&v, &u);
    v.iter_mut().zip(&u).for_each(|(vv, uu)| *vv -= drift * uu);
    let vn = norm(&v);
    v.iter_mut().for_each(|vv| *vv /= vn);

    let b3 = dot(&d13, &v);
    Ok(PlaneSpec {
        anchor_indices: indices,
        origin: x1.to_vec(),
        basis_u: u,
        basis_v: v,
        anchor_coords: [(0.0, 0.0), (len12, 0.0), (a3, b3)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Extent {
    pub fn contains(&self, (a, b): (f64, f64)) -> bool {
        (self.u_min..=self.u_max).contains(&a) && (self.v_min..=self.v_max).contains(&b)
    }
}

/// `resolution.0 × resolution.1` points on a plane; row `i` of the grid runs
/// along `u`, column `j` along `v`, and point `(i, j)` is stored at
/// `points.row(i·resolution.1 + j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub spec: PlaneSpec,
    pub resolution: (usize, usize),
    pub extent: Extent,
    pub u_values: Vec<f64>,
    pub v_values: Vec<f64>,
    pub points: Array2<f64>,
}

impl PlaneGrid {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn point(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.points.row(i * self.resolution.1 + j)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * (i as f64 / last) })
        .collect()
}

/// Samples the anchors' bounding box, widened by `margin` times its width
/// and height on each side, with endpoints included on both axes. `clamp`
/// limits every coordinate to a bounded pixel range.
pub fn sample_grid(spec: &PlaneSpec, resolution: (usize, usize), margin: f64, clamp: Option<[f64; 2]>) -> Result<PlaneGrid> {
    if resolution.0 < 2 || resolution.1 < 2 {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution:?} needs at least 2 per axis")));
    }
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::InvalidArgument(format!("margin must be finite and >= 0, got {margin}")));
    }
    let us = spec.anchor_coords.map(|c| c.0);
    let vs = spec.anchor_coords.map(|c| c.1);
    let (u0, u1) = (us.iter().cloned().fold(f64::INFINITY, f64::min), us.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (v0, v1) = (vs.iter().cloned().fold(f64::INFINITY, f64::min), vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (width, height) = (u1 - u0, v1 - v0);
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument("anchor bounding box has zero area".into()));
    }
    let extent = Extent {
        u_min: u0 - margin * width,
        u_max: u1 + margin * width,
        v_min: v0 - margin * height,
        v_max: v1 + margin * height,
    };
    let u_values = linspace(extent.u_min, extent.u_max, resolution.0);
    let v_values = linspace(extent.v_min, extent.v_max, resolution.1);
    let d = spec.dim();
    let mut points = Array2::zeros((resolution.0 * resolution.1, d));
    for (i, &a) in u_values.iter().enumerate() {
        for (j, &b) in v_values.iter().enumerate() {
            let mut row = points.row_mut(i * resolution.1 + j);
            for k in 0..d {
                let mut x = spec.origin[k] + a * spec.basis_u[k] + b * spec.basis_v[k];
                if let Some([lo, hi]) = clamp {
                    x = x.clamp(lo, hi);
                }
                row[k] = x;
            }
        }
    }
    Ok(PlaneGrid {
        spec: spec.clone(),
        resolution,
        extent,
        u_values,
        v_values,
        points,
    })
}

/// A fixed list of anchor triplets reused by every DRS computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub seed: u64,
    pub triplets: Vec<[usize; 3]>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Plane specs for every triplet over the given dataset rows.
    pub fn planes(&self, inputs: ArrayView2<f64>) -> Result<Vec<PlaneSpec>> {
        self.triplets
            .iter()
            .map(|&[a, b, c]| {
                let n = inputs.nrows();
                if a >= n || b >= n || c >= n {
                    return Err(Error::InvalidArgument(format!(
                        "triplet ({a}, {b}, {c}) indexes past {n} examples"
                    )));
                }
                let row = |i: usize| inputs.row(i).to_vec();
                make_plane(&row(a), &row(b), &row(c), [a, b, c])
            })
            .collect()
    }

    /// First line `seed,<seed>`, then one `i1,i2,i3` line per triplet.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("seed,{}\n", self.seed);
        for [a, b, c] in &self.triplets {
            out.push_str(&format!("{a},{b},{c}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines();
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed,"))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(1, "expected `seed,<u64>`"))?;
        let mut triplets = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<usize> = line
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(i + 2, "expected three indices"))?;
            match parts.as_slice() {
                &[a, b, c] => triplets.push([a, b, c]),
                _ => return Err(err(i + 2, "expected three indices")),
            }
        }
        Ok(TripletSet { seed, triplets })
    }
}

/// Draws `n_q` triplets of distinct indices from a SplitMix64 stream seeded
/// with `seed`. Each index comes from [`below`]; repeated indices within a
/// triplet are redrawn, and collinear triplets are discarded and drawn anew.
pub fn sample_triplets(inputs: ArrayView2<f64>, n_q: usize, seed: u64) -> Result<TripletSet> {
    let n = inputs.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 examples, dataset has {n}")));
    }
    let mut rng = splitmix(seed);
    let mut triplets = Vec::with_capacity(n_q);
    let mut rejected = 0usize;
    while triplets.len() < n_q {
        let a = below(&mut rng, n as u64) as usize;
        let mut b = below(&mut rng, n as u64) as usize;
        while b == a {
            b = below(&mut rng, n as u64) as usize;
        }
        let mut c = below(&mut rng, n as u64) as usize;
        while c == a || c == b {
            c = below(&mut rng, n as u64) as usize;
        }
        let row = |i: usize| inputs.row(i).to_vec();
        match make_plane(&row(a), &row(b), &row(c), [a, b, c]) {
            Ok(_) => triplets.push([a, b, c]),
            Err(Error::Collinear { .. }) => {
                rejected += 1;
                if rejected > 10 * n_q.max(1) {
                    return Err(Error::InvalidArgument(format!(
                        "gave up after {rejected} collinear triplets"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TripletSet { seed, triplets })
}
