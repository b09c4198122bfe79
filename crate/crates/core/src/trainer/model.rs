//! The two desk-scale reference models with hand-written backprop.
//!
//! `conv2`: 3×3 valid convolution with `width_k` channels, ReLU, 2×2 average
//! pooling, flatten, fully connected to the classes. Layers: `conv`, `fc`.
//!
//! `mlp`: fully connected hidden layer of `width_k` ReLU units, then fully
//! connected to the classes. Layers: `hidden`, `fc`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::drs::{Classifier, FeatureMap};
use crate::error::{Error, Result};
use crate::probe::softmax_cross_entropy;
use crate::rng::{splitmix, unit_f64};
use crate::tensor_io::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Conv2,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    /// Layer the parameter belongs to.
    pub layer: &'static str,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    input: InputShape,
    width_k: usize,
    num_classes: usize,
    params: Vec<Vec<f64>>,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn features(&self) -> usize {
        self.k * self.ph * self.pw
    }
}

/// Intermediate values kept for the backward pass.
enum Cache {
    Conv { pre: Vec<f64>, pooled: Array2<f64> },
    Mlp { pre: Array2<f64>, hidden: Array2<f64> },
}

impl Model {
    pub fn layer_names(kind: ModelKind) -> &'static [&'static str] {
        match kind {
            ModelKind::Conv2 => &["conv", "fc"],
            ModelKind::Mlp => &["hidden", "fc"],
        }
    }

    /// Zero-initialized model; see [`Model::init`] for the seeded version.
    pub fn zeros(kind: ModelKind, input: InputShape, width_k: usize, num_classes: usize) -> Result<Self> {
        if width_k == 0 || num_classes < 2 || input.dim() == 0 {
            return Err(Error::Config(format!(
                "model needs width_k >= 1, >= 2 classes and a nonempty input (got k={width_k}, classes={num_classes}, input {input:?})"
            )));
        }
        if kind == ModelKind::Conv2 && (input.height < 4 || input.width < 4) {
            return Err(Error::Config(format!(
                "conv2 needs inputs of at least 4x4, got {}x{}",
                input.height, input.width
            )));
        }
        let mut model = Model {
            kind,
            input,
            width_k,
            num_classes,
            params: Vec::new(),
        };
        model.params = model.param_specs().iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(model)
    }

    /// Uniform ±1/√fan_in for every weight and bias, drawn in parameter order
    /// from one SplitMix64 stream.
    pub fn init(kind: ModelKind, input: InputShape, width_k: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(kind, input, width_k, num_classes)?;
        let mut rng = splitmix(seed);
        let specs = model.param_specs();
        for (spec, values) in specs.iter().zip(&mut model.params) {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            for v in values.iter_mut() {
                *v = (2.0 * unit_f64(&mut rng) - 1.0) * bound;
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn geom(&self) -> ConvGeom {
        let InputShape { channels, height, width } = self.input;
        let (oh, ow) = (height - 2, width - 2);
        ConvGeom {
            c: channels,
            h: height,
            w: width,
            k: self.width_k,
            oh,
            ow,
            ph: oh / 2,
            pw: ow / 2,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.width_k;
        let classes = self.num_classes;
        let spec = |name: &str, layer, shape: Vec<usize>, fan_in| ParamSpec {
            name: name.to_string(),
            layer,
            shape,
            fan_in,
        };
        match self.kind {
            ModelKind::Conv2 => {
                let g = self.geom();
                let f = g.features();
                vec![
                    spec("conv.weight", "conv", vec![k, g.c, 3, 3], g.c * 9),
                    spec("conv.bias", "conv", vec![k], g.c * 9),
                    spec("fc.weight", "fc", vec![classes, f], f),
                    spec("fc.bias", "fc", vec![classes], f),
                ]
            }
            ModelKind::Mlp => {
                let d = self.input.dim();
                vec![
                    spec("hidden.weight", "hidden", vec![k, d], d),
                    spec("hidden.bias", "hidden", vec![k], d),
                    spec("fc.weight", "fc", vec![classes, k], k),
                    spec("fc.bias", "fc", vec![classes], k),
                ]
            }
        }
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input.dim() {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {}",
                self.input.dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    fn fc(&self, features: &Array2<f64>) -> Array2<f64> {
        let w = ArrayView2::from_shape((self.num_classes, features.ncols()), &self.params[2]).unwrap();
        let mut logits = features.dot(&w.t());
        for mut row in logits.rows_mut() {
            row.iter_mut().zip(&self.params[3]).for_each(|(z, b)| *z += b);
        }
        logits
    }

    fn conv_forward(&self, inputs: &ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let g = self.geom();
        let n = inputs.nrows();
        let (weight, bias) = (&self.params[0], &self.params[1]);
        let plane = g.oh * g.ow;
        let mut pre = vec![0.0; n * g.k * plane];
        let mut pooled = Array2::<f64>::zeros((n, g.features()));
        for (s, x) in inputs.rows().into_iter().enumerate() {
            let x = x.as_slice().expect("row-major inputs");
            let z = &mut pre[s * g.k * plane..(s + 1) * g.k * plane];
            for o in 0..g.k {
                let zo = &mut z[o * plane..(o + 1) * plane];
                zo.iter_mut().for_each(|v| *v = bias[o]);
                for c in 0..g.c {
                    let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = weight[((o * g.c + c) * 3 + ky) * 3 + kx];
                            for y in 0..g.oh {
                                let src = &xc[(y + ky) * g.w + kx..(y + ky) * g.w + kx + g.ow];
                                let dst = &mut zo[y * g.ow..(y + 1) * g.ow];
                                dst.iter_mut().zip(src).for_each(|(d, &xv)| *d += wv * xv);
                            }
                        }
                    }
                }
                let mut out = pooled.row_mut(s);
                for py in 0..g.ph {
                    for px in 0..g.pw {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += zo[(2 * py + dy) * g.ow + 2 * px + dx].max(0.0);
                            }
                        }
                        out[(o * g.ph + py) * g.pw + px] = 0.25 * acc;
                    }
                }
            }
        }
        (pre, pooled)
    }

    fn mlp_hidden(&self, inputs: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.input.dim();
        let w = ArrayView2::from_shape((self.width_k, d), &self.params[0]).unwrap();
        let mut pre = inputs.dot(&w.t());
        for mut row in pre.rows_mut() {
            row.iter_mut().zip(&self.params[1]).for_each(|(z, b)| *z += b);
        }
        let hidden = pre.mapv(|v| v.max(0.0));
        (pre, hidden)
    }

    fn forward(&self, inputs: &ArrayView2<f64>) -> (Cache, Array2<f64>) {
        match self.kind {
            ModelKind::Conv2 => {
                let (pre, pooled) = self.conv_forward(inputs);
                let logits = self.fc(&pooled);
                (Cache::Conv { pre, pooled }, logits)
            }
            ModelKind::Mlp => {
                let (pre, hidden) = self.mlp_hidden(inputs);
                let logits = self.fc(&hidden);
                (Cache::Mlp { pre, hidden }, logits)
            }
        }
    }

    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        Ok(self.forward(&inputs).1)
    }

    /// Activations of a named layer: pooled conv maps / hidden units, or the
    /// logits for `fc`.
    pub fn layer_output(&self, layer: &str, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        match (self.kind, layer) {
            (_, "fc") => Ok(self.forward(&inputs).1),
            (ModelKind::Conv2, "conv") => Ok(self.conv_forward(&inputs).1),
            (ModelKind::Mlp, "hidden") => Ok(self.mlp_hidden(&inputs).1),
            _ => Err(Error::LayerNotFound {
                layer: layer.to_string(),
                available: Self::layer_names(self.kind).iter().map(|s| s.to_string()).collect(),
            }),
        }
    }

    pub fn layer(&self, layer: &str) -> Result<LayerMap<'_>> {
        if !Self::layer_names(self.kind).contains(&layer) {
            return Err(Error::LayerNotFound {
                layer: layer.to_string(),
                available: Self::layer_names(self.kind).iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(LayerMap { model: self, layer: layer.to_string() })
    }

    /// Mean softmax cross-entropy over the batch and its gradient for every
    /// parameter tensor.
    pub fn loss_and_grads(&self, inputs: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_inputs(&inputs)?;
        if labels.len() != inputs.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.nrows()
            )));
        }
        let (cache, logits) = self.forward(&inputs);
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;

        let features = match &cache {
            Cache::Conv { pooled, .. } => pooled,
            Cache::Mlp { hidden, .. } => hidden,
        };
        let d_fc_w = dlogits.t().dot(features);
        let d_fc_b = dlogits.sum_axis(Axis(0));
        let fc_w = ArrayView2::from_shape((self.num_classes, features.ncols()), &self.params[2]).unwrap();
        let d_features = dlogits.dot(&fc_w);

        let (d_first_w, d_first_b) = match &cache {
            Cache::Conv { pre, .. } => self.conv_backward(&inputs, pre, &d_features),
            Cache::Mlp { pre, .. } => {
                let mut d_pre = d_features;
                d_pre.zip_mut_with(pre, |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                let dw = d_pre.t().dot(&inputs);
                let db = d_pre.sum_axis(Axis(0));
                (dw.into_raw_vec_and_offset().0, db.to_vec())
            }
        };
        Ok((
            loss,
            vec![
                d_first_w,
                d_first_b,
                d_fc_w.into_raw_vec_and_offset().0,
                d_fc_b.to_vec(),
            ],
        ))
    }

    fn conv_backward(&self, inputs: &ArrayView2<f64>, pre: &[f64], d_pooled: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let g = self.geom();
        let plane = g.oh * g.ow;
        let mut dw = vec![0.0; g.k * g.c * 9];
        let mut db = vec![0.0; g.k];
        let mut dz = vec![0.0; plane];
        for (s, x) in inputs.rows().into_iter().enumerate() {
            let x = x.as_slice().expect("row-major inputs");
            let dp = d_pooled.row(s);
            for o in 0..g.k {
                let zo = &pre[(s * g.k + o) * plane..(s * g.k + o + 1) * plane];
                dz.iter_mut().for_each(|v| *v = 0.0);
                for py in 0..g.ph {
                    for px in 0..g.pw {
                        let gp = 0.25 * dp[(o * g.ph + py) * g.pw + px];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (2 * py + dy) * g.ow + 2 * px + dx;
                                if zo[idx] > 0.0 {
                                    dz[idx] = gp;
                                }
                            }
                        }
                    }
                }
                db[o] += dz.iter().sum::<f64>();
                for c in 0..g.c {
                    let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0;
                            for y in 0..g.oh {
                                let src = &xc[(y + ky) * g.w + kx..(y + ky) * g.w + kx + g.ow];
                                let d = &dz[y * g.ow..(y + 1) * g.ow];
                                acc += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dw[((o * g.c + c) * 3 + ky) * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
        (dw, db)
    }

    /// Argmax of the logits, lowest class index on ties.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<u32>> {
        let logits = self.logits(inputs)?;
        Ok(crate::probe::argmax_rows(&logits))
    }

    pub fn save_params(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (spec, values) in self.param_specs().iter().zip(&self.params) {
            let t = Tensor::from_f64(spec.shape.clone(), values.clone())?;
            write_tensor(dir.join(format!("{}.rdt", spec.name)), &t)?;
        }
        Ok(())
    }

    pub fn load_params(&mut self, dir: &Path) -> Result<()> {
        let specs = self.param_specs();
        for (spec, values) in specs.iter().zip(&mut self.params) {
            let path = dir.join(format!("{}.rdt", spec.name));
            let t = read_tensor(&path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Inconsistent(format!(
                    "{}: shape {:?}, model expects {:?}",
                    path.display(),
                    t.shape(),
                    spec.shape
                )));
            }
            *values = t
                .as_f64()
                .ok_or_else(|| Error::Inconsistent(format!("{}: parameters must be f64", path.display())))?
                .to_vec();
        }
        Ok(())
    }
}

/// A model truncated at one of its layers.
pub struct LayerMap<'a> {
    model: &'a Model,
    layer: String,
}

impl FeatureMap for LayerMap<'_> {
    fn input_dim(&self) -> usize {
        self.model.input.dim()
    }

    fn features(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.model.layer_output(&self.layer, inputs)
    }
}

impl Classifier for Model {
    fn input_dim(&self) -> usize {
        self.input.dim()
    }

    fn scores(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.logits(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::below;

    fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = splitmix(seed);
        Array2::from_shape_fn((n, d), |_| unit_f64(&mut rng))
    }

    fn grad_check(model: &mut Model, seed: u64) {
        let n = 5;
        let d = model.input_shape().dim();
        let x = random_inputs(n, d, seed);
        let mut rng = splitmix(seed ^ 0xabc);
        let y: Vec<u32> = (0..n).map(|_| below(&mut rng, model.num_classes() as u64) as u32).collect();
        let (_, grads) = model.loss_and_grads(x.view(), &y).unwrap();
        let h = 1e-4;
        for p in 0..grads.len() {
            let len = grads[p].len();
            for _ in 0..20 {
                let i = below(&mut rng, len as u64) as usize;
                let orig = model.params[p][i];
                model.params[p][i] = orig + h;
                let (lp, _) = model.loss_and_grads(x.view(), &y).unwrap();
                model.params[p][i] = orig - h;
                let (lm, _) = model.loss_and_grads(x.view(), &y).unwrap();
                model.params[p][i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads[p][i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel <= 1e-4, "param {p}[{i}]: analytic {analytic}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv2_gradients_match_finite_differences() {
        let shape = InputShape { channels: 2, height: 7, width: 6 };
        let mut model = Model::init(ModelKind::Conv2, shape, 3, 4, 11).unwrap();
        grad_check(&mut model, 1);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let shape = InputShape { channels: 1, height: 4, width: 5 };
        let mut model = Model::init(ModelKind::Mlp, shape, 6, 3, 12).unwrap();
        grad_check(&mut model, 2);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let shape = InputShape { channels: 1, height: 12, width: 12 };
        let a = Model::init(ModelKind::Conv2, shape, 8, 10, 5).unwrap();
        let b = Model::init(ModelKind::Conv2, shape, 8, 10, 5).unwrap();
        let c = Model::init(ModelKind::Conv2, shape, 8, 10, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (spec, values) in a.param_specs().iter().zip(a.params()) {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            assert!(values.iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(a.param_specs()[2].shape, vec![10, 8 * 5 * 5]);
    }

    #[test]
    fn layer_shapes() {
        let shape = InputShape { channels: 1, height: 12, width: 12 };
        let m = Model::init(ModelKind::Conv2, shape, 8, 10, 1).unwrap();
        let x = random_inputs(3, 144, 9);
        assert_eq!(m.layer_output("conv", x.view()).unwrap().dim(), (3, 200));
        assert_eq!(m.layer_output("fc", x.view()).unwrap().dim(), (3, 10));
        assert!(matches!(m.layer_output("hidden", x.view()), Err(Error::LayerNotFound { .. })));
        assert!(m.logits(random_inputs(2, 10, 1).view()).is_err());
    }

    #[test]
    fn params_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let shape = InputShape { channels: 1, height: 5, width: 5 };
        let m = Model::init(ModelKind::Mlp, shape, 4, 3, 2).unwrap();
        m.save_params(dir.path()).unwrap();
        let mut back = Model::zeros(ModelKind::Mlp, shape, 4, 3).unwrap();
        back.load_params(dir.path()).unwrap();
        assert_eq!(back, m);
    }
}
