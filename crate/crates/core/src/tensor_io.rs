//! Dense tensors, the REPDYN01 file format and the checkpoint directory layout.
//!
//! REPDYN01 layout (all integers little-endian):
//!
//! | bytes              | content                                   |
//! |--------------------|-------------------------------------------|
//! | 0..8               | ASCII magic `REPDYN01`                    |
//! | 8                  | dtype code: 0 = f32, 1 = f64, 2 = u32     |
//! | 9                  | ndim, 1..=4                               |
//! | 10..10 + 8·ndim    | dimension sizes as u64                    |
//! | remainder          | row-major element data                    |

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{EpochGrid, TrainRunConfig};

pub const MAGIC: &[u8; 8] = b"REPDYN01";
const HEADER_FIXED: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U32 = 2,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }
}

/// A row-major dense array with 1 to 4 dimensions, none of them zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::InvalidTensor(format!(
                "ndim must be 1..=4, got {}",
                shape.len()
            )));
        }
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "dimension {pos} has size 0 (shape {shape:?})"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} implies {count} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_u32(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        Self::new(shape, TensorData::U32(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            _ => None,
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::U32(_) => None,
        }
    }

    /// Serializes to the REPDYN01 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.first_non_finite() {
            return Err(Error::NonFinite(i));
        }
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len() + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (dtype, shape, offset) = parse_header(bytes, path)?;
        let count: usize = shape.iter().product();
        let expected = (count * dtype.size()) as u64;
        let found = (bytes.len() - offset) as u64;
        if expected != found {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        let payload = &bytes[offset..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let short = |needed: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: needed as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < HEADER_FIXED {
        return Err(short(HEADER_FIXED));
    }
    let dtype = DType::from_code(bytes[8]).ok_or(Error::UnknownDType {
        path: path.to_path_buf(),
        code: bytes[8],
    })?;
    let ndim = bytes[9] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::InvalidTensor(format!(
            "{}: ndim {ndim} outside 1..=4",
            path.display()
        )));
    }
    let offset = HEADER_FIXED + 8 * ndim;
    if bytes.len() < offset {
        return Err(short(offset));
    }
    let shape = bytes[HEADER_FIXED..offset]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((dtype, shape, offset))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

/// Reads only dtype and shape, without loading the payload.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<(DType, Vec<usize>)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_FIXED + 32);
    file.by_ref()
        .take((HEADER_FIXED + 32) as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let (dtype, shape, _) = parse_header(&head, path)?;
    Ok((dtype, shape))
}

/// Activations of one layer at one epoch: `m` probe examples by `p` neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub epoch: u32,
    pub layer_name: String,
    matrix: Tensor,
}

impl RepresentationMatrix {
    pub fn new(epoch: u32, layer_name: impl Into<String>, matrix: Tensor) -> Result<Self> {
        if matrix.dtype() != DType::F32 || matrix.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "representation must be a 2-D f32 tensor, got {:?} {:?}",
                matrix.dtype(),
                matrix.shape()
            )));
        }
        if matrix.shape()[0] < 2 {
            return Err(Error::Shape("representation needs at least 2 examples".into()));
        }
        if let Some(i) = matrix.first_non_finite() {
            return Err(Error::NonFinite(i));
        }
        Ok(RepresentationMatrix {
            epoch,
            layer_name: layer_name.into(),
            matrix,
        })
    }

    pub fn from_rows(
        epoch: u32,
        layer_name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::new(epoch, layer_name, Tensor::from_f32(vec![rows, cols], data)?)
    }

    /// Downcasts an f64 activation matrix to the stored f32 form.
    pub fn from_array(epoch: u32, layer_name: impl Into<String>, a: &Array2<f64>) -> Result<Self> {
        let (rows, cols) = a.dim();
        let data = a.iter().map(|&x| x as f32).collect();
        Self::from_rows(epoch, layer_name, rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn values(&self) -> &[f32] {
        self.matrix.as_f32().expect("validated as f32")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows(), self.cols()), |(i, j)| {
            self.values()[i * self.cols() + j] as f64
        })
    }

    /// Selected rows, upcast to f64.
    pub fn select_rows_f64(&self, rows: &[usize]) -> Array2<f64> {
        let p = self.cols();
        let v = self.values();
        Array2::from_shape_fn((rows.len(), p), |(i, j)| v[rows[i] * p + j] as f64)
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub layers: Vec<String>,
    pub config: TrainRunConfig,
}

/// Path conventions under a run root.
#[derive(Debug, Clone)]
pub struct StoreLayout {
    root: PathBuf,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.rdt")
    }

    pub fn errors(&self) -> PathBuf {
        self.root.join("errors.csv")
    }

    pub fn epochs_dir(&self) -> PathBuf {
        self.root.join("epochs")
    }

    pub fn epoch_dir(&self, epoch: u32) -> PathBuf {
        self.epochs_dir().join(epoch.to_string())
    }

    pub fn activation(&self, epoch: u32, layer: &str) -> PathBuf {
        self.epoch_dir(epoch).join(format!("{layer}.rdt"))
    }

    /// Model parameters at a grid epoch, kept outside `epochs/` so that
    /// directory holds activations only.
    pub fn params_dir(&self, epoch: u32) -> PathBuf {
        self.root.join("params").join(epoch.to_string())
    }

    pub fn probe(&self, layer: &str, epoch: u32) -> PathBuf {
        self.root.join("probes").join(layer).join(format!("{epoch}.rdt"))
    }

    pub fn probe_sidecar(&self, layer: &str, epoch: u32) -> PathBuf {
        self.root.join("probes").join(layer).join(format!("{epoch}.json"))
    }

    pub fn label_maps(&self, layer: &str, epoch: u32) -> PathBuf {
        self.root.join("labelmaps").join(layer).join(format!("{epoch}.rdt"))
    }
}

/// A validated, read-only view of a run directory.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    layout: StoreLayout,
    manifest: RunManifest,
    labels: Vec<u32>,
}

impl CheckpointStore {
    pub fn root(&self) -> &Path {
        self.layout.root()
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn run_config(&self) -> &TrainRunConfig {
        &self.manifest.config
    }

    pub fn epoch_grid(&self) -> &EpochGrid {
        &self.manifest.config.epoch_grid
    }

    pub fn layer_names(&self) -> &[String] {
        &self.manifest.layers
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Number of probe examples (rows of every representation).
    pub fn probe_count(&self) -> usize {
        self.labels.len()
    }

    pub fn check_layer(&self, layer: &str) -> Result<()> {
        if self.manifest.layers.iter().any(|l| l == layer) {
            Ok(())
        } else {
            Err(Error::LayerNotFound {
                layer: layer.to_string(),
                available: self.manifest.layers.clone(),
            })
        }
    }

    pub fn load_representation(&self, epoch: u32, layer: &str) -> Result<RepresentationMatrix> {
        self.check_layer(layer)?;
        if !self.epoch_grid().contains(epoch) {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} is not on the store's grid"
            )));
        }
        let t = read_tensor(self.layout.activation(epoch, layer))?;
        RepresentationMatrix::new(epoch, layer, t)
    }
}

pub fn write_manifest(layout: &StoreLayout, manifest: &RunManifest) -> Result<()> {
    let path = layout.manifest();
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("serializing run.json: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Opens a run directory and checks that every grid epoch has every layer's
/// activation file, all with the same row count as `labels.rdt`.
pub fn open_checkpoint_store(root: impl AsRef<Path>) -> Result<CheckpointStore> {
    let layout = StoreLayout::new(root.as_ref());
    let manifest_path = layout.manifest();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    manifest.config.epoch_grid.validate()?;
    if manifest.layers.is_empty() {
        return Err(Error::Inconsistent("run.json lists no layers".into()));
    }

    if !layout.epochs_dir().is_dir() {
        return Err(Error::Inconsistent(format!(
            "missing epochs directory {}",
            layout.epochs_dir().display()
        )));
    }

    let labels_tensor = read_tensor(layout.labels())?;
    let labels = match (labels_tensor.dtype(), labels_tensor.shape()) {
        (DType::U32, [_]) => labels_tensor.as_u32().unwrap().to_vec(),
        (dtype, shape) => {
            return Err(Error::Inconsistent(format!(
                "labels.rdt must be a u32 vector, found {dtype:?} {shape:?}"
            )))
        }
    };
    let m = labels.len();

    for &epoch in manifest.config.epoch_grid.epochs() {
        for layer in &manifest.layers {
            let path = layout.activation(epoch, layer);
            if !path.is_file() {
                return Err(Error::MissingCheckpoint {
                    epoch,
                    layer: layer.clone(),
                    path,
                });
            }
            let (dtype, shape) = read_tensor_header(&path)?;
            if dtype != DType::F32 || shape.len() != 2 {
                return Err(Error::Inconsistent(format!(
                    "{}: expected 2-D f32 activations, found {dtype:?} {shape:?}",
                    path.display()
                )));
            }
            if shape[0] != m {
                return Err(Error::Inconsistent(format!(
                    "{}: {} rows but labels.rdt has {m}",
                    path.display(),
                    shape[0]
                )));
            }
        }
    }

    Ok(CheckpointStore {
        layout,
        manifest,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn f32_2x2_layout() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"REPDYN01");
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 26 + 16);
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[38..42], &4.0f32.to_le_bytes());
    }

    #[test]
    fn u32_vector_file_size() {
        // magic 8 + dtype 1 + ndim 1 + one u64 dim 8 + 3·4 payload
        let dir = tmp();
        let path = dir.path().join("l.rdt");
        write_tensor(&path, &Tensor::from_u32(vec![3], vec![0, 1, 2]).unwrap()).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 30);
        assert_eq!(read_tensor(&path).unwrap().as_u32().unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor::from_f32(vec![0, 3], vec![]),
            Err(Error::InvalidTensor(_))
        ));
        assert!(Tensor::from_f32(vec![2, 2, 2, 2, 2], vec![0.0; 32]).is_err());
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let t = Tensor::from_f64(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.to_bytes(), Err(Error::NonFinite(1))));
    }

    #[test]
    fn bad_magic() {
        let dir = tmp();
        let path = dir.path().join("x.rdt");
        fs::write(&path, b"XXXXXXXX\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = Tensor::from_u32(vec![1], vec![5]).unwrap().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bytes, Path::new("mem")),
            Err(Error::UnknownDType { code: 9, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        // header says 4x4 f32 = 64 bytes, payload carries 60
        let mut bytes = Tensor::from_f32(vec![4, 4], vec![0.5; 16]).unwrap().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        match Tensor::from_bytes(&bytes, Path::new("mem")) {
            Err(Error::Truncated {
                expected, found, ..
            }) => assert_eq!((expected, found), (64, 60)),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn representation_needs_two_rows() {
        assert!(RepresentationMatrix::from_rows(0, "fc", 1, 3, vec![0.0; 3]).is_err());
        assert!(RepresentationMatrix::from_rows(0, "fc", 2, 1, vec![0.0, f32::INFINITY]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_identity(
            shape in proptest::collection::vec(1usize..5, 1..=4),
            seed in proptest::prelude::any::<u64>(),
            kind in 0u8..3,
        ) {
            let n: usize = shape.iter().product();
            let mut rng = crate::rng::splitmix(seed);
            let data = match kind {
                0 => TensorData::F32((0..n).map(|_| crate::rng::unit_f64(&mut rng) as f32 - 0.5).collect()),
                1 => TensorData::F64((0..n).map(|_| crate::rng::unit_f64(&mut rng) * 1e6 - 3.0).collect()),
                _ => TensorData::U32((0..n).map(|_| rand::RngCore::next_u32(&mut rng)).collect()),
            };
            let t = Tensor::new(shape, data).unwrap();
            let bytes = t.to_bytes().unwrap();
            let back = Tensor::from_bytes(&bytes, Path::new("mem")).unwrap();
            proptest::prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            proptest::prop_assert_eq!(back, t);
        }
    }
}
