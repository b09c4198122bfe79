//! CSV export and PPM (P6) rendering of similarity diagrams, fragmentation
//! tables and plane label maps.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cka::SimilarityDiagram;
use crate::drs::{FragmentationScore, LabelGrid};
use crate::error::{Error, Result};
use crate::rng::splitmix;
use crate::trainer::EpochGrid;

/// Five colour anchors, linearly interpolated in RGB.
pub const RAMP: [(f64, [u8; 3]); 5] = [
    (0.00, [13, 8, 135]),
    (0.25, [126, 3, 168]),
    (0.50, [204, 71, 120]),
    (0.75, [248, 149, 64]),
    (1.00, [240, 249, 33]),
];

pub const PALETTE_SIZE: usize = 64;

/// Maps `value` linearly from `[lo, hi]` onto the ramp, clamping outside.
pub fn colormap(value: f64, lo: f64, hi: f64) -> [u8; 3] {
    let x = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
    let seg = RAMP.windows(2).find(|w| x <= w[1].0).unwrap_or(&RAMP[3..5]);
    let (x0, c0) = seg[0];
    let (x1, c1) = seg[1];
    let t = (x - x0) / (x1 - x0);
    let mut rgb = [0u8; 3];
    for k in 0..3 {
        rgb[k] = (c0[k] as f64 + t * (c1[k] as f64 - c0[k] as f64)).round() as u8;
    }
    rgb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AxisMode {
    #[default]
    GridIndex,
    LogEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub epoch: u32,
    pub color: [u8; 3],
}

impl Annotation {
    pub const GRAY: [u8; 3] = [128, 128, 128];
    pub const CYAN: [u8; 3] = [0, 255, 255];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub value_range: (f64, f64),
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub axis_mode: AxisMode,
    /// Pixel size of one matrix cell (grid-index mode).
    #[serde(default = "default_cell")]
    pub cell_px: usize,
    /// Image side length in log-epoch mode; defaults to `cells · cell_px`.
    #[serde(default)]
    pub width_px: Option<usize>,
}

fn default_cell() -> usize {
    4
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            value_range: (0.0, 1.0),
            annotations: Vec::new(),
            axis_mode: AxisMode::GridIndex,
            cell_px: default_cell(),
            width_px: None,
        }
    }
}

/// First grid epoch at or after `epoch`: where a transition detected between
/// checkpoints is marked.
pub fn snap_to_grid(grid: &EpochGrid, epoch: u32) -> Option<u32> {
    grid.epochs().iter().copied().find(|&t| t >= epoch)
}

/// Horizontal pixel position of each epoch, `∝ log10(t + 1)`, with the last
/// epoch at `width_px − 1`.
pub fn log_epoch_layout(epochs: &[u32], width_px: usize) -> Vec<f64> {
    let Some(&last) = epochs.last() else {
        return Vec::new();
    };
    let top = ((last as f64) + 1.0).log10();
    let span = width_px.saturating_sub(1) as f64;
    epochs
        .iter()
        .map(|&t| if top > 0.0 { span * ((t as f64) + 1.0).log10() / top } else { 0.0 })
        .collect()
}

/// First pixel of every cell along one axis.
fn cell_starts(epochs: &[u32], spec: &RenderSpec) -> (Vec<usize>, usize) {
    match spec.axis_mode {
        AxisMode::GridIndex => {
            let starts = (0..epochs.len()).map(|k| k * spec.cell_px).collect();
            (starts, epochs.len() * spec.cell_px)
        }
        AxisMode::LogEpoch => {
            let total = spec.width_px.unwrap_or(epochs.len() * spec.cell_px).max(1);
            let starts = log_epoch_layout(epochs, total)
                .into_iter()
                .map(|p| (p.floor() as usize).min(total - 1))
                .collect();
            (starts, total)
        }
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                let at = (y * self.width + x) * 3;
                self.pixels[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }

    fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Heatmap as PPM bytes. Row 0 of the matrix is drawn at the bottom, column
/// 0 at the left; annotation lines cross the centre of their epoch's cells.
pub fn heatmap_ppm(d: &SimilarityDiagram, spec: &RenderSpec) -> Result<Vec<u8>> {
    let (lo, hi) = spec.value_range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("value range ({lo}, {hi}) is empty")));
    }
    if spec.cell_px == 0 {
        return Err(Error::InvalidArgument("cell size must be at least 1 px".into()));
    }
    let rows = d.row_grid.epochs();
    let cols = d.col_grid.epochs();
    for a in &spec.annotations {
        if !d.row_grid.contains(a.epoch) && !d.col_grid.contains(a.epoch) {
            return Err(Error::InvalidArgument(format!(
                "annotation epoch {} is not on the diagram's epoch grid",
                a.epoch
            )));
        }
    }
    let (xs, width) = cell_starts(cols, spec);
    let (ys_up, height) = cell_starts(rows, spec);
    let mut canvas = Canvas::new(width, height);
    let span = |starts: &[usize], k: usize, total: usize| {
        let end = starts.get(k + 1).copied().unwrap_or(total);
        (starts[k], end.max(starts[k] + 1))
    };
    for i in 0..rows.len() {
        let (y0_up, y1_up) = span(&ys_up, i, height);
        // flip: epoch axes increase upwards
        let (y0, y1) = (height - y1_up.min(height), height - y0_up);
        for j in 0..cols.len() {
            let (x0, x1) = span(&xs, j, width);
            canvas.fill(x0, y0, x1, y1, colormap(d.values[(i, j)], lo, hi));
        }
    }
    for a in &spec.annotations {
        if let Some(j) = d.col_grid.position(a.epoch) {
            let (x0, x1) = span(&xs, j, width);
            let x = (x0 + x1 - 1) / 2;
            canvas.fill(x, 0, x + 1, height, a.color);
        }
        if let Some(i) = d.row_grid.position(a.epoch) {
            let (y0_up, y1_up) = span(&ys_up, i, height);
            let y = height - 1 - (y0_up + y1_up - 1) / 2;
            canvas.fill(0, y, width, y + 1, a.color);
        }
    }
    Ok(canvas.to_ppm())
}

/// `<image>.axis.csv` next to a rendered image.
pub fn axis_sidecar_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".axis.csv");
    PathBuf::from(s)
}

/// Writes the heatmap and an `epoch,pixel` sidecar giving each column
/// epoch's first pixel.
pub fn render_heatmap(d: &SimilarityDiagram, spec: &RenderSpec, path: &Path) -> Result<()> {
    let bytes = heatmap_ppm(d, spec)?;
    write_bytes(path, &bytes)?;
    let (xs, _) = cell_starts(d.col_grid.epochs(), spec);
    let mut axis = String::from("epoch,pixel\n");
    for (t, x) in d.col_grid.epochs().iter().zip(xs) {
        axis.push_str(&format!("{t},{x}\n"));
    }
    write_bytes(&axis_sidecar_path(path), axis.as_bytes())
}

/// 64 distinct colours drawn from a SplitMix64 stream.
pub fn palette(seed: u64) -> Vec<[u8; 3]> {
    use rand::RngCore;
    let mut rng = splitmix(seed);
    let mut colors: Vec<[u8; 3]> = Vec::with_capacity(PALETTE_SIZE);
    while colors.len() < PALETTE_SIZE {
        let x = rng.next_u64().to_le_bytes();
        let c = [x[0], x[1], x[2]];
        if !colors.contains(&c) {
            colors.push(c);
        }
    }
    colors
}

/// Label map as PPM bytes: `u` runs left to right, `v` bottom to top. Legend
/// rows underneath show one block per class present, in class order.
pub fn plane_ppm(grid: &LabelGrid, palette_seed: u64, cell_px: usize) -> Result<Vec<u8>> {
    if cell_px == 0 {
        return Err(Error::InvalidArgument("cell size must be at least 1 px".into()));
    }
    if let Some(&bad) = grid.labels().iter().find(|&&l| l as usize >= PALETTE_SIZE) {
        return Err(Error::InvalidArgument(format!(
            "class {bad} exceeds the {PALETTE_SIZE}-colour palette"
        )));
    }
    let colors = palette(palette_seed);
    let (rows, cols) = grid.shape();
    let mut present: Vec<u32> = grid.labels().to_vec();
    present.sort_unstable();
    present.dedup();
    let legend_rows = present.len().div_ceil(rows);
    let width = rows * cell_px;
    let plot_height = cols * cell_px;
    let mut canvas = Canvas::new(width, plot_height + legend_rows * cell_px);
    for i in 0..rows {
        for j in 0..cols {
            let x = i * cell_px;
            let y = (cols - 1 - j) * cell_px;
            canvas.fill(x, y, x + cell_px, y + cell_px, colors[grid.get(i, j) as usize]);
        }
    }
    for (k, &class) in present.iter().enumerate() {
        let x = (k % rows) * cell_px;
        let y = plot_height + (k / rows) * cell_px;
        canvas.fill(x, y, x + cell_px, y + cell_px, colors[class as usize]);
    }
    Ok(canvas.to_ppm())
}

pub fn render_plane(grid: &LabelGrid, palette_seed: u64, cell_px: usize, path: &Path) -> Result<()> {
    write_bytes(path, &plane_ppm(grid, palette_seed, cell_px)?)
}

/// First row holds the column epochs, first column the row epochs, cells are
/// printed with 6 decimals.
pub fn diagram_csv(d: &SimilarityDiagram) -> String {
    let mut out = String::from("epoch");
    for t in d.col_grid.epochs() {
        out.push_str(&format!(",{t}"));
    }
    out.push('\n');
    for (i, t) in d.row_grid.epochs().iter().enumerate() {
        out.push_str(&t.to_string());
        for j in 0..d.col_grid.len() {
            out.push_str(&format!(",{:.6}", d.values[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_diagram_csv(d: &SimilarityDiagram, path: &Path) -> Result<()> {
    write_bytes(path, diagram_csv(d).as_bytes())
}

/// `<metric>_<layer>.csv`
pub fn diagram_file_name(d: &SimilarityDiagram) -> String {
    format!("{}_{}.csv", d.metric.name(), d.layer_name)
}

/// A diagram read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagramTable {
    pub row_epochs: Vec<u32>,
    pub col_epochs: Vec<u32>,
    pub values: Array2<f64>,
}

pub fn read_diagram_csv(path: &Path) -> Result<DiagramTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let col_epochs: Vec<u32> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().parse().map_err(|_| err(1, format!("bad epoch `{s}`"))))
        .collect::<Result<_>>()?;
    let mut row_epochs = Vec::new();
    let mut flat = Vec::new();
    for (k, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let epoch = fields.next().unwrap_or_default();
        row_epochs.push(epoch.trim().parse().map_err(|_| err(k + 2, format!("bad epoch `{epoch}`")))?);
        let vals: Vec<f64> = fields
            .map(|s| s.trim().parse().map_err(|_| err(k + 2, format!("bad value `{s}`"))))
            .collect::<Result<_>>()?;
        if vals.len() != col_epochs.len() {
            return Err(err(k + 2, format!("{} values for {} columns", vals.len(), col_epochs.len())));
        }
        flat.extend(vals);
    }
    if row_epochs.is_empty() || col_epochs.is_empty() {
        return Err(err(1, "diagram has no cells".into()));
    }
    let values = Array2::from_shape_vec((row_epochs.len(), col_epochs.len()), flat).expect("sizes checked");
    Ok(DiagramTable {
        row_epochs,
        col_epochs,
        values,
    })
}

/// Columns `epoch, mean_fragments, plane_0, plane_1, ...`.
pub fn write_fragmentation_csv(rows: &[(u32, FragmentationScore)], path: &Path) -> Result<()> {
    let Some((_, first)) = rows.first() else {
        return Err(Error::InvalidArgument("no fragmentation rows to write".into()));
    };
    let planes = first.per_plane_counts.len();
    let mut out = String::from("epoch,mean_fragments");
    for p in 0..planes {
        out.push_str(&format!(",plane_{p}"));
    }
    out.push('\n');
    for (epoch, score) in rows {
        if score.per_plane_counts.len() != planes {
            return Err(Error::Shape("fragmentation rows cover different plane counts".into()));
        }
        out.push_str(&format!("{epoch},{:.6}", score.mean));
        for c in &score.per_plane_counts {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_fragmentation_csv(path: &Path) -> Result<Vec<(u32, FragmentationScore)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: malformed fragmentation row"),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(k, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(err(k + 1));
            }
            let epoch = fields[0].parse().map_err(|_| err(k + 1))?;
            let mean = fields[1].parse().map_err(|_| err(k + 1))?;
            let per_plane_counts = fields[2..]
                .iter()
                .map(|s| s.parse().map_err(|_| err(k + 1)))
                .collect::<Result<_>>()?;
            Ok((epoch, FragmentationScore { per_plane_counts, mean }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cka::Metric;

    fn diagram(values: Vec<f64>, epochs: Vec<u32>) -> SimilarityDiagram {
        let n = epochs.len();
        let grid = EpochGrid::new(epochs).unwrap();
        SimilarityDiagram {
            row_grid: grid.clone(),
            col_grid: grid,
            values: Array2::from_shape_vec((n, n), values).unwrap(),
            metric: Metric::Cka,
            layer_name: "fc".into(),
            run_id_row: "a".into(),
            run_id_col: "a".into(),
        }
    }

    fn pixel(ppm: &[u8], width: usize, x: usize, y: usize) -> [u8; 3] {
        let start = ppm.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
        let at = start + (y * width + x) * 3;
        [ppm[at], ppm[at + 1], ppm[at + 2]]
    }

    #[test]
    fn ramp_endpoints_and_monotone_position() {
        assert_eq!(colormap(0.0, 0.0, 1.0), [13, 8, 135]);
        assert_eq!(colormap(1.0, 0.0, 1.0), [240, 249, 33]);
        assert_eq!(colormap(0.5, 0.0, 1.0), [204, 71, 120]);
        assert_eq!(colormap(2.0, 0.0, 1.0), [240, 249, 33]);
        assert_eq!(colormap(-1.0, 0.0, 1.0), [13, 8, 135]);
    }

    #[test]
    fn single_cell_is_top_colour() {
        let d = diagram(vec![1.0], vec![0]);
        let spec = RenderSpec { cell_px: 3, ..Default::default() };
        let ppm = heatmap_ppm(&d, &spec).unwrap();
        assert!(ppm.starts_with(b"P6\n3 3\n255\n"));
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(pixel(&ppm, 3, x, y), [240, 249, 33]);
            }
        }
    }

    #[test]
    fn identity_draws_anti_diagonal() {
        let d = diagram(vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]);
        let spec = RenderSpec { cell_px: 1, ..Default::default() };
        let ppm = heatmap_ppm(&d, &spec).unwrap();
        let top = [240, 249, 33];
        let bottom = [13, 8, 135];
        // row 0 sits at the bottom of the image
        assert_eq!(pixel(&ppm, 2, 0, 1), top);
        assert_eq!(pixel(&ppm, 2, 1, 0), top);
        assert_eq!(pixel(&ppm, 2, 0, 0), bottom);
        assert_eq!(pixel(&ppm, 2, 1, 1), bottom);
        assert_eq!(ppm, heatmap_ppm(&d, &spec).unwrap());
    }

    #[test]
    fn annotations_must_be_on_grid() {
        let d = diagram(vec![1.0; 4], vec![0, 5]);
        let mut spec = RenderSpec { cell_px: 4, ..Default::default() };
        spec.annotations.push(Annotation { epoch: 3, color: Annotation::CYAN });
        assert!(heatmap_ppm(&d, &spec).is_err());
        spec.annotations[0].epoch = 5;
        let ppm = heatmap_ppm(&d, &spec).unwrap();
        // vertical line through the centre of column 1
        assert_eq!(pixel(&ppm, 8, 5, 7), Annotation::CYAN);
        assert_eq!(pixel(&ppm, 8, 1, 7), [240, 249, 33]);
    }

    #[test]
    fn snapping() {
        let g = EpochGrid::every(5, 200).unwrap();
        assert_eq!(snap_to_grid(&g, 143), Some(145));
        assert_eq!(snap_to_grid(&g, 145), Some(145));
        assert_eq!(snap_to_grid(&g, 201), None);
    }

    #[test]
    fn log_layout() {
        assert_eq!(log_epoch_layout(&[0], 100), vec![0.0]);
        let p = log_epoch_layout(&[0, 9, 99], 201);
        assert!((p[0] - 0.0).abs() < 1e-12);
        assert!((p[1] - 100.0).abs() < 1e-9);
        assert!((p[2] - 200.0).abs() < 1e-9);
        let grid: Vec<u32> = (0..300).collect();
        let q = log_epoch_layout(&grid, 1000);
        assert!(q.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plane_images() {
        let constant = LabelGrid::new(0, 4, 4, vec![3; 16]).unwrap();
        let ppm = plane_ppm(&constant, 1, 2).unwrap();
        assert!(ppm.starts_with(b"P6\n8 10\n255\n"));
        let c = palette(1)[3];
        for y in 0..10 {
            assert_eq!(pixel(&ppm, 8, 0, y), c);
        }
        let half = LabelGrid::new(0, 4, 4, (0..16).map(|k| u32::from(k / 4 >= 2)).collect()).unwrap();
        let ppm = plane_ppm(&half, 1, 1).unwrap();
        assert_eq!(pixel(&ppm, 4, 0, 0), palette(1)[0]);
        assert_eq!(pixel(&ppm, 4, 3, 0), palette(1)[1]);
        assert_eq!(ppm, plane_ppm(&half, 1, 1).unwrap());
        let too_many = LabelGrid::new(0, 1, 1, vec![64]).unwrap();
        assert!(plane_ppm(&too_many, 1, 1).is_err());
    }

    #[test]
    fn diagram_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cka_fc.csv");
        let d = diagram(vec![1.0, 0.123456789, 0.123456789, 1.0], vec![0, 10]);
        write_diagram_csv(&d, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,0,10\n0,1.000000,0.123457\n10,0.123457,1.000000\n");
        assert_eq!(text.lines().count(), 3);
        let back = read_diagram_csv(&path).unwrap();
        assert_eq!(back.row_epochs, vec![0, 10]);
        assert!((&back.values - &d.values).iter().all(|v| v.abs() <= 5e-7));
        assert_eq!(diagram_file_name(&d), "cka_fc.csv");
    }

    #[test]
    fn fragmentation_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frag.csv");
        assert!(write_fragmentation_csv(&[], &path).is_err());
        let rows = vec![(0, FragmentationScore { per_plane_counts: vec![1, 3], mean: 2.0 })];
        write_fragmentation_csv(&rows, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "epoch,mean_fragments,plane_0,plane_1\n0,2.000000,1,3\n");
        assert_eq!(read_fragmentation_csv(&path).unwrap(), rows);
    }
}
