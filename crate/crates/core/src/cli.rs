//! Command-line front end. `main.rs` only parses arguments and maps errors to
//! exit codes; everything else lives here so it can be tested in-process.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cka::{cka_diagram, CkaBatchPlan, Metric, SimilarityDiagram};
use crate::diagram::{self, Annotation, AxisMode, RenderSpec};
use crate::drs::{drs_diagram, fragmentation_score, load_label_maps, save_label_maps};
use crate::error::{Error, Result};
use crate::plane::{sample_triplets, TripletSet, DEFAULT_MARGIN};
use crate::probe::{load_store_probes, save_probe, train_store_probes, ProbeTrainConfig};
use crate::tensor_io::{open_checkpoint_store, CheckpointStore, StoreLayout};
use crate::trainer::{
    detect_phase3, inject_label_noise, paper_epoch_grid, read_errors_csv, train_run, EpochGrid, OptimizerKind,
    TrainRunConfig,
};

#[derive(Debug, Parser)]
#[command(name = "repdyn", version, about = "Representation dynamics: CKA and DRS diagrams over training epochs")]
pub struct Cli {
    /// Worker threads for epoch-pair and plane evaluation (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a reference network and write a checkpoint store.
    Train(TrainArgs),
    /// CKA diagram of one layer, within a store or across two stores.
    Cka(CkaArgs),
    /// Train one linear probe per grid epoch on a stored layer.
    Probes(ProbesArgs),
    /// DRS diagram of a layer's probes over sampled input planes.
    Drs(DrsArgs),
    /// Fragmentation scores from stored label maps.
    Frag(FragArgs),
    /// Render a diagram CSV or a stored label map as a PPM image.
    Render(RenderArgs),
    /// Print an epoch grid, one epoch per line.
    Grid(GridArgs),
    /// Apply label noise to a config's training labels and check the bookkeeping.
    NoiseCheck(NoiseCheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the checkpoint store.
    #[arg(long)]
    pub out: PathBuf,
    /// Run id recorded in run.json (default: output directory name).
    #[arg(long)]
    pub run_id: Option<String>,
    /// Override total_epochs.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Override the epoch grid with every N-th epoch up to total_epochs.
    #[arg(long)]
    pub grid_step: Option<u32>,
    /// Override the optimizer kind (sgd or adam).
    #[arg(long, value_parser = parse_optimizer)]
    #[serde(serialize_with = "ser_kind")]
    pub optimizer: Option<OptimizerKind>,
    /// Override the learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override SGD momentum.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Override Adam epsilon.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Override weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Override the label-noise fraction.
    #[arg(long)]
    pub label_noise: Option<f64>,
    /// Override the width parameter k.
    #[arg(long)]
    pub width: Option<usize>,
    /// Override the minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the initialization seed.
    #[arg(long)]
    pub seed_init: Option<u64>,
    /// Override the shuffle seed.
    #[arg(long)]
    pub seed_shuffle: Option<u64>,
    /// Override the label-noise seed.
    #[arg(long)]
    pub seed_noise: Option<u64>,
    /// Freeze a layer (repeatable).
    #[arg(long = "freeze")]
    pub freeze: Vec<String>,
    /// Train-error threshold for Phase-III detection.
    #[arg(long, default_value_t = 1e-3)]
    pub phase3_threshold: f64,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
    }
}

fn ser_kind<S: serde::Serializer>(k: &Option<OptimizerKind>, s: S) -> std::result::Result<S::Ok, S::Error> {
    k.serialize(s)
}

#[derive(Debug, Args, Serialize)]
pub struct CkaArgs {
    /// Checkpoint store (rows of the diagram).
    #[arg(long)]
    pub store: PathBuf,
    /// Second store for a cross-run diagram (columns).
    #[arg(long)]
    pub store_col: Option<PathBuf>,
    /// Layer name.
    #[arg(long)]
    pub layer: String,
    /// Number of class-stratified batches; 0 uses the whole probe set as one batch.
    #[arg(long, default_value_t = 0)]
    pub batches: usize,
    /// Examples per batch.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also render the diagram to this PPM file.
    #[arg(long)]
    pub ppm: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbesArgs {
    /// Checkpoint store.
    #[arg(long)]
    pub store: PathBuf,
    /// Layer name.
    #[arg(long)]
    pub layer: String,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Passes over the probe set.
    #[arg(long, default_value_t = 10)]
    pub epochs: u32,
    /// Minibatch size.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct DrsArgs {
    /// Checkpoint store with trained probes.
    #[arg(long)]
    pub store: PathBuf,
    /// Layer name.
    #[arg(long)]
    pub layer: String,
    /// Triplet file to reuse; sampled and written next to the output when absent.
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Number of planes to sample.
    #[arg(long, default_value_t = 500)]
    pub planes: usize,
    /// Triplet sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative margin around the anchors' bounding box.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also render the diagram to this PPM file.
    #[arg(long)]
    pub ppm: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FragArgs {
    /// Checkpoint store with saved label maps.
    #[arg(long)]
    pub store: PathBuf,
    /// Layer name.
    #[arg(long)]
    pub layer: String,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["diagram", "label_maps"])))]
pub struct RenderArgs {
    /// Diagram CSV to render as a heatmap.
    #[arg(long)]
    pub diagram: Option<PathBuf>,
    /// Store whose saved label maps to render (needs --layer, --epoch, --plane).
    #[arg(long, requires_all = ["layer", "epoch"])]
    pub label_maps: Option<PathBuf>,
    /// Layer of the label map.
    #[arg(long)]
    pub layer: Option<String>,
    /// Epoch of the label map.
    #[arg(long)]
    pub epoch: Option<u32>,
    /// Plane index of the label map.
    #[arg(long, default_value_t = 0)]
    pub plane: usize,
    /// Palette seed for label maps.
    #[arg(long, default_value_t = 0)]
    pub palette_seed: u64,
    /// Render spec (JSON); flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Lower end of the value range.
    #[arg(long)]
    pub lo: Option<f64>,
    /// Upper end of the value range.
    #[arg(long)]
    pub hi: Option<f64>,
    /// Pixels per cell.
    #[arg(long)]
    pub cell: Option<usize>,
    /// Logarithmic epoch axes.
    #[arg(long)]
    pub log_axis: bool,
    /// Image width in log-axis mode.
    #[arg(long)]
    pub width: Option<usize>,
    /// Gray marker line at this epoch (Phase I to II).
    #[arg(long)]
    pub gray: Option<u32>,
    /// Cyan marker line at this epoch (Phase III).
    #[arg(long)]
    pub cyan: Option<u32>,
    /// Place the cyan line at the Phase-III epoch detected from this store's errors.csv
    /// (the first grid epoch at or after the crossing).
    #[arg(long)]
    pub phase3_from: Option<PathBuf>,
    /// Threshold used with --phase3-from.
    #[arg(long, default_value_t = 1e-3)]
    pub phase3_threshold: f64,
    /// Output PPM.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    /// Total training epochs.
    #[arg(long, default_value_t = 4000)]
    pub total: u32,
    /// Uniform grid every N epochs instead of the three-phase schedule.
    #[arg(long)]
    pub every: Option<u32>,
    /// Spacing between 300 and 900.
    #[arg(long, default_value_t = 3)]
    pub step_mid: u32,
    /// Spacing from 900 on.
    #[arg(long, default_value_t = 5)]
    pub step_late: u32,
}

#[derive(Debug, Args, Serialize)]
pub struct NoiseCheckArgs {
    /// Run config (JSON) whose training labels are used.
    #[arg(long)]
    pub config: PathBuf,
    /// Noise fraction (default: the config's).
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Noise seed (default: the config's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the flipped indices, one per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code; diagnostics go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    if jobs == Some(0) {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Cka(a) => cmd_cka(&a),
        Command::Probes(a) => cmd_probes(&a),
        Command::Drs(a) => cmd_drs(&a),
        Command::Frag(a) => cmd_frag(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Grid(a) => {
            let grid = grid_for(&a)?;
            let mut out = String::new();
            for t in grid.epochs() {
                out.push_str(&format!("{t}\n"));
            }
            print!("{out}");
            Ok(())
        }
        Command::NoiseCheck(a) => cmd_noise_check(&a),
    }
}

/// `<path>.flags.json`
pub fn echo_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".flags.json");
    PathBuf::from(s)
}

fn write_echo<T: Serialize>(path: &Path, command: &str, args: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, T> {
        command: &'a str,
        args: &'a T,
    }
    let text = serde_json::to_string_pretty(&Echo { command, args }).expect("flags serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn load_config(path: &Path) -> Result<TrainRunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// The config file with flag overrides applied.
pub fn effective_config(a: &TrainArgs) -> Result<TrainRunConfig> {
    let mut cfg = load_config(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
    }
    if let Some(step) = a.grid_step {
        cfg.epoch_grid = EpochGrid::every(step, cfg.total_epochs)?;
    } else if a.epochs.is_some() {
        let kept: Vec<u32> = cfg.epoch_grid.epochs().iter().copied().filter(|&t| t <= cfg.total_epochs).collect();
        cfg.epoch_grid = EpochGrid::new(kept)?;
    }
    if let Some(k) = a.optimizer {
        cfg.optimizer.kind = k;
    }
    let o = &mut cfg.optimizer;
    o.learning_rate = a.lr.unwrap_or(o.learning_rate);
    o.momentum = a.momentum.unwrap_or(o.momentum);
    o.epsilon = a.epsilon.unwrap_or(o.epsilon);
    o.weight_decay = a.weight_decay.unwrap_or(o.weight_decay);
    cfg.label_noise_fraction = a.label_noise.unwrap_or(cfg.label_noise_fraction);
    cfg.width_k = a.width.unwrap_or(cfg.width_k);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seeds.init = a.seed_init.unwrap_or(cfg.seeds.init);
    cfg.seeds.shuffle = a.seed_shuffle.unwrap_or(cfg.seeds.shuffle);
    cfg.seeds.noise = a.seed_noise.unwrap_or(cfg.seeds.noise);
    for l in &a.freeze {
        if !cfg.frozen_layers.contains(l) {
            cfg.frozen_layers.push(l.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and returns the Phase-III epoch, if any.
pub fn cmd_train(a: &TrainArgs) -> Result<Option<u32>> {
    let cfg = effective_config(a)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let run_id = match &a.run_id {
        Some(id) => id.clone(),
        None => a
            .out
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    };
    write_echo(&a.out.join("flags.json"), "train", a)?;
    let outcome = train_run(&cfg, &run_id, &a.out)?;
    let phase3 = detect_phase3(&outcome.curves.train, a.phase3_threshold);
    match phase3 {
        Some(t) => println!("phase3_epoch {t}"),
        None => println!("phase3_epoch none"),
    }
    Ok(phase3)
}

fn batch_plan(store: &CheckpointStore, batches: usize, batch_size: usize) -> Result<CkaBatchPlan> {
    if batches == 0 {
        CkaBatchPlan::full(store.probe_count())
    } else {
        CkaBatchPlan::stratified(store.labels(), batches, batch_size)
    }
}

fn render_default(d: &SimilarityDiagram, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    diagram::render_heatmap(d, &RenderSpec::default(), path)
}

pub fn cmd_cka(a: &CkaArgs) -> Result<()> {
    let row = open_checkpoint_store(&a.store)?;
    let col = a.store_col.as_ref().map(open_checkpoint_store).transpose()?;
    let plan = batch_plan(&row, a.batches, a.batch_size)?;
    let d = cka_diagram(&row, col.as_ref().unwrap_or(&row), &a.layer, &plan)?;
    ensure_parent(&a.out)?;
    diagram::write_diagram_csv(&d, &a.out)?;
    write_echo(&echo_path(&a.out), "cka", a)?;
    if let Some(p) = &a.ppm {
        render_default(&d, p)?;
    }
    Ok(())
}

pub fn cmd_probes(a: &ProbesArgs) -> Result<()> {
    let store = open_checkpoint_store(&a.store)?;
    let cfg = ProbeTrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        shuffle_seed: a.seed,
    };
    let probes = train_store_probes(&store, &a.layer, &cfg)?;
    for p in probes.values() {
        save_probe(store.layout(), p)?;
    }
    let dir = store.layout().root().join("probes").join(&a.layer);
    write_echo(&dir.join("flags.json"), "probes", a)
}

pub fn cmd_drs(a: &DrsArgs) -> Result<()> {
    let store = open_checkpoint_store(&a.store)?;
    let probes = load_store_probes(&store, &a.layer)?;
    ensure_parent(&a.out)?;
    let triplets = match &a.triplets {
        Some(p) => TripletSet::read_csv(p)?,
        None => {
            let (data, _) = store.run_config().training_data()?;
            let t = sample_triplets(data.train.inputs.view(), a.planes, a.seed)?;
            let mut p = a.out.as_os_str().to_owned();
            p.push(".triplets.csv");
            t.write_csv(Path::new(&p))?;
            t
        }
    };
    let (d, maps) = drs_diagram(&store, &a.layer, &probes, &triplets, a.margin)?;
    for (t, m) in store.epoch_grid().epochs().iter().zip(&maps) {
        save_label_maps(store.layout(), &a.layer, *t, m)?;
    }
    diagram::write_diagram_csv(&d, &a.out)?;
    write_echo(&echo_path(&a.out), "drs", a)?;
    if let Some(p) = &a.ppm {
        render_default(&d, p)?;
    }
    Ok(())
}

pub fn cmd_frag(a: &FragArgs) -> Result<()> {
    let store = open_checkpoint_store(&a.store)?;
    store.check_layer(&a.layer)?;
    let rows = store
        .epoch_grid()
        .epochs()
        .iter()
        .map(|&t| {
            let path = store.layout().label_maps(&a.layer, t);
            if !path.is_file() {
                return Err(Error::MissingCheckpoint {
                    epoch: t,
                    layer: a.layer.clone(),
                    path,
                });
            }
            Ok((t, fragmentation_score(&load_label_maps(store.layout(), &a.layer, t)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_parent(&a.out)?;
    diagram::write_fragmentation_csv(&rows, &a.out)?;
    write_echo(&echo_path(&a.out), "frag", a)
}

fn render_spec(a: &RenderArgs, grid: &EpochGrid) -> Result<RenderSpec> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                message: e.to_string(),
            })?
        }
        None => RenderSpec::default(),
    };
    spec.value_range.0 = a.lo.unwrap_or(spec.value_range.0);
    spec.value_range.1 = a.hi.unwrap_or(spec.value_range.1);
    spec.cell_px = a.cell.unwrap_or(spec.cell_px);
    if a.log_axis {
        spec.axis_mode = AxisMode::LogEpoch;
    }
    spec.width_px = a.width.or(spec.width_px);
    if let Some(t) = a.gray {
        spec.annotations.push(Annotation { epoch: t, color: Annotation::GRAY });
    }
    let cyan = match (&a.phase3_from, a.cyan) {
        (_, Some(t)) => Some(t),
        (Some(store), None) => {
            let curves = read_errors_csv(&StoreLayout::new(store).errors())?;
            detect_phase3(&curves.train, a.phase3_threshold).and_then(|t| diagram::snap_to_grid(grid, t))
        }
        (None, None) => None,
    };
    if let Some(t) = cyan {
        spec.annotations.push(Annotation { epoch: t, color: Annotation::CYAN });
    }
    Ok(spec)
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    ensure_parent(&a.out)?;
    if let Some(csv) = &a.diagram {
        let table = diagram::read_diagram_csv(csv)?;
        let col_grid = EpochGrid::new(table.col_epochs)?;
        let spec = render_spec(a, &col_grid)?;
        let d = SimilarityDiagram {
            row_grid: EpochGrid::new(table.row_epochs)?,
            col_grid,
            values: table.values,
            metric: Metric::Cka,
            layer_name: String::new(),
            run_id_row: String::new(),
            run_id_col: String::new(),
        };
        diagram::render_heatmap(&d, &spec, &a.out)?;
    } else if let (Some(root), Some(layer), Some(epoch)) = (&a.label_maps, &a.layer, a.epoch) {
        let maps = load_label_maps(&StoreLayout::new(root), layer, epoch)?;
        let grid = maps.get(a.plane).ok_or_else(|| {
            Error::InvalidArgument(format!("plane {} out of range, {} planes stored", a.plane, maps.len()))
        })?;
        diagram::render_plane(grid, a.palette_seed, a.cell.unwrap_or(4), &a.out)?;
    }
    write_echo(&echo_path(&a.out), "render", a)
}

pub fn grid_for(a: &GridArgs) -> Result<EpochGrid> {
    match a.every {
        Some(step) => EpochGrid::every(step, a.total),
        None => paper_epoch_grid(a.total, a.step_mid, a.step_late),
    }
}

pub fn cmd_noise_check(a: &NoiseCheckArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let data = cfg.dataset.load()?;
    let fraction = a.fraction.unwrap_or(cfg.label_noise_fraction);
    let seed = a.seed.unwrap_or(cfg.seeds.noise);
    let labels = &data.train.labels;
    let (noisy, flipped) = inject_label_noise(labels, fraction, data.num_classes, seed)?;
    let expected = (fraction * labels.len() as f64).round() as usize;
    let changed = noisy.iter().zip(labels).filter(|(a, b)| a != b).count();
    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in &flipped {
        *per_class.entry(labels[i]).or_default() += 1;
    }
    println!("examples {}", labels.len());
    println!("expected_flips {expected}");
    println!("flipped {}", flipped.len());
    println!("changed {changed}");
    for (c, n) in &per_class {
        println!("class {c} flipped {n}");
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let text: String = flipped.iter().map(|i| format!("{i}\n")).collect();
        fs::write(out, text).map_err(|e| Error::io(out, e))?;
        write_echo(&echo_path(out), "noise-check", a)?;
    }
    if flipped.len() != expected || changed != expected {
        return Err(Error::Inconsistent(format!(
            "label noise flipped {} (changed {changed}) but {expected} were expected",
            flipped.len()
        )));
    }
    Ok(())
}
