//! The `shaperank` command line.
//!
//! Every subcommand prints one summary line on success. Exit codes:
//! 0 success, 2 usage error, 3 file error, 4 invalid data, 5 training
//! diverged, 6 a numerical check failed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::analysis::{self, AnalysisError, GroupSummary};
use crate::dataset::{self, Agreement, DatasetError, LatentScore, Response, ShapeFamily};
use crate::geometry::{self, GeometryError};
use crate::net::{self, ArchKind, ArchitectureSpec, NetError, NetworkParams};
use crate::ranktrain::{self, TrainConfig, TrainError, DEFAULT_ALPHA_GRID};
use crate::server::{self, BatchFile, Collector, ServerError, SystemClock};
use crate::viz::{self, Canvas, SilhouetteRenderer, TsneConfig, VizError};
use crate::voxel::{self, FillMode, VoxelError, VoxelGrid};

/// Failure categories, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    File(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::File(_) => 3,
            CliError::Data(_) => 4,
            CliError::Diverged(_) => 5,
            CliError::CheckFailed(_) => 6,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::File(format!("{}: {e}", path.display()))
}

fn csv_error(e: &csv::Error) -> CliError {
    if e.is_io_error() {
        CliError::File(e.to_string())
    } else {
        CliError::Data(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Io { .. } => CliError::File(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<VoxelError> for CliError {
    fn from(e: VoxelError) -> Self {
        match e {
            VoxelError::Io { .. } => CliError::File(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io { .. } => CliError::File(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Io(_) => CliError::File(e.to_string()),
            TrainError::Diverged { .. } | TrainError::AllDiverged => CliError::Diverged(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Csv(c) => csv_error(&c),
            DatasetError::Train(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Net(n) => n.into(),
            AnalysisError::Train(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<VizError> for CliError {
    fn from(e: VizError) -> Self {
        match e {
            VizError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Io { .. } => CliError::File(e.to_string()),
            ServerError::Dataset(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        csv_error(&e)
    }
}

type CliResult = Result<String, CliError>;

#[derive(Debug, Parser)]
#[command(name = "shaperank", version, about = "Learn and apply perceptual aesthetics scores for 3D shapes")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voxelize OBJ meshes into SRVOX grids.
    Voxelize(VoxelizeArgs),
    /// Build crowd task batches with hidden control questions.
    MakeHits(MakeHitsArgs),
    /// Run the HTTP collection service.
    Serve(ServeArgs),
    /// Train a ranking network from a response log.
    Train(TrainArgs),
    /// Score every grid with a trained model.
    Score(ModelVoxelsArgs),
    /// Rank every grid by score, highest first.
    Rank(ModelVoxelsArgs),
    /// Full and filtered accuracy on a validation log.
    Validate(ValidateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Majority-response consistency between two groups.
    Consistency(ConsistencyArgs),
    /// Two-sample t-test with pooled variance.
    Ttest(TtestArgs),
    /// Mean score gap per agreement group.
    Agreement(AgreementArgs),
    /// Validation accuracy against training-set size.
    Curve(CurveArgs),
    /// t-SNE embedding of voxels or hidden-layer activations.
    Embed(EmbedArgs),
    /// SVG atlas with score-scaled icons.
    Atlas(AtlasArgs),
    /// Synthetic shapes with oracle preference labels.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Full,
    Conv,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Full)]
    pub arch: ArchArg,
    /// Grid resolution R.
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u32).range(1..=128))]
    pub res: u32,
    /// Hidden widths of the fully-connected net, comma separated (default 200,200,50).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Convolution channels.
    #[arg(long, default_value_t = 200)]
    pub channels: usize,
    /// Convolution mask side (default depends on --res).
    #[arg(long)]
    pub mask: Option<usize>,
    /// Convolution stride (default depends on --res).
    #[arg(long)]
    pub stride: Option<usize>,
}

impl ArchArgs {
    fn spec(&self) -> Result<ArchitectureSpec, CliError> {
        let r = self.res as usize;
        let spec = match self.arch {
            ArchArg::Full => match &self.widths {
                Some(w) => {
                    let mut widths = vec![r.pow(3)];
                    widths.extend(w);
                    widths.push(1);
                    ArchitectureSpec::full(r, widths)
                }
                None => ArchitectureSpec::build(ArchKind::Full, r),
            },
            ArchArg::Conv => match (self.mask, self.stride) {
                (Some(m), Some(s)) => ArchitectureSpec::conv(r, self.channels, m, s, vec![50, 1], vec![50, 1]),
                (None, None) => ArchitectureSpec::build(ArchKind::Conv, r),
                _ => return Err(CliError::Usage("--mask and --stride must be given together".into())),
            },
        };
        spec.map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct TrainConfigArgs {
    /// Data-term weight C_p.
    #[arg(long, default_value_t = 100.0)]
    pub c_p: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    /// Full-batch iterations.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score-gap filter for filtered accuracy, as a fraction of the score range.
    #[arg(long, default_value_t = 0.1)]
    pub filter: f64,
}

impl TrainConfigArgs {
    fn config(&self) -> Result<TrainConfig, CliError> {
        let c = TrainConfig {
            c_p: self.c_p,
            alpha: self.alpha,
            iterations: self.iterations,
            seed: self.seed,
            filter_fraction: self.filter,
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    /// An .obj file or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u32).range(1..=128))]
    pub res: u32,
    #[arg(long, default_value = "surface")]
    pub fill: FillMode,
    /// Margin kept on each side of the canonical cube.
    #[arg(long, default_value_t = geometry::DEFAULT_PADDING)]
    pub padding: f64,
}

#[derive(Debug, Args)]
pub struct MakeHitsArgs {
    /// Directory of .srvox grids; every grid not listed as ugly is an ordinary shape.
    #[arg(long)]
    pub voxels: PathBuf,
    /// Ids of the intentionally ugly shapes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ugly: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub n_hits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output batch file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub batches: PathBuf,
    #[arg(long)]
    pub voxels: PathBuf,
    /// Response log (CSV); sessions are kept next to it.
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub voxels: PathBuf,
    /// Response log to learn from.
    #[arg(long)]
    pub responses: PathBuf,
    /// Separate validation log; without it a fraction of --responses is held out.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    /// Select the learning rate from this grid instead of using --alpha
    /// (pass without values for the default grid).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub alpha_grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
    /// Model output.
    #[arg(long)]
    pub out: PathBuf,
    /// Training history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelVoxelsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub voxels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub voxels: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub filter: f64,
    /// Optional CSV with the accuracies.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Full)]
    pub arch: ArchArg,
    /// Resolution; full nets use widths [R^3, 8, 4, 1], conv nets 3 channels
    /// of 4-masks at stride 2 with [4, 1] heads.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=16))]
    pub res: u32,
    #[arg(long, default_value_t = 6)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DemographicField {
    Gender,
    AgeGroup,
    Region,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    /// First group's responses.
    #[arg(long, requires = "group2", conflicts_with = "responses")]
    pub group1: Option<PathBuf>,
    #[arg(long, requires = "group1")]
    pub group2: Option<PathBuf>,
    /// A single log to split (randomly by worker, or by a demographic field).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long, requires = "responses")]
    pub random_split: bool,
    #[arg(long, requires_all = ["responses", "split_by", "values"])]
    pub demographics: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split_by: Option<DemographicField>,
    /// The two field values that define the groups, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub values: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    #[arg(long, allow_hyphen_values = true, requires_all = ["std1", "n1", "mean2", "std2", "n2"], conflicts_with_all = ["file1", "file2"])]
    pub mean1: Option<f64>,
    #[arg(long)]
    pub std1: Option<f64>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub mean2: Option<f64>,
    #[arg(long)]
    pub std2: Option<f64>,
    #[arg(long)]
    pub n2: Option<usize>,
    /// Text file with one value per line (group 1).
    #[arg(long, requires = "file2")]
    pub file1: Option<PathBuf>,
    #[arg(long)]
    pub file2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub voxels: PathBuf,
    /// Log with several responses per pair.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub voxels: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    pub fractions: Vec<f64>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Largest resolution embedded from raw voxels; finer grids go through a
/// hidden layer.
pub const MAX_RAW_EMBED_RES: usize = 15;

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub voxels: PathBuf,
    /// Embed hidden-layer activations of this model instead of raw voxels.
    #[arg(long, requires = "layer")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 100.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AtlasArgs {
    /// Embedding CSV (shape_id,x,y).
    #[arg(long)]
    pub embedding: PathBuf,
    /// Score CSV with shape_id and score columns (score or rank output).
    #[arg(long)]
    pub scores: PathBuf,
    /// Grids for silhouette icons.
    #[arg(long)]
    pub voxels: Option<PathBuf>,
    #[arg(long, default_value_t = 12.0)]
    pub s_min: f64,
    #[arg(long, default_value_t = 64.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 1200.0)]
    pub width: f64,
    #[arg(long, default_value_t = 900.0)]
    pub height: f64,
    #[arg(long, default_value_t = 60.0)]
    pub margin: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Box,
    Ellipsoid,
    Union,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LatentArg {
    Volume,
    Symmetry,
    Smoothness,
    Height,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u32).range(2..=128))]
    pub res: u32,
    #[arg(long, value_enum, default_value_t = FamilyArg::Union)]
    pub family: FamilyArg,
    #[arg(long, value_enum, default_value_t = LatentArg::Volume)]
    pub latent: LatentArg,
    #[arg(long, default_value_t = 2000)]
    pub train_pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub val_pairs: usize,
    /// Simulated workers per pair.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Logistic agreement steepness; omit for noise-free labels.
    #[arg(long)]
    pub steepness: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (voxels/, train.csv, validation.csv, latent.csv).
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns its summary line.
pub fn execute(cli: Cli) -> CliResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::MakeHits(a) => cmd_make_hits(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::Ttest(a) => cmd_ttest(a),
        Command::Agreement(a) => cmd_agreement(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Atlas(a) => cmd_atlas(a),
        Command::Synth(a) => cmd_synth(a),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| io_error(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| io_error(path, e))
}

/// Every `*.srvox` grid in `dir`, keyed by shape id.
pub fn load_voxel_dir(dir: &Path) -> Result<BTreeMap<String, VoxelGrid>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "srvox"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .srvox grids", dir.display())));
    }
    let mut grids = BTreeMap::new();
    for p in paths {
        let g = voxel::read_grid(&p)?;
        if grids.insert(g.shape_id().to_string(), g).is_some() {
            return Err(CliError::Data(format!("{}: duplicate shape id", p.display())));
        }
    }
    Ok(grids)
}

fn load_responses(path: &Path) -> Result<Vec<Response>, CliError> {
    Ok(dataset::read_responses(open(path)?)?)
}

fn load_model(path: &Path) -> Result<NetworkParams, CliError> {
    Ok(net::load_params(path)?)
}

fn cmd_voxelize(a: VoxelizeArgs) -> CliResult {
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.input)
            .map_err(|e| io_error(&a.input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(CliError::Data(format!("{}: no .obj meshes", a.input.display())));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let r = a.res as usize;
    let mut cells = 0;
    for path in &inputs {
        let mesh = geometry::load_mesh(path)?;
        let mesh = geometry::normalize_mesh(&mesh, a.padding)?;
        let grid = voxel::voxelize(&mesh, r, a.fill)?;
        cells += grid.occupied_count();
        voxel::write_grid(&grid, a.out.join(format!("{}.srvox", grid.shape_id())))?;
    }
    Ok(format!(
        "voxelized {} mesh(es) at R={r} ({:?} fill), {cells} occupied cells -> {}",
        inputs.len(),
        a.fill,
        a.out.display()
    ))
}

fn cmd_make_hits(a: MakeHitsArgs) -> CliResult {
    let grids = load_voxel_dir(&a.voxels)?;
    for u in &a.ugly {
        if !grids.contains_key(u) {
            return Err(CliError::Data(format!("ugly shape {u:?} is not in {}", a.voxels.display())));
        }
    }
    let normal: Vec<String> = grids.keys().filter(|k| !a.ugly.contains(k)).cloned().collect();
    let batches = dataset::make_hits(&normal, &a.ugly, a.n_hits, a.seed)?;
    let file = BatchFile {
        ugly_shapes: a.ugly.clone(),
        batches,
    };
    file.save(&a.out)?;
    Ok(format!(
        "wrote {} batch(es) of {} tasks over {} shapes to {} (seed {})",
        a.n_hits,
        dataset::TASKS_PER_HIT,
        normal.len(),
        a.out.display(),
        a.seed
    ))
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    let batches = BatchFile::load(&a.batches)?;
    let shapes = load_voxel_dir(&a.voxels)?;
    for b in &batches.batches {
        for t in &b.tasks {
            for id in [&t.shape_a, &t.shape_b] {
                if !shapes.contains_key(id) {
                    return Err(CliError::Data(format!("batch {} uses unknown shape {id:?}", b.hit_id)));
                }
            }
        }
    }
    let n_batches = batches.batches.len();
    let collector = Collector::open(batches, Arc::new(SystemClock), &a.log)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let state = server::http::AppState {
        collector: Arc::new(collector),
        shapes: Arc::new(shapes),
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::File(e.to_string()))?;
    let log = a.log.display().to_string();
    runtime
        .block_on(server::http::serve(addr, state, |bound| {
            println!("listening on http://{bound} ({n_batches} batches, log {log})");
        }))
        .map_err(|e| CliError::File(format!("{addr}: {e}")))?;
    Ok("server stopped".into())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let spec = a.arch.spec()?;
    let config = a.train.config()?;
    if a.validation.is_none() && !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        return Err(CliError::Usage("--val-fraction must lie in (0, 1)".into()));
    }
    let grids = load_voxel_dir(&a.voxels)?;
    let responses = load_responses(&a.responses)?;
    let (train_rs, val_rs) = match &a.validation {
        Some(v) => (responses, load_responses(v)?),
        None => dataset::split_dataset(&responses, a.val_fraction, config.seed)?,
    };
    let train_set = dataset::responses_to_pairs(&train_rs, &grids)?;
    let val_set = dataset::responses_to_pairs(&val_rs, &grids)?;
    if train_set.is_empty() {
        return Err(CliError::Data("no training pairs".into()));
    }
    let val = (!val_set.is_empty()).then_some(&val_set);

    let (alpha, selection_note) = match &a.alpha_grid {
        Some(grid) => {
            let grid: Vec<f64> = if grid.is_empty() { DEFAULT_ALPHA_GRID.to_vec() } else { grid.clone() };
            let Some(v) = val else {
                return Err(CliError::Data("learning-rate selection needs validation pairs".into()));
            };
            let sel = ranktrain::select_learning_rate(&spec, &train_set, v, &grid, &config)?;
            (sel.best, format!(" selected from {} candidates", grid.len()))
        }
        None => (config.alpha, String::new()),
    };
    let config = TrainConfig { alpha, ..config };
    let init = net::init_params(&spec, config.seed);
    let (params, history) = ranktrain::train(init, &train_set, &config, val)?;
    net::save_params(&params, &a.out)?;
    if let Some(h) = &a.history {
        write_with(h, |w| Ok(history.write_csv(w)?))?;
    }
    let first = history.entries.first().map(|e| e.loss.total).unwrap_or(f64::NAN);
    let last = history.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
    let acc = match val {
        Some(v) => {
            let acc = ranktrain::validation_accuracy(&params, v, config.filter_fraction)?;
            format!(", validation full {:.4} filtered {}", acc.full, fmt_opt(acc.filtered))
        }
        None => String::new(),
    };
    Ok(format!(
        "trained {} on {} pairs: alpha {alpha:e}{selection_note}, {} iterations, loss {first:.6} -> {last:.6}{acc} -> {} (seed {})",
        spec_label(&spec),
        train_set.len(),
        config.iterations,
        a.out.display(),
        config.seed
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn spec_label(spec: &ArchitectureSpec) -> String {
    let kind = match spec.kind() {
        ArchKind::Full => "full",
        ArchKind::Conv => "conv",
    };
    format!("{kind}/{}", spec.resolution())
}

fn score_grids(params: &NetworkParams, grids: &BTreeMap<String, VoxelGrid>) -> Result<BTreeMap<String, f64>, CliError> {
    Ok(analysis::score_map(params, grids)?)
}

fn cmd_score(a: ModelVoxelsArgs) -> CliResult {
    let params = load_model(&a.model)?;
    let grids = load_voxel_dir(&a.voxels)?;
    let scores = score_grids(&params, &grids)?;
    write_with(&a.out, |w| {
        let mut c = dataset::csv_writer(w);
        c.write_record(["shape_id", "score"])?;
        for (id, s) in &scores {
            c.write_record([id.clone(), format!("{s}")])?;
        }
        c.flush().map_err(|e| io_error(&a.out, e))
    })?;
    Ok(format!("scored {} shapes -> {}", scores.len(), a.out.display()))
}

fn cmd_rank(a: ModelVoxelsArgs) -> CliResult {
    let params = load_model(&a.model)?;
    let grids: Vec<VoxelGrid> = load_voxel_dir(&a.voxels)?.into_values().collect();
    let ranked = analysis::rank_shapes(&params, &grids)?;
    write_with(&a.out, |w| Ok(ranked.write_csv(w)?))?;
    let (top, score) = &ranked.entries[0];
    Ok(format!(
        "ranked {} shapes (top: {top} {score:.4}) -> {}",
        ranked.entries.len(),
        a.out.display()
    ))
}

fn cmd_validate(a: ValidateArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.filter) {
        return Err(CliError::Usage("--filter must lie in [0, 1)".into()));
    }
    let params = load_model(&a.model)?;
    let grids = load_voxel_dir(&a.voxels)?;
    let set = dataset::responses_to_pairs(&load_responses(&a.responses)?, &grids)?;
    let acc = ranktrain::validation_accuracy(&params, &set, a.filter)?;
    if let Some(out) = &a.out {
        write_with(out, |w| {
            let mut c = dataset::csv_writer(w);
            c.write_record(["n_total", "full_acc", "filter_fraction", "n_kept", "filtered_acc"])?;
            c.write_record([
                acc.n_total.to_string(),
                format!("{}", acc.full),
                format!("{}", a.filter),
                acc.n_kept.to_string(),
                acc.filtered.map(|v| format!("{v}")).unwrap_or_default(),
            ])?;
            c.flush().map_err(|e| io_error(out, e))
        })?;
    }
    Ok(format!(
        "validation on {} pairs: full {:.4}, filtered {} ({} kept at filter {})",
        acc.n_total,
        acc.full,
        fmt_opt(acc.filtered),
        acc.n_kept,
        a.filter
    ))
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let r = a.res as usize;
    let spec = match a.arch {
        ArchArg::Full => ArchitectureSpec::full(r, vec![r.pow(3), 8, 4, 1]),
        ArchArg::Conv => ArchitectureSpec::conv(r, 3, 4, 2, vec![4, 1], vec![4, 1]),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let err = ranktrain::gradient_check(&spec, a.seed, a.pairs, a.epsilon)?;
    let line = format!(
        "gradcheck {} with {} params, {} pairs, epsilon {:e}: max relative error {err:.3e} (seed {})",
        spec_label(&spec),
        NetworkParams::zeros(&spec).num_values(),
        a.pairs,
        a.epsilon,
        a.seed
    );
    if err < a.tolerance {
        Ok(line)
    } else {
        Err(CliError::CheckFailed(format!("{line} exceeds tolerance {:e}", a.tolerance)))
    }
}

fn cmd_consistency(a: ConsistencyArgs) -> CliResult {
    let (g1, g2, how) = match (&a.group1, &a.group2, &a.responses) {
        (Some(p1), Some(p2), None) => (load_responses(p1)?, load_responses(p2)?, "two logs".to_string()),
        (None, None, Some(r)) => {
            if a.random_split {
                let rs = load_responses(r)?;
                let (g1, g2) = dataset::random_worker_split(&rs, a.seed)?;
                (g1, g2, format!("random worker split (seed {})", a.seed))
            } else if let (Some(demo), Some(field), Some(values)) = (&a.demographics, a.split_by, &a.values) {
                let rs = load_responses(r)?;
                let demo = dataset::read_demographics(open(demo)?)?;
                let value_of = |w: &str| {
                    demo.get(w).and_then(|d| match field {
                        DemographicField::Gender => d.gender.clone(),
                        DemographicField::AgeGroup => d.age_group.clone(),
                        DemographicField::Region => d.region.clone(),
                    })
                };
                let pick = |v: &str| -> Vec<Response> {
                    rs.iter().filter(|r| value_of(&r.worker_id).as_deref() == Some(v)).cloned().collect()
                };
                (pick(&values[0]), pick(&values[1]), format!("{} vs {}", values[0], values[1]))
            } else {
                return Err(CliError::Usage(
                    "with --responses pass --random-split or --demographics/--split-by/--values".into(),
                ));
            }
        }
        _ => return Err(CliError::Usage("pass --group1 and --group2, or --responses".into())),
    };
    let strip = |rs: Vec<Response>| -> Vec<Response> { rs.into_iter().filter(|r| !r.pair.is_control).collect() };
    let report = dataset::consistency(&strip(g1), &strip(g2))?;
    if let Some(out) = &a.out {
        write_with(out, |w| Ok(report.write_csv(w)?))?;
    }
    Ok(format!(
        "consistency ({how}): {}/{} pairs match ({:.3})",
        report.matches(),
        report.total(),
        report.match_rate()
    ))
}

fn read_values(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| CliError::Data(format!("{}: not a number: {l:?}", path.display())))
        })
        .collect()
}

fn cmd_ttest(a: TtestArgs) -> CliResult {
    let result = match (&a.file1, &a.file2) {
        (Some(f1), Some(f2)) => analysis::ttest_samples(&read_values(f1)?, &read_values(f2)?)?,
        _ => {
            let (Some(m1), Some(s1), Some(n1), Some(m2), Some(s2), Some(n2)) = (a.mean1, a.std1, a.n1, a.mean2, a.std2, a.n2)
            else {
                return Err(CliError::Usage("pass --mean1/--std1/--n1/--mean2/--std2/--n2 or --file1/--file2".into()));
            };
            analysis::ttest_equal_var(
                GroupSummary { mean: m1, std: s1, n: n1 },
                GroupSummary { mean: m2, std: s2, n: n2 },
            )?
        }
    };
    if let Some(out) = &a.out {
        write_with(out, |w| Ok(result.write_csv(w)?))?;
    }
    Ok(format!("two-sample t-test (equal variances): {result}"))
}

fn cmd_agreement(a: AgreementArgs) -> CliResult {
    let params = load_model(&a.model)?;
    let grids = load_voxel_dir(&a.voxels)?;
    let responses = load_responses(&a.responses)?;
    let scores = score_grids(&params, &grids)?;
    let report = analysis::agreement_gap_analysis(&responses, &scores)?;
    write_with(&a.out, |w| Ok(report.write_csv(w)?))?;
    let parts: Vec<String> = report
        .bins
        .iter()
        .map(|b| format!("{} {:.4} (n={})", b.bin, b.mean_diff, b.n_pairs))
        .collect();
    Ok(format!("agreement gaps: {} -> {}", parts.join(", "), a.out.display()))
}

fn cmd_curve(a: CurveArgs) -> CliResult {
    let spec = a.arch.spec()?;
    let config = a.train.config()?;
    let grids = load_voxel_dir(&a.voxels)?;
    let train = dataset::responses_to_pairs(&load_responses(&a.responses)?, &grids)?;
    let val = dataset::responses_to_pairs(&load_responses(&a.validation)?, &grids)?;
    let points = analysis::learning_curve(&spec, &train, &val, &a.fractions, &config)?;
    write_with(&a.out, |w| Ok(analysis::write_curve_csv(&points, w)?))?;
    let parts: Vec<String> = points.iter().map(|p| format!("{}:{:.4}", p.fraction, p.accuracy)).collect();
    Ok(format!(
        "learning curve {} ({}) -> {} (seed {})",
        spec_label(&spec),
        parts.join(" "),
        a.out.display(),
        config.seed
    ))
}

fn cmd_embed(a: EmbedArgs) -> CliResult {
    let grids = load_voxel_dir(&a.voxels)?;
    let ids: Vec<String> = grids.keys().cloned().collect();
    let (points, source): (Vec<Vec<f64>>, String) = match (&a.model, a.layer) {
        (Some(m), Some(layer)) => {
            let params = load_model(m)?;
            let pts = grids
                .values()
                .map(|g| viz::inner_activations(&params, g, layer))
                .collect::<Result<_, _>>()?;
            (pts, format!("layer {layer} activations"))
        }
        _ => {
            let r = grids.values().next().map(|g| g.resolution()).unwrap_or(0);
            if r > MAX_RAW_EMBED_RES {
                return Err(CliError::Usage(format!(
                    "raw voxels at R={r} are too high-dimensional; pass --model and --layer (raw embedding allowed up to R={MAX_RAW_EMBED_RES})"
                )));
            }
            (grids.values().map(|g| g.to_input().0).collect(), "raw voxels".into())
        }
    };
    let config = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let emb = viz::tsne(&points, &config)?;
    write_with(&a.out, |w| Ok(viz::write_embedding_csv(&ids, &emb.coords, w)?))?;
    Ok(format!(
        "embedded {} shapes from {source}: KL {:.4} after {} iterations -> {} (seed {})",
        ids.len(),
        emb.kl,
        emb.iterations,
        a.out.display(),
        a.seed
    ))
}

#[derive(Debug, Deserialize)]
struct EmbeddingRow {
    shape_id: String,
    x: f64,
    y: f64,
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    shape_id: String,
    score: f64,
}

fn cmd_atlas(a: AtlasArgs) -> CliResult {
    let canvas = Canvas {
        width: a.width,
        height: a.height,
        margin: a.margin,
    };
    if !(a.margin >= 0.0 && 2.0 * a.margin < a.width.min(a.height)) {
        return Err(CliError::Usage("--margin must leave room inside the canvas".into()));
    }
    let mut rows: Vec<EmbeddingRow> = csv::Reader::from_reader(open(&a.embedding)?)
        .deserialize()
        .collect::<Result<_, _>>()?;
    rows.sort_by(|x, y| x.shape_id.cmp(&y.shape_id));
    let scores: BTreeMap<String, f64> = csv::Reader::from_reader(open(&a.scores)?)
        .deserialize::<ScoreRow>()
        .map(|r| r.map(|r| (r.shape_id, r.score)))
        .collect::<Result<_, _>>()?;
    let ids: Vec<String> = rows.iter().map(|r| r.shape_id.clone()).collect();
    let coords: Vec<[f64; 2]> = rows.iter().map(|r| [r.x, r.y]).collect();
    let s: Vec<f64> = ids
        .iter()
        .map(|id| scores.get(id).copied().ok_or_else(|| CliError::Data(format!("no score for {id:?}"))))
        .collect::<Result<_, _>>()?;
    let layout = viz::atlas(&ids, &coords, &s, a.s_min, a.s_max, canvas)?;
    let renderer = SilhouetteRenderer {
        grids: match &a.voxels {
            Some(dir) => load_voxel_dir(dir)?,
            None => BTreeMap::new(),
        },
    };
    let svg = viz::emit_svg(&layout, &renderer);
    write_with(&a.out, |w| w.write_all(svg.as_bytes()).map_err(|e| io_error(&a.out, e)))?;
    Ok(format!("atlas of {} shapes -> {}", ids.len(), a.out.display()))
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    if let Some(k) = a.steepness {
        if !(k > 0.0 && k.is_finite()) {
            return Err(CliError::Usage("--steepness must be positive".into()));
        }
    }
    let family = match a.family {
        FamilyArg::Box => ShapeFamily::Box,
        FamilyArg::Ellipsoid => ShapeFamily::Ellipsoid,
        FamilyArg::Union => ShapeFamily::Union,
    };
    let latent_kind = match a.latent {
        LatentArg::Volume => LatentScore::Volume,
        LatentArg::Symmetry => LatentScore::MirrorSymmetry,
        LatentArg::Smoothness => LatentScore::Smoothness,
        LatentArg::Height => LatentScore::Height,
    };
    let agreement = match a.steepness {
        Some(steepness) => Agreement::Logistic { steepness },
        None => Agreement::NoiseFree,
    };
    let shapes = dataset::synth_shapes(a.n, a.res as usize, family, a.seed)?;
    let ids: Vec<String> = shapes.iter().map(|s| s.grid.shape_id().to_string()).collect();
    let latent: BTreeMap<String, f64> = shapes
        .iter()
        .map(|s| (s.grid.shape_id().to_string(), latent_kind.evaluate(&s.grid)))
        .collect();
    let (train_pairs, val_pairs) = dataset::disjoint_pairs(&ids, a.train_pairs, a.val_pairs, a.seed)?;
    let train = dataset::oracle_label(&train_pairs, &latent, agreement, a.workers, a.seed.wrapping_add(2))?;
    let val = dataset::oracle_label(&val_pairs, &latent, agreement, a.workers, a.seed.wrapping_add(3))?;

    let vox_dir = a.out.join("voxels");
    fs::create_dir_all(&vox_dir).map_err(|e| io_error(&vox_dir, e))?;
    for s in &shapes {
        voxel::write_grid(&s.grid, vox_dir.join(format!("{}.srvox", s.grid.shape_id())))?;
    }
    write_with(&a.out.join("train.csv"), |w| Ok(dataset::write_responses(&train, w)?))?;
    write_with(&a.out.join("validation.csv"), |w| Ok(dataset::write_responses(&val, w)?))?;
    let latent_path = a.out.join("latent.csv");
    write_with(&latent_path, |w| {
        let mut c = dataset::csv_writer(w);
        c.write_record(["shape_id", "latent"])?;
        for (id, v) in &latent {
            c.write_record([id.clone(), format!("{v}")])?;
        }
        c.flush().map_err(|e| io_error(&latent_path, e))
    })?;
    Ok(format!(
        "synthesized {} {family} shapes at R={} with {} training and {} validation responses -> {} (seed {})",
        shapes.len(),
        a.res,
        train.len(),
        val.len(),
        a.out.display(),
        a.seed
    ))
}

