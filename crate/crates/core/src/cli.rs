//! Command-line front end. Every subcommand reads and writes files only;
//! options may also come from a `key = value` config file given with
//! `--config`, with command-line flags taking precedence.
//!
//! Exit codes: 0 ok, 1 usage, 2 I/O, 3 data, 4 numeric.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};

use crate::error::{Error, Result};
use crate::feature_stack::{assemble, FeatureConfig, FeatureRequest, SmoothingConfig};
use crate::losses_metrics::{heading_bias_report, per_channel_mse_report, LossWeights};
use crate::movie_store::{
    heading_value_to_class, real_to_byte, synth_movie, Frame, GridDims, MovieArchive, Subtask, TensorFile,
    HEADING_CLASSES, MOVIE_CHANNELS,
};
use crate::neuralnet::{save_checkpoint, UpdateRule};
use crate::tensor::{Plane, Tensor3};
use crate::tiling::{plan_layout, stitch, stitch_heading, Rect, TileLayout};
use crate::trainer::{
    derive_seed, online_finetune, predict_city, run_algorithm1, DaySimilarityFeatures, HeadingMode, ModelRegistry,
    OnlineFinetune, PhaseConfig, PhaseSchedule, RegistryKey, SimilarityWeights, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "tmovie", version, about = "Traffic-movie feature assembly, training and evaluation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic archive.
    Generate(GenerateArgs),
    /// Assemble one 101-channel feature stack plus its manifest.
    Features(FeaturesArgs),
    /// Print or save the five-tile layout for a grid.
    Plan(PlanArgs),
    /// Crop a movie-format file into one file per tile.
    Crop(CropArgs),
    /// Stitch per-tile files back into one grid.
    Stitch(StitchArgs),
    /// Train every (city, subtask, subregion) model.
    Train(TrainArgs),
    /// Predict the next frames for a city from its 15 models.
    Predict(PredictArgs),
    /// Fine-tune one model for one more epoch on similar days.
    OnlineFinetune(OnlineArgs),
    /// Per-channel metrics of a prediction file against truth.
    Evaluate(EvaluateArgs),
    /// Mean predicted heading byte per true heading code.
    BiasReport(BiasArgs),
}

fn parse_dims(s: &str) -> std::result::Result<GridDims, String> {
    s.parse::<GridDims>().map_err(|e| e.to_string())
}

/// `HxW`, or a single number for square tiles.
fn parse_tile(s: &str) -> std::result::Result<(usize, usize), String> {
    if let Ok(n) = s.trim().parse::<usize>() {
        return Ok((n, n));
    }
    let d = parse_dims(s)?;
    Ok((d.height, d.width))
}

fn parse_subtask(s: &str) -> std::result::Result<Subtask, String> {
    s.parse::<Subtask>().map_err(|e| e.to_string())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| format!("bad list item {p:?}")))
        .collect()
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "436x495", value_parser = parse_dims)]
    pub dims: GridDims,
    #[arg(long, default_value_t = 7)]
    pub days: u32,
    /// Comma-separated city names.
    #[arg(long, default_value = "city0")]
    pub cities: String,
    /// Share of off-road (always-zero) pixels.
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Frames in the moving-average window of the periodic channels.
    #[arg(long, default_value_t = SmoothingConfig::default().window)]
    pub smoothing_window: usize,
    /// Take missing lag frames from the previous day when `T < 12`.
    #[arg(long)]
    pub previous_day_fallback: bool,
}

impl FeatureArgs {
    fn config(&self) -> FeatureConfig {
        FeatureConfig {
            smoothing: SmoothingConfig {
                window: self.smoothing_window,
            },
            previous_day_fallback: self.previous_day_fallback,
        }
    }
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub city: String,
    #[arg(long)]
    pub day: u32,
    #[arg(long)]
    pub time: usize,
    #[arg(long, value_parser = parse_subtask)]
    pub subtask: Subtask,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Output directory for `stack.t4cm` and `manifest.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LayoutArgs {
    /// Tile size, `HxW` or a single number.
    #[arg(long, default_value = "299", value_parser = parse_tile)]
    pub tile: (usize, usize),
    /// Layout file (`index y0 x0 h w`, tab-separated) overriding `--tile`.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

impl LayoutArgs {
    fn resolve(&self, dims: GridDims) -> Result<TileLayout> {
        match &self.layout {
            Some(p) => TileLayout::parse(&read_text(p)?, dims),
            None => plan_layout(dims, self.tile.0, self.tile.1),
        }
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, default_value = "436x495", value_parser = parse_dims)]
    pub dims: GridDims,
    #[arg(long, default_value = "299", value_parser = parse_tile)]
    pub tile: (usize, usize),
    /// Write the layout here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    /// Any movie-format file (movie, prediction or feature stack).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub layout: LayoutArgs,
    /// Output directory for `tile<i>.t4cm` and `layout.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Directory written by `crop` (or laid out the same way).
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    pub dims: GridDims,
    /// Layout file; defaults to `<tiles>/layout.tsv`.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Channel holding heading codes, stitched by class vote instead of a
    /// mean. Defaults to 2 for 3-channel files.
    #[arg(long)]
    pub heading_channel: Option<usize>,
    /// Average every channel, heading included.
    #[arg(long)]
    pub no_heading: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// `(day, time)` pairs sampled per city.
    #[arg(long, default_value_t = 8)]
    pub pool_size: usize,
    /// `classification` or `leaderboard-mse`.
    #[arg(long, default_value = "classification")]
    pub heading_mode: HeadingMode,
    #[arg(long, default_value_t = 1.0)]
    pub weight_heading: f64,
    #[arg(long, default_value_t = 1.0)]
    pub weight_volume: f64,
    #[arg(long, default_value_t = 1.0)]
    pub weight_speed: f64,
    /// `adam` or `sgd`.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub features: FeatureArgs,
}

impl ModelArgs {
    fn config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "adam" => UpdateRule::Adam,
            "sgd" => UpdateRule::Sgd,
            other => return Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        };
        let cfg = TrainConfig {
            base_width: self.base_width,
            depth: self.depth,
            horizon: self.horizon,
            batch_size: self.batch_size,
            pool_size: self.pool_size,
            weights: LossWeights {
                heading: self.weight_heading,
                volume: self.weight_volume,
                speed: self.weight_speed,
            },
            heading_mode: self.heading_mode,
            features: self.features.config(),
            optimizer,
            seed: self.seed,
            jobs: self.jobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = PhaseSchedule::default().scratch.lr)]
    pub scratch_lr: f64,
    #[arg(long, default_value_t = PhaseSchedule::default().scratch.epochs)]
    pub scratch_epochs: usize,
    #[arg(long, default_value_t = PhaseSchedule::default().task.lr)]
    pub task_lr: f64,
    #[arg(long, default_value_t = PhaseSchedule::default().task.epochs)]
    pub task_epochs: usize,
    #[arg(long, default_value_t = PhaseSchedule::default().task.data_fraction)]
    pub task_fraction: f64,
    #[arg(long, default_value_t = PhaseSchedule::default().polish.lr)]
    pub polish_lr: f64,
    #[arg(long, default_value_t = PhaseSchedule::default().polish.epochs)]
    pub polish_epochs: usize,
    #[arg(long, default_value_t = PhaseSchedule::default().polish.data_fraction)]
    pub polish_fraction: f64,
}

impl ScheduleArgs {
    fn schedule(&self) -> Result<PhaseSchedule> {
        let d = PhaseSchedule::default();
        let s = PhaseSchedule {
            scratch: PhaseConfig {
                lr: self.scratch_lr,
                epochs: self.scratch_epochs,
                ..d.scratch
            },
            task: PhaseConfig {
                lr: self.task_lr,
                epochs: self.task_epochs,
                data_fraction: self.task_fraction,
                ..d.task
            },
            polish: PhaseConfig {
                lr: self.polish_lr,
                epochs: self.polish_epochs,
                data_fraction: self.polish_fraction,
                ..d.polish
            },
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    /// Comma-separated; defaults to every city in the archive.
    #[arg(long)]
    pub cities: Option<String>,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub city: String,
    #[arg(long)]
    pub day: u32,
    /// First predicted frame; inputs end at `time - 1`.
    #[arg(long)]
    pub time: usize,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Movie-format file with one frame per horizon step.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OnlineArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub city: String,
    #[arg(long, value_parser = parse_subtask)]
    pub subtask: Subtask,
    #[arg(long)]
    pub subregion: usize,
    /// The day about to be predicted.
    #[arg(long)]
    pub day: u32,
    /// Candidate days; defaults to every archive day before `--day`.
    #[arg(long)]
    pub candidates: Option<String>,
    /// Lines of `day<TAB>v1,v2,...` with external similarity features.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub time_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    pub external_weight: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub samples_per_day: usize,
    /// Held-out times on the target day for the before/after loss.
    #[arg(long, default_value = "60,120,180,240")]
    pub validation_times: String,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the tuned checkpoint here instead of replacing the registry
    /// entry.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Movie-format prediction file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Movie-format truth file (a whole day is fine, see `--truth-offset`).
    #[arg(long)]
    pub truth: PathBuf,
    /// Truth frame aligned with the first prediction frame.
    #[arg(long, default_value_t = 0)]
    pub truth_offset: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Report file (`metric channel value`); standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the heading bias table here.
    #[arg(long)]
    pub bias_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn split_names(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect()
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.sparsity) {
        return Err(Error::InvalidConfig(format!("sparsity {} outside [0, 1]", a.sparsity)));
    }
    let cities = split_names(&a.cities);
    if cities.is_empty() {
        return Err(Error::InvalidConfig("no city names given".into()));
    }
    let mut archive = MovieArchive::create(&a.out, a.dims, &[])?;
    for city in &cities {
        let seed = derive_seed(a.seed, city);
        for day in 0..a.days {
            let mut movie = synth_movie(seed, a.dims, day, a.sparsity);
            movie.city.clone_from(city);
            archive.append(&movie)?;
        }
        info!("{city}: {} days written", a.days);
    }
    println!(
        "archive {}: {} cities x {} days, grid {}, {} files",
        a.out.display(),
        cities.len(),
        a.days,
        a.dims,
        archive.len()
    );
    Ok(())
}

fn cmd_features(a: &FeaturesArgs) -> Result<()> {
    let archive = MovieArchive::open(&a.archive)?;
    let mut req = FeatureRequest::new(a.city.as_str(), a.day, a.time, a.subtask);
    req.horizon = a.horizon;
    let stack = assemble(&archive, &req, &a.features.config())?;
    let (stack_path, manifest_path) = (a.out.join("stack.t4cm"), a.out.join("manifest.tsv"));
    stack.write(&stack_path, &manifest_path)?;
    let [lag, periodic, stat, cal] = stack.family_counts();
    println!(
        "{} channels (lag {lag}, periodic {periodic}, statistic {stat}, calendar {cal}) -> {}",
        stack.manifest.len(),
        stack_path.display()
    );
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let layout = plan_layout(a.dims, a.tile.0, a.tile.1)?;
    emit(a.out.as_deref(), &layout.to_text())
}

/// Crops every frame of a channel-last file to `rect`.
fn crop_file(file: &TensorFile, rect: &Rect) -> Result<TensorFile> {
    if !rect.fits(file.dims()) {
        return Err(Error::Bounds(format!("{rect:?} outside {}", file.dims())));
    }
    let c = file.channels;
    let mut payload = Vec::with_capacity(file.frames * rect.h * rect.w * c);
    for f in 0..file.frames {
        let bytes = file.frame_bytes(f);
        for y in rect.y0..rect.y0 + rect.h {
            let start = (y * file.width + rect.x0) * c;
            payload.extend_from_slice(&bytes[start..start + rect.w * c]);
        }
    }
    TensorFile::new(file.frames, rect.h, rect.w, c, payload)
}

fn tile_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("tile{i}.t4cm"))
}

fn cmd_crop(a: &CropArgs) -> Result<()> {
    let file = TensorFile::read(&a.input)?;
    let layout = a.layout.resolve(file.dims())?;
    for (i, rect) in layout.rects.iter().enumerate() {
        crop_file(&file, rect)?.write(&tile_path(&a.out, i))?;
    }
    write_text(&a.out.join("layout.tsv"), &layout.to_text())?;
    println!("{} tiles of {} frames -> {}", layout.rects.len(), file.frames, a.out.display());
    Ok(())
}

/// Stitches channel-last tile files. Regular channels are averaged and
/// rounded; the heading channel (if any) is stitched by averaging one-hot
/// class votes and taking the argmax.
pub fn stitch_files(tiles: &[TensorFile], layout: &TileLayout, heading_channel: Option<usize>) -> Result<TensorFile> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::InvalidInput("no tiles to stitch".into()))?;
    let (frames, c) = (first.frames, first.channels);
    if tiles.len() != layout.rects.len() {
        return Err(Error::InvalidInput(format!("{} tiles for {} rects", tiles.len(), layout.rects.len())));
    }
    for (t, r) in tiles.iter().zip(&layout.rects) {
        if t.frames != frames || t.channels != c || t.height != r.h || t.width != r.w {
            return Err(Error::InvalidInput(format!("tile {}x{}x{} does not match rect {r:?}", t.frames, t.height, t.width)));
        }
    }
    if heading_channel.is_some_and(|h| h >= c) {
        return Err(Error::InvalidInput(format!("heading channel {heading_channel:?} with {c} channels")));
    }
    let dims = layout.dims;
    let mut payload = vec![0u8; frames * dims.pixels() * c];
    for f in 0..frames {
        for ch in 0..c {
            let values: Vec<u8> = if Some(ch) == heading_channel {
                let votes = tiles
                    .iter()
                    .map(|t| {
                        let n = t.height * t.width;
                        let mut v = Tensor3::zeros(HEADING_CLASSES, t.height, t.width);
                        for (p, px) in t.frame_bytes(f).chunks(c).enumerate() {
                            v.data[heading_value_to_class(px[ch])? as usize * n + p] = 1.0;
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                stitch_heading(&votes, layout)?
            } else {
                let planes = tiles
                    .iter()
                    .map(|t| {
                        let data = t.frame_bytes(f).chunks(c).map(|px| f64::from(px[ch])).collect();
                        Plane::from_vec(t.height, t.width, data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                stitch(&planes, layout)?.data.into_iter().map(real_to_byte).collect()
            };
            for (p, v) in values.into_iter().enumerate() {
                payload[(f * dims.pixels() + p) * c + ch] = v;
            }
        }
    }
    TensorFile::new(frames, dims.height, dims.width, c, payload)
}

fn cmd_stitch(a: &StitchArgs) -> Result<()> {
    let layout_path = a.layout.clone().unwrap_or_else(|| a.tiles.join("layout.tsv"));
    let layout = TileLayout::parse(&read_text(&layout_path)?, a.dims)?;
    let tiles = (0..layout.rects.len())
        .map(|i| TensorFile::read(&tile_path(&a.tiles, i)))
        .collect::<Result<Vec<_>>>()?;
    let channels = tiles.first().map_or(0, |t| t.channels);
    let heading = match (a.no_heading, a.heading_channel) {
        (true, _) => None,
        (false, Some(h)) => Some(h),
        (false, None) => (channels == MOVIE_CHANNELS).then_some(Subtask::Heading.channel()),
    };
    let out = stitch_files(&tiles, &layout, heading)?;
    out.write(&a.out)?;
    println!("stitched {} tiles -> {} ({} frames, grid {})", tiles.len(), a.out.display(), out.frames, a.dims);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let archive = MovieArchive::open(&a.archive)?;
    let cities = match &a.cities {
        Some(c) => split_names(c),
        None => archive.cities(),
    };
    let layout = a.layout.resolve(archive.dims())?;
    let cfg = a.model.config()?;
    let schedule = a.schedule.schedule()?;
    let mut registry = ModelRegistry::create(&a.registry)?;
    let report = run_algorithm1(&archive, &mut registry, &cities, &layout, &schedule, &cfg)?;
    for (key, loss) in &report.final_loss {
        println!("{key}\t{loss:e}");
    }
    println!("{} checkpoints in {}", report.checkpoints.len(), registry.root().display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let archive = MovieArchive::open(&a.archive)?;
    let registry = ModelRegistry::open(&a.registry)?;
    let layout = a.layout.resolve(archive.dims())?;
    let frames = predict_city(&registry, &archive, &a.city, a.day, a.time, &layout, &a.features.config())?;
    TensorFile::from_frames(&frames)?.write(&a.out)?;
    println!("{} frames for {} day {} from t={} -> {}", frames.len(), a.city, a.day, a.time, a.out.display());
    Ok(())
}

fn read_external(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for line in read_text(path)?.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let bad = || Error::Format(format!("bad external feature line {line:?}"));
        let (day, values) = line.split_once('\t').ok_or_else(bad)?;
        let day: u32 = day.trim().parse().map_err(|_| bad())?;
        let values: Vec<f64> = parse_list(values).map_err(|_| bad())?;
        out.insert(day, values);
    }
    Ok(out)
}

fn cmd_online(a: &OnlineArgs) -> Result<()> {
    let archive = MovieArchive::open(&a.archive)?;
    let mut registry = ModelRegistry::open(&a.registry)?;
    let layout = a.layout.resolve(archive.dims())?;
    let rect = *layout
        .rects
        .get(a.subregion)
        .ok_or_else(|| Error::InvalidInput(format!("subregion {} not in the layout", a.subregion)))?;
    let key = RegistryKey::new(a.city.as_str(), a.subtask, a.subregion);
    let mut model = registry.load(&key)?;
    let mut cfg = a.model.config()?;
    cfg.horizon = model.config().horizon;

    let external = a.external.as_deref().map(read_external).transpose()?.unwrap_or_default();
    let features = |day: u32| DaySimilarityFeatures {
        day,
        external: external.get(&day).cloned(),
    };
    let candidate_days: Vec<u32> = match &a.candidates {
        Some(s) => parse_list(s).map_err(Error::InvalidInput)?,
        None => archive.days(&a.city)?.into_iter().filter(|&d| d < a.day).collect(),
    };
    let job = OnlineFinetune {
        city: a.city.clone(),
        rect,
        subtask: a.subtask,
        target: features(a.day),
        candidates: candidate_days.into_iter().map(features).collect(),
        weights: SimilarityWeights {
            time: a.time_weight,
            external: a.external_weight,
        },
        k: a.k,
        lr: a.lr,
        samples_per_day: a.samples_per_day,
        validation_times: parse_list(&a.validation_times).map_err(Error::InvalidInput)?,
        seed: a.model.seed,
    };
    let report = online_finetune(&mut model, &archive, &job, &cfg)?;
    if let Some(w) = &report.warning {
        warn!("{w}");
        println!("warning\t{w}");
    }
    println!("days\t{}", report.days_used.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
    println!("before\t{:e}\nafter\t{:e}", report.before, report.after);
    match &a.out {
        Some(p) => save_checkpoint(&model, p)?,
        None => {
            registry.save(&key, &model)?;
        }
    }
    Ok(())
}

fn read_pair(a: &PairArgs) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let pred = TensorFile::read(&a.pred)?.to_frames()?;
    let truth = TensorFile::read(&a.truth)?.to_frames()?;
    let end = a.truth_offset + pred.len();
    if end > truth.len() {
        return Err(Error::Data(format!(
            "truth has {} frames, need {end} for {} predicted frames at offset {}",
            truth.len(),
            pred.len(),
            a.truth_offset
        )));
    }
    Ok((pred, truth[a.truth_offset..end].to_vec()))
}

fn bias_text(pred: &[Frame], truth: &[Frame]) -> Result<String> {
    let h = |frames: &[Frame]| frames.iter().map(|f| f.channel_bytes(Subtask::Heading)).collect::<Vec<_>>();
    Ok(heading_bias_report(&h(pred), &h(truth))?.to_string())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (pred, truth) = read_pair(&a.pair)?;
    let report = per_channel_mse_report(&pred, &truth)?;
    emit(a.out.as_deref(), &report.to_text())?;
    if let Some(p) = &a.bias_out {
        write_text(p, &bias_text(&pred, &truth)?)?;
    }
    Ok(())
}

fn cmd_bias(a: &BiasArgs) -> Result<()> {
    let (pred, truth) = read_pair(&a.pair)?;
    emit(a.out.as_deref(), &bias_text(&pred, &truth)?)
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Features(a) => cmd_features(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Crop(a) => cmd_crop(a),
        Command::Stitch(a) => cmd_stitch(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::OnlineFinetune(a) => cmd_online(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::BiasReport(a) => cmd_bias(a),
    }
}

/// Parses `key = value` lines; `#` starts a comment. Keys may use `_` or
/// `-`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("config line {line:?} is not `key = value`")))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Splices config-file values in front of the subcommand's own flags, so
/// flags given on the command line win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| Error::InvalidConfig("--config needs a file".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let values = parse_config(&read_text(Path::new(&path))?)?;
    let Some(pos) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(rest);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&rest[pos]) else { return Ok(rest) };
    let mut injected = Vec::new();
    for (key, value) in &values {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if !cmd.get_subcommands().any(|s| s.get_arguments().any(|a| a.get_long() == Some(key.as_str()))) {
                warn!("config key {key:?} is not a flag of any subcommand");
            }
            continue;
        };
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value.as_str() {
                "true" | "yes" | "1" => injected.push(format!("--{key}")),
                "false" | "no" | "0" => {}
                other => return Err(Error::InvalidConfig(format!("{key} = {other:?} is not a boolean"))),
            }
        }
    }
    rest.splice(pos + 1..pos + 1, injected);
    Ok(rest)
}

/// Full command-line entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = parse_config("# comment\narchive = /tmp/a\nsmoothing_window=5 # trailing\n\n").unwrap();
        assert_eq!(c["archive"], "/tmp/a");
        assert_eq!(c["smoothing-window"], "5");
        assert!(parse_config("no equals sign").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "dims = 20x30\ntile = 15\nprevious_day_fallback = true\n").unwrap();
        let args = |extra: &[&str]| {
            let mut v = vec!["tmovie".to_string(), "--config".into(), cfg.display().to_string(), "plan".into()];
            v.extend(extra.iter().map(|s| s.to_string()));
            expand_config(v).unwrap()
        };
        let cli = Cli::try_parse_from(args(&[])).unwrap();
        let Command::Plan(p) = cli.command else { panic!() };
        assert_eq!((p.dims.height, p.dims.width, p.tile), (20, 30, (15, 15)));
        let cli = Cli::try_parse_from(args(&["--tile", "12x16"])).unwrap();
        let Command::Plan(p) = cli.command else { panic!() };
        assert_eq!(p.tile, (12, 16));
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["tmovie", "plan", "--dims", "nonsense"]), 1);
        assert_eq!(run(["tmovie", "frobnicate"]), 1);
        assert_eq!(run(["tmovie", "plan", "--dims", "20x20", "--tile", "5"]), 1);
    }
}
