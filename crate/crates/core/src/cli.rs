//! The `lymphomil` command line.
//!
//! Settings resolve as command-line flag (or `LYMPHOMIL_*` environment
//! variable) over JSON config file over built-in default. The config file
//! uses the flag names in snake_case. Every subcommand validates its inputs
//! before writing, writes only below `--out`, and records the effective
//! configuration with SHA-256 digests of its inputs in `run_manifest.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datamodel::{
    parse_patch_file_name, patch_file_name, read_embedding_file, read_label_mask, read_manifest,
    PatchRef, SubtypeLabel,
};
use crate::error::{Error, Result};
use crate::metrics::metrics_csv;
use crate::milnet::{forward, read_checkpoint, write_checkpoint, Activation, ClassifierMode, Mode};
use crate::morpho::{
    compare_groups, nuclei_csv, nucleus_features, patch_aggregate, GroupInput, PatchAggregate,
    Pooling,
};
use crate::raster::{read_ppm, write_ppm};
use crate::synth::{write_corpus, SynthConfig};
use crate::tiler::{decisions_csv, tile_image, TilingConfig};
use crate::trainer::{
    evaluate_scores, run_cross_validation, score_bags, CvConfig, ModelOptions, PreparedBag,
    SlideScore, SplitRatios, TrainConfig,
};
use crate::viz::{self, AttentionMap};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "lymphomil",
    version,
    about = "Gated-attention MIL for ABC/GCB lymphoma subtyping",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads for per-slide and per-fold parallel stages.
    #[arg(long, global = true, env = "LYMPHOMIL_JOBS", default_value_t = 1)]
    pub jobs: usize,

    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, env = "LYMPHOMIL_LOG", default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tile a slide image into patches and filter white and low-cellularity cells.
    Tile(TileArgs),
    /// Cross-validate the attention model on a slide manifest.
    Train(TrainArgs),
    /// Score a manifest with a trained checkpoint.
    Eval(EvalArgs),
    /// Render an attention heatmap and the top-attention patch list for one slide.
    Heatmap(HeatmapArgs),
    /// Extract nuclear morphometry and compare the subtypes.
    Morpho(MorphoArgs),
    /// Generate a synthetic corpus of bags, thumbnails and nucleus masks.
    Synth(SynthArgs),
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown activation `{s}` (expected relu or identity)"))
}

fn parse_classifier_mode(s: &str) -> std::result::Result<ClassifierMode, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown classifier mode `{s}` (expected per_class or shared)"))
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown pooling `{s}` (expected per_cell or per_slide)"))
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSettings {
    /// Patch edge length in pixels.
    #[arg(long, env = "LYMPHOMIL_PATCH_SIZE", default_value_t = 256)]
    pub patch_size: u32,
    /// Mean intensity above which a pixel counts as white.
    #[arg(long, env = "LYMPHOMIL_WHITE_MEAN_THRESHOLD", default_value_t = 220.0)]
    pub white_mean_threshold: f64,
    /// Fraction of white pixels above which a patch is rejected.
    #[arg(long, env = "LYMPHOMIL_WHITE_FRACTION_THRESHOLD", default_value_t = 0.9)]
    pub white_fraction_threshold: f64,
    /// Saturation above which a pixel counts as tissue.
    #[arg(long, env = "LYMPHOMIL_TISSUE_SATURATION_THRESHOLD", default_value_t = 0.05)]
    pub tissue_saturation_threshold: f64,
    /// Patches need strictly more nuclei than this.
    #[arg(long, env = "LYMPHOMIL_MIN_NUCLEI", default_value_t = 10)]
    pub min_nuclei: usize,
}

impl Default for TileSettings {
    fn default() -> Self {
        let t = TilingConfig::default();
        Self {
            patch_size: t.patch_size,
            white_mean_threshold: t.white_mean_threshold,
            white_fraction_threshold: t.white_fraction_threshold,
            tissue_saturation_threshold: t.tissue_saturation_threshold,
            min_nuclei: t.min_nuclei_exclusive,
        }
    }
}

impl TileSettings {
    pub fn tiling_config(&self) -> TilingConfig {
        TilingConfig {
            patch_size: self.patch_size,
            white_mean_threshold: self.white_mean_threshold,
            white_fraction_threshold: self.white_fraction_threshold,
            tissue_saturation_threshold: self.tissue_saturation_threshold,
            min_nuclei_exclusive: self.min_nuclei,
        }
    }
}

#[derive(Args, Debug)]
pub struct TileArgs {
    /// Slide image (binary PPM).
    #[arg(long, env = "LYMPHOMIL_INPUT")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Slide identifier [default: input file stem].
    #[arg(long, env = "LYMPHOMIL_SLIDE_ID")]
    pub slide_id: Option<String>,
    /// Directory of per-patch nucleus masks `<slide>_<x>_<y>.pgm`; patches
    /// without one are counted from the stain threshold.
    #[arg(long, env = "LYMPHOMIL_MASKS")]
    pub masks: Option<PathBuf>,
    /// Skip writing kept patch images.
    #[arg(long, env = "LYMPHOMIL_SKIP_IMAGES", default_value_t = false)]
    pub skip_images: bool,
    #[command(flatten)]
    pub settings: TileSettings,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Seed for folds, initialisation, shuffling and dropout.
    #[arg(long, env = "LYMPHOMIL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of cross-validation folds.
    #[arg(long, env = "LYMPHOMIL_FOLDS", default_value_t = 3)]
    pub folds: usize,
    #[arg(long, env = "LYMPHOMIL_LEARNING_RATE", default_value_t = 2e-4)]
    pub learning_rate: f64,
    #[arg(long, env = "LYMPHOMIL_WEIGHT_DECAY", default_value_t = 4e-5)]
    pub weight_decay: f64,
    #[arg(long, env = "LYMPHOMIL_BETA1", default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, env = "LYMPHOMIL_BETA2", default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, env = "LYMPHOMIL_EPSILON", default_value_t = 1e-8)]
    pub epsilon: f64,
    #[arg(long, env = "LYMPHOMIL_DROPOUT", default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, env = "LYMPHOMIL_MAX_EPOCHS", default_value_t = 200)]
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    #[arg(long, env = "LYMPHOMIL_PATIENCE", default_value_t = 20)]
    pub patience: usize,
    #[arg(long, env = "LYMPHOMIL_HIDDEN_WIDTH", default_value_t = 512)]
    pub hidden_width: usize,
    #[arg(long, env = "LYMPHOMIL_ATTENTION_WIDTH", default_value_t = 256)]
    pub attention_width: usize,
    /// relu or identity.
    #[arg(long, env = "LYMPHOMIL_COMPRESS_ACTIVATION", default_value = "relu", value_parser = parse_activation)]
    pub compress_activation: Activation,
    /// per_class or shared.
    #[arg(long, env = "LYMPHOMIL_CLASSIFIER_MODE", default_value = "per_class", value_parser = parse_classifier_mode)]
    pub classifier_mode: ClassifierMode,
    /// ABC-probability threshold for the confusion matrix.
    #[arg(long, env = "LYMPHOMIL_THRESHOLD", default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, env = "LYMPHOMIL_TRAIN_RATIO", default_value_t = 0.7)]
    pub train_ratio: f64,
    #[arg(long, env = "LYMPHOMIL_VAL_RATIO", default_value_t = 0.15)]
    pub val_ratio: f64,
    #[arg(long, env = "LYMPHOMIL_TEST_RATIO", default_value_t = 0.15)]
    pub test_ratio: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let cv = CvConfig::default();
        Self {
            seed: cv.train.seed,
            folds: cv.n_folds,
            learning_rate: cv.train.learning_rate,
            weight_decay: cv.train.weight_decay,
            beta1: cv.train.beta1,
            beta2: cv.train.beta2,
            epsilon: cv.train.epsilon,
            dropout: cv.train.dropout,
            max_epochs: cv.train.max_epochs,
            patience: cv.train.patience,
            hidden_width: cv.model.hidden_width,
            attention_width: cv.model.attention_width,
            compress_activation: cv.model.compress_activation,
            classifier_mode: cv.model.classifier_mode,
            threshold: cv.threshold,
            train_ratio: cv.ratios.train,
            val_ratio: cv.ratios.val,
            test_ratio: cv.ratios.test,
        }
    }
}

impl TrainSettings {
    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            train: TrainConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                dropout: self.dropout,
                max_epochs: self.max_epochs,
                patience: self.patience,
                seed: self.seed,
            },
            model: ModelOptions {
                hidden_width: self.hidden_width,
                attention_width: self.attention_width,
                compress_activation: self.compress_activation,
                classifier_mode: self.classifier_mode,
            },
            n_folds: self.folds,
            ratios: SplitRatios {
                train: self.train_ratio,
                val: self.val_ratio,
                test: self.test_ratio,
            },
            threshold: self.threshold,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Slide manifest CSV.
    #[arg(long, env = "LYMPHOMIL_MANIFEST")]
    pub manifest: PathBuf,
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: TrainSettings,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// ABC-probability threshold for the confusion matrix.
    #[arg(long, env = "LYMPHOMIL_THRESHOLD", default_value_t = 0.5)]
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: crate::metrics::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Slide manifest CSV.
    #[arg(long, env = "LYMPHOMIL_MANIFEST")]
    pub manifest: PathBuf,
    /// Model checkpoint (its JSON sidecar must sit next to it).
    #[arg(long, env = "LYMPHOMIL_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: EvalSettings,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSettings {
    /// Ratio of level-0 to thumbnail resolution.
    #[arg(long, env = "LYMPHOMIL_DOWNSCALE", default_value_t = 32)]
    pub downscale: u32,
    /// Number of top-attention patches to list.
    #[arg(long, env = "LYMPHOMIL_TOP_K", default_value_t = 10)]
    pub top_k: usize,
}

impl Default for HeatmapSettings {
    fn default() -> Self {
        Self {
            downscale: crate::synth::THUMBNAIL_DOWNSCALE,
            top_k: viz::DEFAULT_TOP_K,
        }
    }
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    /// Embedding bag of the slide.
    #[arg(long, env = "LYMPHOMIL_BAG")]
    pub bag: PathBuf,
    /// Model checkpoint.
    #[arg(long, env = "LYMPHOMIL_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Slide thumbnail (binary PPM).
    #[arg(long, env = "LYMPHOMIL_THUMBNAIL")]
    pub thumbnail: PathBuf,
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: HeatmapSettings,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphoSettings {
    /// per_cell or per_slide.
    #[arg(long, env = "LYMPHOMIL_POOLING", default_value = "per_cell", value_parser = parse_pooling)]
    pub pooling: Pooling,
}

impl Default for MorphoSettings {
    fn default() -> Self {
        Self {
            pooling: Pooling::PerCell,
        }
    }
}

#[derive(Args, Debug)]
pub struct MorphoArgs {
    /// Directory of patch images `<slide>_<x>_<y>.ppm`.
    #[arg(long, env = "LYMPHOMIL_PATCHES")]
    pub patches: PathBuf,
    /// Directory of nucleus masks `<slide>_<x>_<y>.pgm`.
    #[arg(long, env = "LYMPHOMIL_MASKS")]
    pub masks: PathBuf,
    /// CSV with `slide_id` and `label` columns (a manifest works).
    #[arg(long, env = "LYMPHOMIL_LABELS")]
    pub labels: PathBuf,
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: MorphoSettings,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    #[arg(long, env = "LYMPHOMIL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of slides, split evenly between the subtypes.
    #[arg(long, env = "LYMPHOMIL_SLIDES", default_value_t = 60)]
    pub slides: usize,
    /// Embedding width.
    #[arg(long, env = "LYMPHOMIL_DIM", default_value_t = 32)]
    pub dim: usize,
    /// Nominal patches per bag.
    #[arg(long, env = "LYMPHOMIL_PATCHES_PER_BAG", default_value_t = 32)]
    pub patches: usize,
    /// Planted signal strength; 0 gives a null corpus.
    #[arg(long, env = "LYMPHOMIL_SIGNAL", default_value_t = 4.0)]
    pub signal: f64,
    /// Share of GCB patches that carry the signal.
    #[arg(long, env = "LYMPHOMIL_SIGNAL_FRACTION", default_value_t = 0.3)]
    pub signal_fraction: f64,
    /// Number of embedding coordinates the signal spans.
    #[arg(long, env = "LYMPHOMIL_SIGNAL_RANK", default_value_t = 4)]
    pub signal_rank: usize,
    /// Patch images with nucleus masks per slide.
    #[arg(long, env = "LYMPHOMIL_MASK_PATCHES", default_value_t = 2)]
    pub mask_patches: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            seed: s.seed,
            slides: s.slides,
            dim: s.dim,
            patches: s.patches,
            signal: s.signal,
            signal_fraction: s.signal_fraction,
            signal_rank: s.signal_rank,
            mask_patches: s.mask_patches,
        }
    }
}

impl SynthSettings {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            slides: self.slides,
            dim: self.dim,
            patches: self.patches,
            signal: self.signal,
            signal_fraction: self.signal_fraction,
            signal_rank: self.signal_rank,
            mask_patches: self.mask_patches,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON config file.
    #[arg(long, env = "LYMPHOMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LYMPHOMIL_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: SynthSettings,
}

/// Overlays explicitly given flags on the config file (or the defaults).
fn resolve<T>(flags: &T, config: Option<&Path>, matches: &ArgMatches) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut base = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: T = serde_json::from_str(&text).map_err(|e| {
                Error::validation(format!("config {}: {e}", path.display()))
            })?;
            serde_json::to_value(parsed)?
        }
        None => serde_json::to_value(T::default())?,
    };
    let given = serde_json::to_value(flags)?;
    if let (Value::Object(base), Value::Object(given)) = (&mut base, given) {
        for (key, value) in given {
            let explicit = matches!(
                matches.value_source(&key),
                Some(ValueSource::CommandLine | ValueSource::EnvVariable)
            );
            if explicit {
                base.insert(key, value);
            }
        }
    }
    Ok(serde_json::from_value(base)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a T,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn write_run_manifest<T: Serialize>(
    out: &Path,
    command: &str,
    config: &T,
    inputs: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn scores_csv(scores: &[SlideScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide_id", "label", "score", "predicted"])?;
    for s in scores {
        w.write_record([
            s.slide_id.clone(),
            s.label.to_string(),
            s.score.to_string(),
            s.predicted.to_string(),
        ])?;
    }
    csv_string(w)
}

fn kept_patches_csv(slide_id: &str, patches: &[PatchRef]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide_id", "x", "y", "size"])?;
    for p in patches {
        w.write_record([
            slide_id.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.size.to_string(),
        ])?;
    }
    csv_string(w)
}

fn aggregates_csv(rows: &[PatchAggregate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "slide_id",
        "x",
        "y",
        "nucleus_count",
        "nc_ratio",
        "mean_area",
        "mean_perimeter",
        "mean_circularity",
        "mean_aspect_ratio",
        "mean_solidity",
        "mean_rb_ratio",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.slide_id.clone(),
            r.patch.x.to_string(),
            r.patch.y.to_string(),
            r.nucleus_count.to_string(),
            opt(r.nc_ratio),
            opt(r.mean_area),
            opt(r.mean_perimeter),
            opt(r.mean_circularity),
            opt(r.mean_aspect_ratio),
            opt(r.mean_solidity),
            opt(r.mean_rb_ratio),
        ])?;
    }
    csv_string(w)
}

pub fn cmd_tile(args: &TileArgs, settings: &TileSettings) -> Result<()> {
    let cfg = settings.tiling_config();
    cfg.validate()?;
    let image = read_ppm(&args.input)?;
    let slide_id = match &args.slide_id {
        Some(id) => id.clone(),
        None => args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::validation("cannot derive slide id from input path"))?,
    };
    let masks = args.masks.clone();
    let result = tile_image(&image, &cfg, |p| match &masks {
        Some(dir) => {
            let path = dir.join(patch_file_name(&slide_id, p, "pgm"));
            if path.is_file() {
                read_label_mask(&path).map(Some)
            } else {
                Ok(None)
            }
        }
        None => Ok(None),
    })?;
    let kept: Vec<PatchRef> = result.kept().copied().collect();
    log::info!(
        "{slide_id}: kept {} of {} grid cells",
        result.report.kept,
        result.report.total_grid
    );

    create_out(&args.out)?;
    write_text(&args.out.join("patches.csv"), &kept_patches_csv(&slide_id, &kept)?)?;
    write_text(&args.out.join("decisions.csv"), &decisions_csv(&slide_id, &result)?)?;
    write_json(&args.out.join("tile_report.json"), &result.report)?;
    if !args.skip_images {
        let dir = args.out.join("patches");
        create_out(&dir)?;
        kept.par_iter().try_for_each(|p| {
            let size = p.size as usize;
            let crop = image.crop(p.x as usize, p.y as usize, size, size)?;
            write_ppm(&crop, &dir.join(patch_file_name(&slide_id, p, "ppm")))
        })?;
    }
    write_run_manifest(&args.out, "tile", settings, std::slice::from_ref(&args.input))
}

pub fn cmd_train(args: &TrainArgs, settings: &TrainSettings) -> Result<()> {
    let cfg = settings.cv_config();
    cfg.train.validate()?;
    let manifest = read_manifest(&args.manifest)?;
    let counts = manifest.class_counts();
    if counts.contains(&0) {
        return Err(Error::validation(format!(
            "manifest needs both subtypes (ABC {}, GCB {})",
            counts[0], counts[1]
        )));
    }
    let bags = manifest.load_bags()?;
    let outcome = run_cross_validation(&bags, &cfg)?;

    create_out(&args.out)?;
    write_json(&args.out.join("cv_report.json"), &outcome.report)?;
    write_text(
        &args.out.join("metrics.csv"),
        &metrics_csv(
            outcome
                .folds
                .iter()
                .map(|f| (f.plan.fold_index.to_string(), &f.eval)),
        )?,
    )?;
    for fold in &outcome.folds {
        let dir = args.out.join(format!("fold_{}", fold.plan.fold_index));
        create_out(&dir)?;
        write_checkpoint(&fold.model, &dir.join("model.milp"))?;
        write_text(&dir.join("train_log.csv"), &fold.log.to_csv()?)?;
        write_text(&dir.join("test_scores.csv"), &scores_csv(&fold.test_scores)?)?;
        write_json(&dir.join("split.json"), &fold.plan)?;
    }
    let mut inputs = vec![args.manifest.clone()];
    inputs.extend(manifest.rows.iter().map(|r| manifest.resolve(&r.embedding_path)));
    write_run_manifest(&args.out, "train", settings, &inputs)
}

pub fn cmd_eval(args: &EvalArgs, settings: &EvalSettings) -> Result<()> {
    if !(0.0..=1.0).contains(&settings.threshold) {
        return Err(Error::validation("threshold must lie in [0, 1]"));
    }
    let manifest = read_manifest(&args.manifest)?;
    let model = read_checkpoint(&args.checkpoint)?;
    let bags = manifest
        .load_bags()?
        .iter()
        .map(PreparedBag::from_bag)
        .collect::<Result<Vec<_>>>()?;
    let scores = bags
        .par_iter()
        .map(|b| score_bags(&model, std::slice::from_ref(b)).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let eval = evaluate_scores(&scores, settings.threshold)?;

    create_out(&args.out)?;
    write_text(&args.out.join("scores.csv"), &scores_csv(&scores)?)?;
    write_text(
        &args.out.join("metrics.csv"),
        &metrics_csv([("all".to_string(), &eval)])?,
    )?;
    write_json(&args.out.join("eval_report.json"), &eval)?;
    let mut inputs = vec![args.manifest.clone(), args.checkpoint.clone()];
    inputs.extend(manifest.rows.iter().map(|r| manifest.resolve(&r.embedding_path)));
    write_run_manifest(&args.out, "eval", settings, &inputs)
}

pub fn cmd_heatmap(args: &HeatmapArgs, settings: &HeatmapSettings) -> Result<()> {
    if settings.top_k == 0 {
        return Err(Error::validation("top_k must be at least 1"));
    }
    let bag = read_embedding_file(&args.bag)?;
    let model = read_checkpoint(&args.checkpoint)?;
    let thumbnail = read_ppm(&args.thumbnail)?;
    let trace = forward(&bag, &model, Mode::Eval)?;
    let map = AttentionMap::from_trace(&bag.slide_id, &bag.patches, &trace)?;
    let heatmap = viz::render_heatmap(&map, &thumbnail, settings.downscale)?;

    create_out(&args.out)?;
    write_ppm(
        &heatmap,
        &args.out.join(viz::heatmap_file_name(&map.slide_id, map.predicted)),
    )?;
    write_text(
        &args.out.join(format!("{}_top_k.csv", map.slide_id)),
        &viz::top_k_csv(&map, settings.top_k)?,
    )?;
    write_text(
        &args.out.join(format!("{}_attention.csv", map.slide_id)),
        &viz::attention_csv(&map)?,
    )?;
    write_run_manifest(
        &args.out,
        "heatmap",
        settings,
        &[args.bag.clone(), args.checkpoint.clone(), args.thumbnail.clone()],
    )
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, SubtypeLabel>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("labels CSV lacks a `{name}` column")))
    };
    let (id_col, label_col) = (column("slide_id")?, column("label")?);
    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        labels.insert(record[id_col].to_string(), record[label_col].parse()?);
    }
    Ok(labels)
}

pub fn cmd_morpho(args: &MorphoArgs, settings: &MorphoSettings) -> Result<()> {
    let labels = read_labels(&args.labels)?;
    let entries = fs::read_dir(&args.masks).map_err(|e| Error::io(&args.masks, e))?;
    let mut masks = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&args.masks, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            masks.push(path);
        }
    }
    masks.sort();

    let mut jobs = Vec::new();
    for path in masks {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Some((slide, x, y)) = parse_patch_file_name(&name) else {
            log::warn!("skipping {name}: not named <slide>_<x>_<y>.pgm");
            continue;
        };
        let Some(&label) = labels.get(&slide) else {
            log::warn!("skipping {name}: slide {slide} has no label");
            continue;
        };
        let image = args.patches.join(format!("{}.ppm", name.trim_end_matches(".pgm")));
        jobs.push((slide, x, y, label, path, image));
    }
    if jobs.is_empty() {
        return Err(Error::validation("no labelled masks found"));
    }

    let per_patch = jobs
        .par_iter()
        .map(|(slide, x, y, label, mask_path, image_path)| {
            let mask = read_label_mask(mask_path)?;
            let rgb = read_ppm(image_path)?;
            let patch = PatchRef {
                x: *x,
                y: *y,
                size: mask.width() as u32,
            };
            let records = nucleus_features(&mask, &rgb, slide, patch)?;
            let mut agg = patch_aggregate(&mask, &records);
            agg.slide_id = slide.clone();
            agg.patch = patch;
            Ok((*label, records, agg))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups = [GroupInput::default(), GroupInput::default()];
    let mut all_nuclei = Vec::new();
    let mut all_patches = Vec::new();
    for (label, records, agg) in per_patch {
        let g = &mut groups[label.index()];
        g.nuclei.extend(records.iter().cloned());
        g.patches.push(agg.clone());
        all_nuclei.extend(records);
        all_patches.push(agg);
    }
    let stats = compare_groups(&groups[0], &groups[1], settings.pooling)?;

    create_out(&args.out)?;
    write_text(&args.out.join("nuclei.csv"), &nuclei_csv(&all_nuclei)?)?;
    write_text(&args.out.join("patch_aggregates.csv"), &aggregates_csv(&all_patches)?)?;
    write_json(&args.out.join("group_stats.json"), &stats)?;
    write_text(&args.out.join("boxplot.csv"), &viz::boxplot_csv(&stats)?)?;
    let mut inputs = vec![args.labels.clone()];
    for (.., mask, image) in &jobs {
        inputs.push(mask.clone());
        inputs.push(image.clone());
    }
    write_run_manifest(&args.out, "morpho", settings, &inputs)
}

pub fn cmd_synth(args: &SynthArgs, settings: &SynthSettings) -> Result<()> {
    let cfg = settings.synth_config();
    cfg.validate()?;
    let summary = write_corpus(&cfg, &args.out)?;
    log::info!(
        "wrote {} slides (ABC {}, GCB {})",
        summary.slides,
        summary.class_counts[0],
        summary.class_counts[1]
    );
    write_run_manifest(&args.out, "synth", settings, &[])
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let (_, sub) = matches
        .subcommand()
        .ok_or_else(|| Error::validation("missing subcommand"))?;
    match &cli.command {
        Command::Tile(a) => cmd_tile(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
        Command::Train(a) => cmd_train(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
        Command::Eval(a) => cmd_eval(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
        Command::Heatmap(a) => cmd_heatmap(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
        Command::Morpho(a) => cmd_morpho(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
        Command::Synth(a) => cmd_synth(a, &resolve(&a.settings, a.config.as_deref(), sub)?),
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli, &matches)) {
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

    fn sub_matches(argv: &[&str]) -> (Cli, ArgMatches) {
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        (Cli::from_arg_matches(&m).unwrap(), m)
    }

    #[test]
    fn flag_defaults_match_library_defaults() {
        let (cli, _) = sub_matches(&["lymphomil", "train", "--manifest", "m", "--out", "o"]);
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.settings, TrainSettings::default());
        let (cli, _) = sub_matches(&["lymphomil", "tile", "--input", "i", "--out", "o"]);
        let Command::Tile(a) = cli.command else { panic!() };
        assert_eq!(a.settings, TileSettings::default());
        let (cli, _) = sub_matches(&["lymphomil", "synth", "--out", "o"]);
        let Command::Synth(a) = cli.command else { panic!() };
        assert_eq!(a.settings, SynthSettings::default());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"patience": 5, "max_epochs": 50, "learning_rate": 0.01}"#).unwrap();
        let argv = [
            "lymphomil", "train", "--manifest", "m", "--out", "o", "--learning-rate", "0.5",
        ];
        let (cli, m) = sub_matches(&argv);
        let Command::Train(a) = &cli.command else { panic!() };
        let s = resolve(&a.settings, Some(&cfg), m.subcommand().unwrap().1).unwrap();
        assert_eq!(s.learning_rate, 0.5);
        assert_eq!(s.patience, 5);
        assert_eq!(s.max_epochs, 50);
        assert_eq!(s.weight_decay, 4e-5);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
        let (cli, m) = sub_matches(&["lymphomil", "train", "--manifest", "m", "--out", "o"]);
        let Command::Train(a) = &cli.command else { panic!() };
        let err = resolve(&a.settings, Some(&cfg), m.subcommand().unwrap().1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn digest_of_known_string() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
