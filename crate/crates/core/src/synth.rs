//! Desk-scale synthetic corpus: labelled bags with a planted signal in GCB
//! slides, slide thumbnails, and patch images with rasterised-ellipse
//! nucleus masks.
//!
//! Output is a pure function of the configuration, so a fixed seed yields a
//! byte-identical directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    patch_file_name, write_embedding_file, write_label_mask, LabelMask, Manifest, ManifestRow,
    PatchRef, SlideBag, SubtypeLabel, DEFAULT_PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::raster::{write_ppm, RgbImage};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const THUMBNAIL_DOWNSCALE: u32 = 32;

const BACKGROUND: [f64; 3] = [232.0, 188.0, 206.0];
const NUCLEUS: [f64; 3] = [92.0, 58.0, 150.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub slides: usize,
    pub dim: usize,
    /// Nominal patches per bag; each bag draws uniformly within ±25%.
    pub patches: usize,
    /// Norm of the vector added to signal-carrying GCB patches.
    pub signal: f64,
    /// Probability that a GCB patch carries the signal.
    pub signal_fraction: f64,
    /// Coordinates spanned by the signal direction.
    pub signal_rank: usize,
    /// Patch images with nucleus masks written per slide.
    pub mask_patches: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            slides: 60,
            dim: 32,
            patches: 32,
            signal: 4.0,
            signal_fraction: 0.3,
            signal_rank: 4,
            mask_patches: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slides < 2 {
            return Err(Error::validation("need at least 2 slides"));
        }
        if self.dim == 0 || self.patches == 0 {
            return Err(Error::validation("dim and patches must be positive"));
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return Err(Error::validation("signal must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return Err(Error::validation("signal_fraction must lie in [0, 1]"));
        }
        if self.signal_rank == 0 || self.signal_rank > self.dim {
            return Err(Error::validation("signal_rank must lie in [1, dim]"));
        }
        Ok(())
    }

    fn bag_size_range(&self) -> (usize, usize) {
        let spread = self.patches / 4;
        ((self.patches - spread).max(1), self.patches + spread)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub slides: usize,
    pub class_counts: [usize; 2],
    pub signal_direction: Vec<f64>,
}

/// Labels with `slides - slides/2` ABC and `slides/2` GCB, in random order.
fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<SubtypeLabel> {
    let mut labels: Vec<SubtypeLabel> = (0..n)
        .map(|i| if i < n - n / 2 { SubtypeLabel::Abc } else { SubtypeLabel::Gcb })
        .collect();
    labels.shuffle(rng);
    labels
}

/// Unit vector supported on `rank` randomly chosen coordinates.
pub fn signal_direction(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut u = Array1::<f64>::zeros(dim);
    for j in index::sample(rng, dim, rank).into_vec() {
        u[j] = rng.sample(StandardNormal);
    }
    let norm = u.dot(&u).sqrt();
    if norm > 0.0 {
        u / norm
    } else {
        let mut e = Array1::zeros(dim);
        e[0] = 1.0;
        e
    }
}

fn grid_side(max_patches: usize) -> usize {
    ((max_patches as f64).sqrt().ceil() as usize).max(1) + 1
}

/// Embeddings are standard normal; in GCB bags each patch independently
/// carries `signal · u` with probability `signal_fraction`.
pub fn synth_bag(
    slide_id: &str,
    label: SubtypeLabel,
    direction: &Array1<f64>,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SlideBag> {
    let (lo, hi) = cfg.bag_size_range();
    let n = rng.random_range(lo..=hi);
    let side = grid_side(hi);
    let mut cells = index::sample(rng, side * side, n).into_vec();
    cells.sort_unstable();
    let patches: Vec<PatchRef> = cells
        .iter()
        .map(|&c| {
            PatchRef::new(
                (c % side) as u32 * DEFAULT_PATCH_SIZE,
                (c / side) as u32 * DEFAULT_PATCH_SIZE,
            )
        })
        .collect();
    let mut emb = Array2::<f32>::zeros((n, cfg.dim));
    for mut row in emb.rows_mut() {
        let planted = label == SubtypeLabel::Gcb && rng.random::<f64>() < cfg.signal_fraction;
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let shift = if planted { cfg.signal * direction[j] } else { 0.0 };
            *v = (noise + shift) as f32;
        }
    }
    SlideBag::new(slide_id, Some(label), patches, emb)
}

fn jitter(base: [f64; 3], rng: &mut ChaCha8Rng, amp: f64) -> [u8; 3] {
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (base[c] + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8;
    }
    px
}

/// A patch image and its instance mask. Nuclei are random ellipses; one that
/// would overlap an earlier nucleus is dropped. ABC nuclei are drawn about
/// 15% larger.
pub fn synth_nuclei(
    size: usize,
    label: SubtypeLabel,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, LabelMask)> {
    let scale = match label {
        SubtypeLabel::Abc => 1.15,
        SubtypeLabel::Gcb => 1.0,
    };
    let mut labels = Array2::<u32>::zeros((size, size));
    let count = rng.random_range(12..=30u32);
    let mut next_id = 1;
    for _ in 0..count {
        let a: f64 = rng.random_range(5.0..10.0) * scale;
        let b = a * rng.random_range(0.55..1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let cx = rng.random_range(12.0..size as f64 - 12.0);
        let cy = rng.random_range(12.0..size as f64 - 12.0);
        let (s, c) = theta.sin_cos();
        let reach = a.ceil() as i64 + 1;
        let mut pixels = Vec::new();
        for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(size as i64) {
            for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(size as i64) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    pixels.push([y as usize, x as usize]);
                }
            }
        }
        if pixels.is_empty() || pixels.iter().any(|&p| labels[p] != 0) {
            continue;
        }
        for p in pixels {
            labels[p] = next_id;
        }
        next_id += 1;
    }
    let mut image = RgbImage::new(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let base = if labels[[y, x]] > 0 { NUCLEUS } else { BACKGROUND };
            image.put(x, y, jitter(base, rng, 12.0));
        }
    }
    Ok((image, LabelMask::new(labels)?))
}

/// Tissue-coloured thumbnail covering the bag's patch grid.
fn synth_thumbnail(bag: &SlideBag, side: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let px = side * (DEFAULT_PATCH_SIZE / THUMBNAIL_DOWNSCALE) as usize;
    let mut img = RgbImage::new(px, px, [0, 0, 0]);
    for y in 0..px {
        for x in 0..px {
            img.put(x, y, jitter(BACKGROUND, rng, 6.0));
        }
    }
    debug_assert!(bag.patches.iter().all(|p| {
        ((p.x + p.size) / THUMBNAIL_DOWNSCALE) as usize <= px
    }));
    img
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.csv`, `bags/`, `thumbnails/`, `patches/` and `masks/`
/// under `out`.
pub fn write_corpus(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    for sub in ["bags", "thumbnails", "patches", "masks"] {
        create_dir(&out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = balanced_labels(cfg.slides, &mut rng);
    let direction = signal_direction(cfg.dim, cfg.signal_rank, &mut rng);
    let width = cfg.slides.to_string().len().max(3);
    let side = grid_side(cfg.bag_size_range().1);

    let mut rows = Vec::with_capacity(cfg.slides);
    for (i, &label) in labels.iter().enumerate() {
        let slide_id = format!("S{:0width$}", i + 1);
        let mut slide_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        slide_rng.set_stream(i as u64 + 1);

        let bag = synth_bag(&slide_id, label, &direction, cfg, &mut slide_rng)?;
        let bag_rel = PathBuf::from("bags").join(format!("{slide_id}.bag"));
        write_embedding_file(&bag, &out.join(&bag_rel))?;

        let thumb_rel = PathBuf::from("thumbnails").join(format!("{slide_id}.ppm"));
        write_ppm(&synth_thumbnail(&bag, side, &mut slide_rng), &out.join(&thumb_rel))?;

        for patch in bag.patches.iter().take(cfg.mask_patches) {
            let (image, mask) =
                synth_nuclei(DEFAULT_PATCH_SIZE as usize, label, &mut slide_rng)?;
            write_ppm(&image, &out.join("patches").join(patch_file_name(&slide_id, patch, "ppm")))?;
            write_label_mask(&mask, &out.join("masks").join(patch_file_name(&slide_id, patch, "pgm")))?;
        }

        rows.push(ManifestRow {
            slide_id,
            label,
            embedding_path: bag_rel,
            mask_dir: Some(PathBuf::from("masks")),
            thumbnail_path: Some(thumb_rel),
        });
    }
    let manifest = Manifest {
        base_dir: out.to_path_buf(),
        rows,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_csv()?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(SynthSummary {
        manifest: manifest_path,
        slides: cfg.slides,
        class_counts: manifest.class_counts(),
        signal_direction: direction.to_vec(),
    })
}
