//! Slide tiling: tissue detection, a non-overlapping patch grid, white-patch
//! rejection and the low-cellularity filter.
//!
//! Each grid cell is classified in a fixed order: white first, then tissue
//! coverage, then nucleus count. A cell is kept only if it clears all three.

use std::collections::VecDeque;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelMask, PatchRef};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Minimum fraction of tissue pixels for a grid cell to count as tissue.
pub const MIN_TISSUE_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub patch_size: u32,
    pub white_mean_threshold: f64,
    pub white_fraction_threshold: f64,
    pub tissue_saturation_threshold: f64,
    pub min_nuclei_exclusive: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            patch_size: 256,
            white_mean_threshold: 220.0,
            white_fraction_threshold: 0.9,
            tissue_saturation_threshold: 0.05,
            min_nuclei_exclusive: 10,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::validation("patch_size must be positive"));
        }
        if !(0.0..=255.0).contains(&self.white_mean_threshold) {
            return Err(Error::validation("white_mean_threshold must lie in [0, 255]"));
        }
        if !(0.0..=1.0).contains(&self.white_fraction_threshold) {
            return Err(Error::validation("white_fraction_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tissue_saturation_threshold) {
            return Err(Error::validation(
                "tissue_saturation_threshold must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileOutcome {
    Kept,
    White,
    Background,
    LowCellularity,
}

impl TileOutcome {
    pub fn reason(self) -> &'static str {
        match self {
            TileOutcome::Kept => "kept",
            TileOutcome::White => "white",
            TileOutcome::Background => "background",
            TileOutcome::LowCellularity => "low_cellularity",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileReport {
    pub total_grid: usize,
    pub kept: usize,
    pub rejected_white: usize,
    pub rejected_low_cellularity: usize,
    pub rejected_background: usize,
}

impl TileReport {
    fn record(&mut self, outcome: TileOutcome) {
        self.total_grid += 1;
        match outcome {
            TileOutcome::Kept => self.kept += 1,
            TileOutcome::White => self.rejected_white += 1,
            TileOutcome::Background => self.rejected_background += 1,
            TileOutcome::LowCellularity => self.rejected_low_cellularity += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileDecision {
    pub patch: PatchRef,
    pub outcome: TileOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilingResult {
    pub report: TileReport,
    pub decisions: Vec<TileDecision>,
}

impl TilingResult {
    pub fn kept(&self) -> impl Iterator<Item = &PatchRef> {
        self.decisions
            .iter()
            .filter(|d| d.outcome == TileOutcome::Kept)
            .map(|d| &d.patch)
    }
}

/// HSV saturation of one pixel, in [0, 1].
#[inline]
pub fn saturation(px: [u8; 3]) -> f64 {
    let max = px.iter().copied().max().unwrap() as f64;
    let min = px.iter().copied().min().unwrap() as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Tissue mask (rows × cols): true where saturation reaches the threshold.
pub fn detect_tissue(image: &RgbImage, cfg: &TilingConfig) -> Result<Array2<bool>> {
    if image.is_empty() {
        return Err(Error::validation("empty image"));
    }
    let threshold = cfg.tissue_saturation_threshold;
    Ok(Array2::from_shape_fn((image.height(), image.width()), |(y, x)| {
        saturation(image.get(x, y)) >= threshold
    }))
}

fn tissue_fraction(tissue: &Array2<bool>, x: usize, y: usize, size: usize) -> f64 {
    let window = tissue.slice(ndarray::s![y..y + size, x..x + size]);
    window.iter().filter(|&&t| t).count() as f64 / (size * size) as f64
}

/// Grid cells (stride = patch size) in row-major order; any remainder
/// narrower than one patch is dropped.
pub fn grid_cells(extent: (usize, usize), patch_size: u32) -> Vec<PatchRef> {
    let size = patch_size as usize;
    let (w, h) = extent;
    let mut cells = Vec::with_capacity((w / size) * (h / size));
    for gy in 0..h / size {
        for gx in 0..w / size {
            cells.push(PatchRef {
                x: (gx * size) as u32,
                y: (gy * size) as u32,
                size: patch_size,
            });
        }
    }
    cells
}

/// Grid patches whose tissue coverage is at least 50%.
pub fn grid_patches(
    extent: (usize, usize),
    tissue: &Array2<bool>,
    cfg: &TilingConfig,
) -> Result<Vec<PatchRef>> {
    if tissue.dim() != (extent.1, extent.0) {
        return Err(Error::validation("tissue mask does not match image extent"));
    }
    let size = cfg.patch_size as usize;
    Ok(grid_cells(extent, cfg.patch_size)
        .into_iter()
        .filter(|p| tissue_fraction(tissue, p.x as usize, p.y as usize, size) >= MIN_TISSUE_COVERAGE)
        .collect())
}

pub fn is_white_patch(patch: &RgbImage, cfg: &TilingConfig) -> bool {
    let total = patch.width() * patch.height();
    if total == 0 {
        return true;
    }
    let white = patch
        .pixels()
        .filter(|px| {
            let mean = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
            mean >= cfg.white_mean_threshold
        })
        .count();
    white as f64 / total as f64 > cfg.white_fraction_threshold
}

pub fn passes_cellularity(mask: &LabelMask, cfg: &TilingConfig) -> bool {
    mask.nucleus_count() > cfg.min_nuclei_exclusive
}

/// Hematoxylin-like pixel: blue-dominant and darker than mean 180.
#[inline]
pub fn is_hematoxylin(px: [u8; 3]) -> bool {
    let [r, g, b] = px;
    let mean = (r as f64 + g as f64 + b as f64) / 3.0;
    b > r && b > g && mean < 180.0
}

/// 8-connected component labelling; returns labels (0 = background,
/// 1..=count in raster-scan discovery order) and the component count.
pub fn label_components(binary: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = binary.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !binary[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let ny = cy as isize + dy;
                        let nx = cx as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if binary[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Nucleus mask estimated from stain colour when no segmentation is given.
pub fn stain_nucleus_mask(patch: &RgbImage) -> LabelMask {
    let binary = Array2::from_shape_fn((patch.height(), patch.width()), |(y, x)| {
        is_hematoxylin(patch.get(x, y))
    });
    let (labels, _) = label_components(&binary);
    LabelMask { labels }
}

/// Classifies every grid cell of `image`. `mask_for` supplies an ingested
/// nucleus mask for a patch when one exists; otherwise nuclei are counted
/// from the stain threshold.
pub fn tile_image<F>(image: &RgbImage, cfg: &TilingConfig, mask_for: F) -> Result<TilingResult>
where
    F: Fn(&PatchRef) -> Result<Option<LabelMask>> + Sync,
{
    cfg.validate()?;
    let tissue = detect_tissue(image, cfg)?;
    let size = cfg.patch_size as usize;
    let cells = grid_cells((image.width(), image.height()), cfg.patch_size);
    let outcomes = cells
        .par_iter()
        .map(|p| -> Result<TileOutcome> {
            let (x, y) = (p.x as usize, p.y as usize);
            let pixels = image.crop(x, y, size, size)?;
            if is_white_patch(&pixels, cfg) {
                return Ok(TileOutcome::White);
            }
            if tissue_fraction(&tissue, x, y, size) < MIN_TISSUE_COVERAGE {
                return Ok(TileOutcome::Background);
            }
            let mask = match mask_for(p)? {
                Some(m) => {
                    if m.width() != size || m.height() != size {
                        return Err(Error::validation(format!(
                            "mask for patch ({x}, {y}) is {}x{}, expected {size}x{size}",
                            m.width(),
                            m.height()
                        )));
                    }
                    m
                }
                None => stain_nucleus_mask(&pixels),
            };
            Ok(if passes_cellularity(&mask, cfg) {
                TileOutcome::Kept
            } else {
                TileOutcome::LowCellularity
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = TileReport::default();
    let decisions = cells
        .into_iter()
        .zip(outcomes)
        .map(|(patch, outcome)| {
            report.record(outcome);
            TileDecision { patch, outcome }
        })
        .collect();
    Ok(TilingResult { report, decisions })
}

/// Patch coordinate CSV: `slide_id,x,y,kept,reason`.
pub fn decisions_csv(slide_id: &str, result: &TilingResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide_id", "x", "y", "kept", "reason"])?;
    for d in &result.decisions {
        w.write_record([
            slide_id.to_string(),
            d.patch.x.to_string(),
            d.patch.y.to_string(),
            (d.outcome == TileOutcome::Kept).to_string(),
            d.outcome.reason().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
