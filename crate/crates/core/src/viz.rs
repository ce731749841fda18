//! Attention heatmaps over slide thumbnails, top-attention patch lists and
//! box-plot tables for the morphometry comparison.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{PatchRef, SubtypeLabel};
use crate::error::{Error, Result};
use crate::milnet::{ForwardTrace, NUM_CLASSES};
use crate::morpho::GroupStats;
use crate::raster::RgbImage;

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 10;

const LOW: [u8; 3] = [0, 0, 255];
const HIGH: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub patch: PatchRef,
    /// Branch scores before the softmax over patches.
    pub raw_score: [f64; NUM_CLASSES],
    /// Softmax attention weights.
    pub attention: [f64; NUM_CLASSES],
    /// Min–max normalised raw scores, per branch.
    pub normalized: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub slide_id: String,
    pub predicted: SubtypeLabel,
    pub entries: Vec<AttentionEntry>,
}

impl AttentionMap {
    pub fn from_trace(
        slide_id: impl Into<String>,
        patches: &[PatchRef],
        trace: &ForwardTrace,
    ) -> Result<Self> {
        if patches.len() != trace.num_patches() {
            return Err(Error::validation(format!(
                "{} patch coordinates for {} attention rows",
                patches.len(),
                trace.num_patches()
            )));
        }
        let norm: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|m| normalize_attention(trace.raw_scores.view(), m))
            .collect::<Result<_>>()?;
        let entries = patches
            .iter()
            .enumerate()
            .map(|(k, &patch)| AttentionEntry {
                patch,
                raw_score: [trace.raw_scores[[k, 0]], trace.raw_scores[[k, 1]]],
                attention: [trace.attention[[k, 0]], trace.attention[[k, 1]]],
                normalized: [norm[0][k], norm[1][k]],
            })
            .collect();
        Ok(Self {
            slide_id: slide_id.into(),
            predicted: trace.predicted(),
            entries,
        })
    }
}

/// Min–max scales one column to [0, 1]. A constant column maps to 0.5.
pub fn normalize_attention(scores: ArrayView2<f64>, branch: usize) -> Result<Vec<f64>> {
    if scores.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    if branch >= scores.ncols() {
        return Err(Error::validation(format!(
            "branch {branch} out of range for {} columns",
            scores.ncols()
        )));
    }
    let col = scores.column(branch);
    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let range = max - min;
    Ok(col
        .iter()
        .map(|&a| if range > 0.0 { (a - min) / range } else { 0.5 })
        .collect())
}

/// Linear blue-to-red colour for a score in [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (LOW[c] as f64 + t * (HIGH[c] as f64 - LOW[c] as f64)).round() as u8;
    }
    out
}

fn blend(base: [u8; 3], overlay: [u8; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((1.0 - OVERLAY_ALPHA) * base[c] as f64 + OVERLAY_ALPHA * overlay[c] as f64)
            .round() as u8;
    }
    out
}

/// Thumbnail-space rectangle `[x0, x1) × [y0, y1)` covered by a patch.
pub fn footprint(patch: &PatchRef, downscale: u32) -> (usize, usize, usize, usize) {
    let ds = downscale as u64;
    let x0 = patch.x as u64 / ds;
    let y0 = patch.y as u64 / ds;
    let x1 = ((patch.x as u64 + patch.size as u64) / ds).max(x0 + 1);
    let y1 = ((patch.y as u64 + patch.size as u64) / ds).max(y0 + 1);
    (x0 as usize, y0 as usize, x1 as usize, y1 as usize)
}

/// Overlays the predicted branch's normalised attention on a thumbnail.
/// Pixels outside every patch footprint are copied unchanged; where
/// footprints overlap the later entry wins.
pub fn render_heatmap(map: &AttentionMap, thumbnail: &RgbImage, downscale: u32) -> Result<RgbImage> {
    render_branch(map, map.predicted, thumbnail, downscale)
}

pub fn render_branch(
    map: &AttentionMap,
    branch: SubtypeLabel,
    thumbnail: &RgbImage,
    downscale: u32,
) -> Result<RgbImage> {
    if downscale == 0 {
        return Err(Error::validation("downscale must be positive"));
    }
    let mut out = thumbnail.clone();
    for e in &map.entries {
        let (x0, y0, x1, y1) = footprint(&e.patch, downscale);
        if x1 > thumbnail.width() || y1 > thumbnail.height() {
            return Err(Error::validation(format!(
                "patch ({}, {}) falls outside the {}x{} thumbnail at downscale {}",
                e.patch.x,
                e.patch.y,
                thumbnail.width(),
                thumbnail.height(),
                downscale
            )));
        }
        let color = colormap(e.normalized[branch.index()]);
        for y in y0..y1 {
            for x in x0..x1 {
                out.put(x, y, blend(thumbnail.get(x, y), color));
            }
        }
    }
    Ok(out)
}

/// The `k` highest-attention patches on the predicted branch, ties broken by
/// `(y, x)` ascending.
pub fn top_k_patches(map: &AttentionMap, k: usize) -> Result<Vec<PatchRef>> {
    Ok(top_k_entries(map, k)?.into_iter().map(|e| e.patch).collect())
}

fn top_k_entries(map: &AttentionMap, k: usize) -> Result<Vec<&AttentionEntry>> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let b = map.predicted.index();
    let mut ranked: Vec<&AttentionEntry> = map.entries.iter().collect();
    ranked.sort_by(|p, q| {
        q.normalized[b]
            .total_cmp(&p.normalized[b])
            .then((p.patch.y, p.patch.x).cmp(&(q.patch.y, q.patch.x)))
    });
    ranked.truncate(k);
    Ok(ranked)
}

pub fn top_k_csv(map: &AttentionMap, k: usize) -> Result<String> {
    let b = map.predicted.index();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "slide_id", "x", "y", "size", "branch", "normalized", "raw_score", "attention"])?;
    for (rank, e) in top_k_entries(map, k)?.into_iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            map.slide_id.clone(),
            e.patch.x.to_string(),
            e.patch.y.to_string(),
            e.patch.size.to_string(),
            map.predicted.as_str().to_string(),
            e.normalized[b].to_string(),
            e.raw_score[b].to_string(),
            e.attention[b].to_string(),
        ])?;
    }
    into_string(w)
}

/// Every patch with raw, softmax and normalised scores on both branches.
pub fn attention_csv(map: &AttentionMap) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "slide_id", "x", "y", "size", "raw_abc", "raw_gcb", "attention_abc", "attention_gcb",
        "normalized_abc", "normalized_gcb",
    ])?;
    for e in &map.entries {
        w.write_record([
            map.slide_id.clone(),
            e.patch.x.to_string(),
            e.patch.y.to_string(),
            e.patch.size.to_string(),
            e.raw_score[0].to_string(),
            e.raw_score[1].to_string(),
            e.attention[0].to_string(),
            e.attention[1].to_string(),
            e.normalized[0].to_string(),
            e.normalized[1].to_string(),
        ])?;
    }
    into_string(w)
}

pub fn heatmap_file_name(slide_id: &str, class: SubtypeLabel) -> String {
    format!("{slide_id}_heatmap_{}.ppm", class.as_str())
}

/// One row per feature and subtype with the box-plot statistics.
pub fn boxplot_csv(stats: &GroupStats) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "feature", "class", "n", "excluded", "mean", "std", "q1", "median", "q3",
        "whisker_low", "whisker_high", "n_outliers",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for (name, cmp) in &stats.features {
        for (class, s) in [(SubtypeLabel::Abc, &cmp.abc), (SubtypeLabel::Gcb, &cmp.gcb)] {
            let bp = s.box_plot.as_ref();
            w.write_record([
                name.clone(),
                class.as_str().to_string(),
                s.n.to_string(),
                s.excluded.to_string(),
                opt(s.mean),
                opt(s.std),
                opt(bp.map(|b| b.q1)),
                opt(bp.map(|b| b.median)),
                opt(bp.map(|b| b.q3)),
                opt(bp.map(|b| b.whisker_low)),
                opt(bp.map(|b| b.whisker_high)),
                bp.map(|b| b.outliers.len().to_string()).unwrap_or_default(),
            ])?;
        }
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
