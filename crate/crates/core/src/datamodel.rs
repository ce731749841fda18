//! Corpus data model: subtype labels, patch coordinates, embedding bags,
//! slide manifests and nucleus label masks, with their on-disk formats.
//!
//! Embedding bags use a little-endian binary layout:
//!
//! ```text
//! "MILE"  u32 version (=1)  u32 N  u32 D
//! N × (u32 x, u32 y)
//! N·D × f32, row-major
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

pub const BAG_MAGIC: &[u8; 4] = b"MILE";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 16;
pub const DEFAULT_PATCH_SIZE: u32 = 256;

/// Cell-of-origin subtype. Integer codes are stable: ABC = 0, GCB = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubtypeLabel {
    #[serde(rename = "ABC")]
    Abc = 0,
    #[serde(rename = "GCB")]
    Gcb = 1,
}

impl SubtypeLabel {
    pub const ALL: [SubtypeLabel; 2] = [SubtypeLabel::Abc, SubtypeLabel::Gcb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(SubtypeLabel::Abc),
            1 => Some(SubtypeLabel::Gcb),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubtypeLabel::Abc => "ABC",
            SubtypeLabel::Gcb => "GCB",
        }
    }
}

impl fmt::Display for SubtypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubtypeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ABC" => Ok(SubtypeLabel::Abc),
            "GCB" => Ok(SubtypeLabel::Gcb),
            other => Err(Error::validation(format!("unknown subtype label {other:?}"))),
        }
    }
}

/// Level-0 top-left corner of a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

impl PatchRef {
    pub fn new(x: u32, y: u32) -> Self {
        Self {
            x,
            y,
            size: DEFAULT_PATCH_SIZE,
        }
    }
}

/// One slide as a bag of patch embeddings. Row `k` of `embeddings` belongs
/// to `patches[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub label: Option<SubtypeLabel>,
    pub patches: Vec<PatchRef>,
    pub embeddings: Array2<f32>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        label: Option<SubtypeLabel>,
        patches: Vec<PatchRef>,
        embeddings: Array2<f32>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            label,
            patches,
            embeddings,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::EmptyBag);
        }
        if self.embeddings.nrows() != self.patches.len() {
            return Err(Error::validation(format!(
                "bag {}: {} patches but {} embedding rows",
                self.slide_id,
                self.patches.len(),
                self.embeddings.nrows()
            )));
        }
        if self.embeddings.ncols() == 0 {
            return Err(Error::validation(format!(
                "bag {}: zero embedding width",
                self.slide_id
            )));
        }
        if let Some(((r, c), v)) = self
            .embeddings
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::validation(format!(
                "bag {}: non-finite embedding {v} at ({r}, {c})",
                self.slide_id
            )));
        }
        Ok(())
    }

    /// Serializes to the `.bag` layout. Identical bags give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (n, d) = self.embeddings.dim();
        let n32 = u32::try_from(n).map_err(|_| Error::validation("too many patches"))?;
        let d32 = u32::try_from(d).map_err(|_| Error::validation("embedding too wide"))?;
        let mut out = Vec::with_capacity(BAG_HEADER_LEN + n * 8 + n * d * 4);
        out.extend_from_slice(BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.extend_from_slice(&n32.to_le_bytes());
        out.extend_from_slice(&d32.to_le_bytes());
        for p in &self.patches {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
        }
        for v in self.embeddings.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses the `.bag` layout. The file carries neither label nor patch
    /// size, so `label` is `None` and every patch gets `patch_size`.
    pub fn from_bytes(slide_id: impl Into<String>, bytes: &[u8], patch_size: u32) -> Result<Self> {
        if bytes.len() < BAG_HEADER_LEN || &bytes[..4] != BAG_MAGIC {
            return Err(Error::Format("missing MILE magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != BAG_VERSION {
            return Err(Error::Format(format!("unsupported bag version {version}")));
        }
        let n = word(8) as usize;
        let d = word(12) as usize;
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        if d == 0 {
            return Err(Error::Format("zero embedding width".into()));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|x| x.checked_add(BAG_HEADER_LEN + n * 8))
            .ok_or_else(|| Error::Corrupt("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "header declares N={n}, D={d} ({expected} bytes) but file has {} bytes",
                bytes.len()
            )));
        }
        let patches = (0..n)
            .map(|k| {
                let at = BAG_HEADER_LEN + k * 8;
                PatchRef {
                    x: word(at),
                    y: word(at + 4),
                    size: patch_size,
                }
            })
            .collect();
        let base = BAG_HEADER_LEN + n * 8;
        let values = bytes[base..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        let embeddings = Array2::from_shape_vec((n, d), values)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        SlideBag::new(slide_id, None, patches, embeddings)
    }
}

pub fn read_embedding_file(path: &Path) -> Result<SlideBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SlideBag::from_bytes(id, &bytes, DEFAULT_PATCH_SIZE)
}

pub fn write_embedding_file(bag: &SlideBag, path: &Path) -> Result<()> {
    let bytes = bag.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub label: SubtypeLabel,
    pub embedding_path: PathBuf,
    pub mask_dir: Option<PathBuf>,
    pub thumbnail_path: Option<PathBuf>,
}

/// Slide manifest. Relative paths resolve against `base_dir`, the
/// directory holding the CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: [&str; 5] = [
    "slide_id",
    "label",
    "embedding_path",
    "mask_dir",
    "thumbnail_path",
];

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let header: Vec<&str> = headers.iter().collect();
        if header != MANIFEST_HEADER {
            return Err(Error::validation(format!(
                "manifest header must be {}, found {}",
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let optional_path = |s: &str| (!s.is_empty()).then(|| PathBuf::from(s));
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let slide_id = record[0].to_string();
            if slide_id.is_empty() {
                return Err(Error::validation("empty slide_id in manifest"));
            }
            if !seen.insert(slide_id.clone()) {
                return Err(Error::validation(format!("duplicate slide_id {slide_id}")));
            }
            rows.push(ManifestRow {
                label: record[1].parse()?,
                embedding_path: PathBuf::from(&record[2]),
                mask_dir: optional_path(&record[3]),
                thumbnail_path: optional_path(&record[4]),
                slide_id,
            });
        }
        Ok(Manifest {
            base_dir: base_dir.into(),
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        let show = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        for r in &self.rows {
            w.write_record([
                r.slide_id.clone(),
                r.label.to_string(),
                r.embedding_path.to_string_lossy().into_owned(),
                show(&r.mask_dir),
                show(&r.thumbnail_path),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Row counts per class, indexed by `SubtypeLabel::index`.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for r in &self.rows {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn row(&self, slide_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.slide_id == slide_id)
    }

    /// Loads every referenced bag, attaching the manifest's id and label.
    pub fn load_bags(&self) -> Result<Vec<SlideBag>> {
        self.rows
            .iter()
            .map(|r| {
                let mut bag = read_embedding_file(&self.resolve(&r.embedding_path))?;
                bag.slide_id = r.slide_id.clone();
                bag.label = Some(r.label);
                Ok(bag)
            })
            .collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, base)
}

/// Nucleus instance mask: 0 is background, k ≥ 1 is nucleus instance k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Array2<u32>,
}

impl LabelMask {
    pub fn new(labels: Array2<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("label mask has zero area"));
        }
        Ok(Self { labels })
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    /// Distinct nucleus IDs in ascending order.
    pub fn nucleus_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn nucleus_count(&self) -> usize {
        self.nucleus_ids().len()
    }

    pub fn to_pgm_bytes(&self) -> Result<Vec<u8>> {
        let samples: Vec<u32> = self.labels.iter().copied().collect();
        raster::encode_pgm(self.width(), self.height(), &samples)
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let g = raster::decode_pgm(bytes)?;
        let labels = Array2::from_shape_vec((g.height, g.width), g.samples)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        LabelMask::new(labels)
    }
}

pub fn read_label_mask(path: &Path) -> Result<LabelMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelMask::from_pgm_bytes(&bytes)
}

pub fn write_label_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    fs::write(path, mask.to_pgm_bytes()?).map_err(|e| Error::io(path, e))
}

/// File name of the per-patch mask or image: `<slide_id>_<x>_<y>.<ext>`.
pub fn patch_file_name(slide_id: &str, patch: &PatchRef, ext: &str) -> String {
    format!("{slide_id}_{}_{}.{ext}", patch.x, patch.y)
}

/// Inverse of [`patch_file_name`]; slide IDs may themselves contain `_`.
pub fn parse_patch_file_name(name: &str) -> Option<(String, u32, u32)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let (rest, y) = stem.rsplit_once('_')?;
    let (slide, x) = rest.rsplit_once('_')?;
    Some((slide.to_string(), x.parse().ok()?, y.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bag(n: usize, d: usize) -> SlideBag {
        let patches = (0..n as u32).map(|k| PatchRef::new(k * 256, 0)).collect();
        let emb = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f32 * 0.5);
        SlideBag::new("S", None, patches, emb).unwrap()
    }

    #[test]
    fn single_record_round_trip() {
        let b = SlideBag::new(
            "one",
            None,
            vec![PatchRef::new(0, 0)],
            array![[1.0f32, 2.0, 3.0, 4.0]],
        )
        .unwrap();
        let back = SlideBag::from_bytes("one", &b.to_bytes().unwrap(), 256).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.embeddings.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn file_size_matches_layout() {
        // 16-byte header + 3 coordinate pairs + 3·2 floats
        assert_eq!(bag(3, 2).to_bytes().unwrap().len(), 16 + 3 * 8 + 3 * 2 * 4);
        assert_eq!(bag(3, 2).to_bytes().unwrap().len(), 64);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let full = bag(5, 3).to_bytes().unwrap();
        // drop the final record's floats: header still claims N=5
        let cut = &full[..full.len() - 3 * 4];
        assert!(matches!(
            SlideBag::from_bytes("S", cut, 256),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = bag(1, 1).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(SlideBag::from_bytes("S", &bytes, 256), Err(Error::Format(_))));
        let mut bytes = bag(1, 1).to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(SlideBag::from_bytes("S", &bytes, 256), Err(Error::Format(_))));
    }

    #[test]
    fn empty_bag_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BAG_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        assert!(matches!(SlideBag::from_bytes("S", &bytes, 256), Err(Error::EmptyBag)));
    }

    #[test]
    fn nan_rejected_on_write() {
        let mut b = bag(2, 2);
        b.embeddings[[1, 0]] = f32::NAN;
        assert!(matches!(b.to_bytes(), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_minimal_row() {
        let m = Manifest::parse(
            "slide_id,label,embedding_path,mask_dir,thumbnail_path\nS1,ABC,s1.bag,,\n",
            "",
        )
        .unwrap();
        assert_eq!(m.rows.len(), 1);
        assert_eq!(m.rows[0].label, SubtypeLabel::Abc);
        assert_eq!(m.rows[0].mask_dir, None);
    }

    #[test]
    fn manifest_crlf_and_case() {
        let m = Manifest::parse(
            "slide_id,label,embedding_path,mask_dir,thumbnail_path\r\nS1,abc,a.bag,,\r\nS2,Gcb,b.bag,m,t.ppm\r\n",
            "",
        )
        .unwrap();
        assert_eq!(m.class_counts(), [1, 1]);
        assert_eq!(m.rows[1].mask_dir, Some(PathBuf::from("m")));
    }

    #[test]
    fn manifest_duplicate_and_unknown_label() {
        let dup = "slide_id,label,embedding_path,mask_dir,thumbnail_path\nS1,ABC,a,,\nS1,GCB,b,,\n";
        assert!(matches!(Manifest::parse(dup, ""), Err(Error::Validation(_))));
        let bad = "slide_id,label,embedding_path,mask_dir,thumbnail_path\nS1,XYZ,a,,\n";
        assert!(matches!(Manifest::parse(bad, ""), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_class_counts_115() {
        let mut text = MANIFEST_HEADER.join(",") + "\n";
        for i in 0..115 {
            let label = if i < 62 { "ABC" } else { "GCB" };
            text.push_str(&format!("S{i},{label},s{i}.bag,,\n"));
        }
        let m = Manifest::parse(&text, "").unwrap();
        assert_eq!(m.class_counts(), [62, 53]);
        let round = Manifest::parse(&m.to_csv().unwrap(), "").unwrap();
        assert_eq!(round, m);
    }

    #[test]
    fn mask_minimal_and_background() {
        let m = LabelMask::from_pgm_bytes(b"P5\n2 2\n255\n\x00\x00\x01\x01").unwrap();
        assert_eq!(m.nucleus_ids(), vec![1]);
        assert_eq!(m.labels.iter().filter(|&&l| l == 1).count(), 2);
        let z = LabelMask::from_pgm_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00").unwrap();
        assert_eq!(z.nucleus_count(), 0);
    }

    #[test]
    fn mask_16bit_id_300() {
        // 300 = 0x012C, stored big-endian
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0x01, 0x2C]);
        let m = LabelMask::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(m.nucleus_ids(), vec![300]);
        let again = LabelMask::from_pgm_bytes(&m.to_pgm_bytes().unwrap()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn patch_names() {
        let p = PatchRef::new(512, 768);
        let name = patch_file_name("slide_7", &p, "pgm");
        assert_eq!(name, "slide_7_512_768.pgm");
        assert_eq!(parse_patch_file_name(&name), Some(("slide_7".into(), 512, 768)));
    }
}
