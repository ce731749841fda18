//! Per-nucleus geometry and colour.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelMask, PatchRef};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusRecord {
    pub slide_id: String,
    pub patch: PatchRef,
    pub nucleus_id: u32,
    /// Pixel count.
    pub area: f64,
    /// Length of the 8-connected outer boundary walk through pixel centres.
    pub perimeter: f64,
    /// `4πA/P²`; undefined for single-pixel nuclei.
    pub circularity: Option<f64>,
    /// Major over minor axis of the moment-equivalent ellipse.
    pub aspect_ratio: f64,
    /// Area over the pixel count of the convex hull.
    pub solidity: f64,
    /// Mean red over mean blue; undefined when the blue mean is zero.
    pub rb_ratio: Option<f64>,
}

// Moore neighbourhood, clockwise in image coordinates starting east.
const DIRS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Pixel set of one nucleus in coordinates relative to its bounding box.
struct Blob {
    width: usize,
    height: usize,
    occupied: Vec<bool>,
    pixels: Vec<(i64, i64)>,
}

impl Blob {
    fn from_pixels(pixels: &[(usize, usize)]) -> Self {
        let min_x = pixels.iter().map(|p| p.0).min().unwrap();
        let min_y = pixels.iter().map(|p| p.1).min().unwrap();
        let max_x = pixels.iter().map(|p| p.0).max().unwrap();
        let max_y = pixels.iter().map(|p| p.1).max().unwrap();
        let width = max_x - min_x + 1;
        let height = max_y - min_y + 1;
        let mut occupied = vec![false; width * height];
        let rel: Vec<(i64, i64)> = pixels
            .iter()
            .map(|&(x, y)| ((x - min_x) as i64, (y - min_y) as i64))
            .collect();
        for &(x, y) in &rel {
            occupied[y as usize * width + x as usize] = true;
        }
        Blob {
            width,
            height,
            occupied,
            pixels: rel,
        }
    }

    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.occupied[y as usize * self.width + x as usize]
    }

    /// Moore-neighbour tracing of the outer boundary of the component that
    /// holds the first pixel in raster order. Axis steps count 1, diagonal
    /// steps √2. Stops when the first move repeats.
    fn boundary_length(&self) -> f64 {
        let start = self
            .pixels
            .iter()
            .copied()
            .min_by_key(|&(x, y)| (y, x))
            .unwrap();
        // the pixel above `start` is background; begin the sweep from there
        let mut search_from = 6;
        let mut current = start;
        let mut first_move = None;
        let mut length = 0.0;
        loop {
            let next = (0..8).map(|i| (search_from + i) % 8).find(|&d| {
                let (dx, dy) = DIRS[d];
                self.at(current.0 + dx, current.1 + dy)
            });
            let Some(dir) = next else {
                return 0.0; // isolated pixel
            };
            let step = (current, dir);
            match first_move {
                None => first_move = Some(step),
                Some(first) if first == step => break,
                _ => {}
            }
            length += if dir % 2 == 0 { 1.0 } else { SQRT_2 };
            let (dx, dy) = DIRS[dir];
            current = (current.0 + dx, current.1 + dy);
            // resume the clockwise sweep just past the cell we came from (dir + 4)
            search_from = (dir + 5) % 8;
        }
        length
    }

    /// Axis ratio of the ellipse with the same second moments, treating each
    /// pixel as a unit square (each pixel adds 1/12 to both variances).
    fn aspect_ratio(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self
            .pixels
            .iter()
            .fold((0i64, 0i64), |(a, b), &(x, y)| (a + x, b + y));
        let (cx, cy) = (sx as f64 / n, sy as f64 / n);
        let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
        for &(x, y) in &self.pixels {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            mxx += dx * dx;
            myy += dy * dy;
            mxy += dx * dy;
        }
        let mxx = mxx / n + 1.0 / 12.0;
        let myy = myy / n + 1.0 / 12.0;
        let mxy = mxy / n;
        let mean = 0.5 * (mxx + myy);
        let spread = (0.25 * (mxx - myy).powi(2) + mxy * mxy).sqrt();
        let major = mean + spread;
        let minor = (mean - spread).max(f64::MIN_POSITIVE);
        (major / minor).sqrt().max(1.0)
    }

    /// Number of lattice pixels inside or on the convex hull of the pixel
    /// centres, by Pick's theorem: `I + B = A + B/2 + 1`.
    fn hull_pixel_count(&self) -> u64 {
        let hull = convex_hull(&self.pixels);
        match hull.len() {
            0 => 0,
            1 => 1,
            2 => gcd_steps(hull[0], hull[1]) + 1,
            _ => {
                let mut twice_area: i64 = 0;
                let mut boundary: u64 = 0;
                for i in 0..hull.len() {
                    let a = hull[i];
                    let b = hull[(i + 1) % hull.len()];
                    twice_area += a.0 * b.1 - b.0 * a.1;
                    boundary += gcd_steps(a, b);
                }
                (twice_area.unsigned_abs() + boundary) / 2 + 1
            }
        }
    }
}

fn gcd_steps(a: (i64, i64), b: (i64, i64)) -> u64 {
    let (mut p, mut q) = ((b.0 - a.0).unsigned_abs(), (b.1 - a.1).unsigned_abs());
    while q != 0 {
        (p, q) = (q, p % q);
    }
    p
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; collinear points are dropped, so the result is
/// the strictly convex vertex cycle (or fewer than three points).
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Features for every nucleus in `mask`, ordered by nucleus ID.
pub fn nucleus_features(
    mask: &LabelMask,
    patch_rgb: &RgbImage,
    slide_id: &str,
    patch: PatchRef,
) -> Result<Vec<NucleusRecord>> {
    if mask.width() != patch_rgb.width() || mask.height() != patch_rgb.height() {
        return Err(Error::validation(format!(
            "mask is {}x{} but patch is {}x{}",
            mask.width(),
            mask.height(),
            patch_rgb.width(),
            patch_rgb.height()
        )));
    }
    let mut groups: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for ((y, x), &label) in mask.labels.indexed_iter() {
        if label > 0 {
            groups.entry(label).or_default().push((x, y));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(id, pixels)| {
            let blob = Blob::from_pixels(&pixels);
            let area = pixels.len() as f64;
            let perimeter = blob.boundary_length();
            let (mut red, mut blue) = (0u64, 0u64);
            for &(x, y) in &pixels {
                let [r, _, b] = patch_rgb.get(x, y);
                red += r as u64;
                blue += b as u64;
            }
            NucleusRecord {
                slide_id: slide_id.to_string(),
                patch,
                nucleus_id: id,
                area,
                perimeter,
                circularity: (perimeter > 0.0).then(|| 4.0 * PI * area / (perimeter * perimeter)),
                aspect_ratio: blob.aspect_ratio(),
                solidity: area / blob.hull_pixel_count() as f64,
                rb_ratio: (blue > 0).then(|| red as f64 / blue as f64),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAggregate {
    pub slide_id: String,
    pub patch: PatchRef,
    pub nucleus_count: usize,
    /// Nucleus pixels over non-nucleus pixels; undefined if the patch is all
    /// nucleus.
    pub nc_ratio: Option<f64>,
    pub mean_area: Option<f64>,
    pub mean_perimeter: Option<f64>,
    pub mean_circularity: Option<f64>,
    pub mean_aspect_ratio: Option<f64>,
    pub mean_solidity: Option<f64>,
    pub mean_rb_ratio: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn patch_aggregate(mask: &LabelMask, records: &[NucleusRecord]) -> PatchAggregate {
    let nucleus_pixels = mask.labels.iter().filter(|&&l| l > 0).count();
    let background = mask.labels.len() - nucleus_pixels;
    let (slide_id, patch) = records
        .first()
        .map(|r| (r.slide_id.clone(), r.patch))
        .unwrap_or_else(|| (String::new(), PatchRef::new(0, 0)));
    PatchAggregate {
        slide_id,
        patch,
        nucleus_count: mask.nucleus_count(),
        nc_ratio: (background > 0).then(|| nucleus_pixels as f64 / background as f64),
        mean_area: mean_of(records.iter().map(|r| r.area)),
        mean_perimeter: mean_of(records.iter().map(|r| r.perimeter)),
        mean_circularity: mean_of(records.iter().filter_map(|r| r.circularity)),
        mean_aspect_ratio: mean_of(records.iter().map(|r| r.aspect_ratio)),
        mean_solidity: mean_of(records.iter().map(|r| r.solidity)),
        mean_rb_ratio: mean_of(records.iter().filter_map(|r| r.rb_ratio)),
    }
}

/// Per-nucleus CSV:
/// `slide_id,x,y,nucleus_id,area,perimeter,circularity,aspect_ratio,solidity,rb_ratio`.
pub fn nuclei_csv(records: &[NucleusRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "slide_id",
        "x",
        "y",
        "nucleus_id",
        "area",
        "perimeter",
        "circularity",
        "aspect_ratio",
        "solidity",
        "rb_ratio",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.slide_id.clone(),
            r.patch.x.to_string(),
            r.patch.y.to_string(),
            r.nucleus_id.to_string(),
            r.area.to_string(),
            r.perimeter.to_string(),
            opt(r.circularity),
            r.aspect_ratio.to_string(),
            r.solidity.to_string(),
            opt(r.rb_ratio),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask_from(f: impl Fn(usize, usize) -> u32, w: usize, h: usize) -> LabelMask {
        LabelMask::new(Array2::from_shape_fn((h, w), |(y, x)| f(x, y))).unwrap()
    }

    fn single(mask: &LabelMask) -> NucleusRecord {
        let rgb = RgbImage::new(mask.width(), mask.height(), [100, 50, 200]);
        let mut recs = nucleus_features(mask, &rgb, "s", PatchRef::new(0, 0)).unwrap();
        assert_eq!(recs.len(), 1);
        recs.remove(0)
    }

    fn disk(r: f64, cx: f64, cy: f64, size: usize) -> LabelMask {
        mask_from(
            |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                (dx * dx + dy * dy <= r * r) as u32
            },
            size,
            size,
        )
    }

    #[test]
    fn disk_radius_20() {
        let rec = single(&disk(20.0, 32.0, 32.0, 64));
        let ideal = PI * 400.0;
        assert!((rec.area - ideal).abs() / ideal < 0.02, "area {}", rec.area);
        let c = rec.circularity.unwrap();
        assert!((0.92..=1.02).contains(&c), "circularity {c}");
        assert!((rec.aspect_ratio - 1.0).abs() < 0.03);
        assert!(rec.solidity >= 0.98);
    }

    #[test]
    fn rectangle_20_by_10() {
        let rec = single(&mask_from(
            |x, y| ((5..25).contains(&x) && (3..13).contains(&y)) as u32,
            32,
            16,
        ));
        assert_eq!(rec.area, 200.0);
        assert!((rec.aspect_ratio - 2.0).abs() / 2.0 < 0.02);
        assert_eq!(rec.solidity, 1.0);
        // centre-line walk: 2·(19 + 9) axis steps
        assert_eq!(rec.perimeter, 56.0);
        let expected = 4.0 * PI * 200.0 / (56.0 * 56.0);
        assert!((rec.circularity.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rb_ratio_from_channel_means() {
        let rec = single(&disk(4.0, 8.0, 8.0, 16));
        assert_eq!(rec.rb_ratio, Some(0.5));
        let mask = disk(4.0, 8.0, 8.0, 16);
        let rgb = RgbImage::new(16, 16, [10, 10, 0]);
        let r = nucleus_features(&mask, &rgb, "s", PatchRef::new(0, 0)).unwrap();
        assert_eq!(r[0].rb_ratio, None);
    }

    #[test]
    fn small_shapes() {
        let dot = single(&mask_from(|x, y| (x == 2 && y == 2) as u32, 5, 5));
        assert_eq!(dot.perimeter, 0.0);
        assert_eq!(dot.circularity, None);
        assert_eq!(dot.aspect_ratio, 1.0);
        assert_eq!(dot.solidity, 1.0);

        let bar = single(&mask_from(|x, y| (y == 1 && (1..4).contains(&x)) as u32, 5, 3));
        assert_eq!(bar.perimeter, 4.0);
        assert_eq!(bar.solidity, 1.0);
        // variances 2/3 + 1/12 and 1/12 along the two axes
        assert!((bar.aspect_ratio - 3.0).abs() < 1e-12);

        let diag = single(&mask_from(|x, y| (x == y) as u32, 3, 3));
        assert!((diag.perimeter - 4.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn l_shape_solidity_below_one() {
        let rec = single(&mask_from(|x, y| (x < 2 || y < 2) as u32, 6, 6));
        // 20 pixels; hull of centres (0,0),(5,0),(5,1),(1,5),(0,5) covers 26 pixels
        assert_eq!(rec.area, 20.0);
        assert!((rec.solidity - 20.0 / 26.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_dimensions() {
        let mask = disk(3.0, 5.0, 5.0, 10);
        let rgb = RgbImage::new(9, 10, [0, 0, 0]);
        assert!(nucleus_features(&mask, &rgb, "s", PatchRef::new(0, 0)).is_err());
    }

    #[test]
    fn aggregates() {
        let empty = mask_from(|_, _| 0, 4, 4);
        let agg = patch_aggregate(&empty, &[]);
        assert_eq!(agg.nucleus_count, 0);
        assert_eq!(agg.nc_ratio, Some(0.0));

        let three = mask_from(|x, y| if y == 0 { [1, 0, 2, 0, 3][x] } else { 0 }, 5, 2);
        assert_eq!(patch_aggregate(&three, &[]).nucleus_count, 3);

        let full = mask_from(|_, _| 1, 2, 2);
        assert_eq!(patch_aggregate(&full, &[]).nc_ratio, None);

        // 6553 nucleus pixels in a 256² patch
        let big = mask_from(|x, y| (y * 256 + x < 6553) as u32, 256, 256);
        let agg = patch_aggregate(&big, &[]);
        assert!((agg.nc_ratio.unwrap() - 6553.0 / 58983.0).abs() < 1e-15);
        assert!((agg.nc_ratio.unwrap() - 0.1111).abs() < 1e-4);
    }

    #[test]
    fn hull_drops_collinear_points() {
        let pts = [(0, 0), (1, 0), (2, 0), (2, 2), (0, 2), (1, 1)];
        assert_eq!(convex_hull(&pts).len(), 4);
    }
}
