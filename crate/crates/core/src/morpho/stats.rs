//! Two-sample comparison of morphometric features between subtypes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::features::{NucleusRecord, PatchAggregate};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance t-test. Swapping the samples negates `t` and
/// leaves `p` unchanged.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedTest(format!(
            "Welch test needs n >= 2 per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("samples must be finite"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::UndefinedTest("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    // P(|T| > |t|) = I_{df/(df+t²)}(df/2, 1/2)
    let x = df / (df + t * t);
    let p = beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0);
    Ok(WelchResult { t, df, p })
}

/// Quartiles by linear interpolation between order statistics, whiskers at
/// the most extreme points within 1.5·IQR of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlot {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_plot(values: &[f64]) -> Option<BoxPlot> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let median = quantile(&v, 0.5);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x));
    let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
    let outliers = v
        .iter()
        .copied()
        .filter(|x| !(lo_fence..=hi_fence).contains(x))
        .collect();
    Some(BoxPlot {
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
        outliers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub n: usize,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    /// Observations dropped because the feature was undefined.
    pub excluded: usize,
    pub box_plot: Option<BoxPlot>,
}

fn summarize(values: &[f64], excluded: usize) -> ClassSummary {
    let n = values.len();
    let (mean, std) = if n == 0 {
        (None, None)
    } else {
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        (Some(mean), Some(var.sqrt()))
    };
    ClassSummary {
        n,
        mean,
        std,
        excluded,
        box_plot: box_plot(values),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparison {
    pub abc: ClassSummary,
    pub gcb: ClassSummary,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    /// Why the test is undefined, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub pooling: Pooling,
    pub features: BTreeMap<String, FeatureComparison>,
}

/// Unit of observation for the group test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every nucleus (or patch, for per-patch features) is one observation.
    #[default]
    PerCell,
    /// Observations are first averaged within each slide.
    PerSlide,
}

/// Nuclei and patch aggregates of one subtype.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupInput {
    pub nuclei: Vec<NucleusRecord>,
    pub patches: Vec<PatchAggregate>,
}

type Extract<T> = fn(&T) -> Option<f64>;

const NUCLEUS_FEATURES: [(&str, Extract<NucleusRecord>); 6] = [
    ("area", |r| Some(r.area)),
    ("perimeter", |r| Some(r.perimeter)),
    ("circularity", |r| r.circularity),
    ("aspect_ratio", |r| Some(r.aspect_ratio)),
    ("solidity", |r| Some(r.solidity)),
    ("rb_ratio", |r| r.rb_ratio),
];

const PATCH_FEATURES: [(&str, Extract<PatchAggregate>); 2] = [
    ("nucleus_count", |p| Some(p.nucleus_count as f64)),
    ("nc_ratio", |p| p.nc_ratio),
];

/// Defined values in a deterministic order, plus the undefined count.
/// Ordering key: slide, y, x, id.
type RecordKey = (String, u32, u32, u32);

fn observations<T>(
    items: &[T],
    key: impl Fn(&T) -> RecordKey,
    extract: Extract<T>,
    pooling: Pooling,
) -> (Vec<f64>, usize) {
    let mut keyed: Vec<(RecordKey, Option<f64>)> =
        items.iter().map(|it| (key(it), extract(it))).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let excluded = keyed.iter().filter(|(_, v)| v.is_none()).count();
    let values = match pooling {
        Pooling::PerCell => keyed.into_iter().filter_map(|(_, v)| v).collect(),
        Pooling::PerSlide => {
            let mut per_slide: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for ((slide, ..), v) in keyed {
                if let Some(v) = v {
                    let e = per_slide.entry(slide).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            per_slide.values().map(|(s, n)| s / *n as f64).collect()
        }
    };
    (values, excluded)
}

fn compare(abc: (Vec<f64>, usize), gcb: (Vec<f64>, usize)) -> FeatureComparison {
    let (t, p_value, note) = match welch_t_test(&abc.0, &gcb.0) {
        Ok(w) => (Some(w.t), Some(w.p), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    FeatureComparison {
        abc: summarize(&abc.0, abc.1),
        gcb: summarize(&gcb.0, gcb.1),
        t,
        p_value,
        note,
    }
}

/// Means, population standard deviations, box-plot data and Welch p-values
/// for every feature. Positive `t` means the ABC mean is larger.
pub fn compare_groups(abc: &GroupInput, gcb: &GroupInput, pooling: Pooling) -> Result<GroupStats> {
    if abc.nuclei.is_empty() && abc.patches.is_empty() {
        return Err(Error::validation("ABC group is empty"));
    }
    if gcb.nuclei.is_empty() && gcb.patches.is_empty() {
        return Err(Error::validation("GCB group is empty"));
    }
    let nucleus_key =
        |r: &NucleusRecord| (r.slide_id.clone(), r.patch.y, r.patch.x, r.nucleus_id);
    let patch_key = |p: &PatchAggregate| (p.slide_id.clone(), p.patch.y, p.patch.x, 0);
    let mut features = BTreeMap::new();
    for (name, f) in NUCLEUS_FEATURES {
        features.insert(
            name.to_string(),
            compare(
                observations(&abc.nuclei, nucleus_key, f, pooling),
                observations(&gcb.nuclei, nucleus_key, f, pooling),
            ),
        );
    }
    for (name, f) in PATCH_FEATURES {
        features.insert(
            name.to_string(),
            compare(
                observations(&abc.patches, patch_key, f, pooling),
                observations(&gcb.patches, patch_key, f, pooling),
            ),
        );
    }
    Ok(GroupStats { pooling, features })
}
