//! Slide-level evaluation metrics: ROC AUC, confusion counts, accuracy,
//! PPV/NPV and across-fold summaries.

use serde::{Deserialize, Serialize};

use crate::datamodel::SubtypeLabel;
use crate::error::{Error, Result};

/// Class treated as positive for AUC, PPV and NPV.
pub const POSITIVE_CLASS: SubtypeLabel = SubtypeLabel::Abc;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Area under the ROC curve via the Mann–Whitney rank sum, with tied
/// scores sharing their average rank.
///
/// Ranks are kept doubled in integer arithmetic, so the result is the same
/// `(concordant + ½·tied) / (pos·neg)` ratio a pairwise count produces.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum over positives of 2·rank, ranks 1-based, ties averaged
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `true` where `label` is the positive class.
pub fn positive_mask(labels: &[SubtypeLabel]) -> Vec<bool> {
    labels.iter().map(|&l| l == POSITIVE_CLASS).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.tp + self.tn) as f64 / total as f64)
    }
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `(tp/(tp+fp), tn/(tn+fn))`, `None` where a denominator is zero.
pub fn ppv_npv(c: &Confusion) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tn, c.tn + c.fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub confusion: Confusion,
}

/// `scores` are positive-class probabilities.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalResult> {
    let auc = match roc_auc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let confusion = confusion_at_threshold(scores, labels, threshold);
    let (ppv, npv) = ppv_npv(&confusion);
    Ok(EvalResult {
        auc,
        acc: confusion.accuracy(),
        ppv,
        npv,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Population standard deviation across folds.
    pub std: Option<f64>,
    pub max: Option<f64>,
    /// Folds where the metric was defined.
    pub n: usize,
}

/// Summarises per-fold values, skipping undefined ones.
pub fn summarize(name: &str, values: &[Option<f64>]) -> MetricSummary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.len() < values.len() {
        log::warn!(
            "{name}: {} of {} folds undefined and excluded from the summary",
            values.len() - defined.len(),
            values.len()
        );
    }
    if defined.is_empty() {
        return MetricSummary {
            mean: None,
            std: None,
            max: None,
            n: 0,
        };
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    MetricSummary {
        mean: Some(mean),
        std: Some(var.sqrt()),
        max: Some(max),
        n: defined.len(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Metric CSV: `fold,auc,acc,ppv,npv,tp,fp,tn,fn`.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (String, &'a EvalResult)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "auc", "acc", "ppv", "npv", "tp", "fp", "tn", "fn"])?;
    for (fold, r) in rows {
        let c = r.confusion;
        w.write_record([
            fold,
            opt(r.auc),
            opt(r.acc),
            opt(r.ppv),
            opt(r.npv),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_worked_example() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        assert_eq!(brute(&s, &l), 0.75);
    }

    #[test]
    fn auc_extremes() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn confusion_rules() {
        let c = confusion_at_threshold(&[0.6, 0.4], &[false, true], 0.5);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (0, 1, 0, 1));
        let perfect = confusion_at_threshold(&[0.9, 0.1], &[true, false], 0.5);
        assert_eq!((perfect.fp, perfect.fn_), (0, 0));
        let all_pos = confusion_at_threshold(&[0.9, 0.7, 0.5], &[true, false, true], 0.5);
        assert_eq!((all_pos.tn, all_pos.fn_), (0, 0));
        assert_eq!(all_pos.accuracy(), Some(2.0 / 3.0));
    }

    #[test]
    fn predictive_values() {
        let c = Confusion {
            tp: 9,
            fp: 1,
            tn: 7,
            fn_: 3,
        };
        let (ppv, npv) = ppv_npv(&c);
        assert_eq!(ppv, Some(0.9));
        assert_eq!(npv, Some(0.7));
        let empty = Confusion {
            tp: 0,
            fp: 0,
            tn: 3,
            fn_: 1,
        };
        assert_eq!(ppv_npv(&empty).0, None);
    }

    #[test]
    fn fold_summary() {
        let s = summarize("auc", &[Some(0.8), Some(0.9), Some(1.0)]);
        assert!((s.mean.unwrap() - 0.9).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.08164965809277258).abs() < 1e-12);
        assert_eq!(s.max, Some(1.0));
        let same = summarize("auc", &[Some(0.7); 3]);
        assert!(same.std.unwrap() < 1e-15);
        let partial = summarize("ppv", &[Some(0.5), None, Some(1.0)]);
        assert_eq!(partial.n, 2);
        assert_eq!(partial.mean, Some(0.75));
    }

    #[test]
    fn csv_layout() {
        let r = evaluate(&[0.9, 0.2], &[true, false], 0.5).unwrap();
        let text = metrics_csv([("0".to_string(), &r)]).unwrap();
        assert_eq!(text, "fold,auc,acc,ppv,npv,tp,fp,tn,fn\n0,1,1,1,1,1,0,1,0\n");
    }
}
