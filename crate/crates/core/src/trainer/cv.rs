//! Cross-validation: train every fold, score its held-out test slides and
//! summarise the metrics across folds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_folds_from, train_fold, FoldPlan, ModelOptions, PreparedBag, SplitRatios, TrainConfig, TrainLog};
use crate::datamodel::{SlideBag, SubtypeLabel};
use crate::error::{Error, Result};
use crate::metrics::{self, evaluate, summarize, Confusion, EvalResult, MetricSummary, POSITIVE_CLASS};
use crate::milnet::{forward_matrix, MilModel, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub train: TrainConfig,
    pub model: ModelOptions,
    pub n_folds: usize,
    pub ratios: SplitRatios,
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelOptions::default(),
            n_folds: 3,
            ratios: SplitRatios::default(),
            threshold: metrics::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub auc: MetricSummary,
    pub acc: MetricSummary,
    pub ppv: MetricSummary,
    pub npv: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub label: SubtypeLabel,
    /// Probability of the positive class.
    pub score: f64,
    pub predicted: SubtypeLabel,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub plan: FoldPlan,
    pub model: MilModel,
    pub log: TrainLog,
    pub test_scores: Vec<SlideScore>,
    pub eval: EvalResult,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub folds: Vec<FoldOutcome>,
}

/// Scores bags in eval mode.
pub fn score_bags(model: &MilModel, bags: &[PreparedBag]) -> Result<Vec<SlideScore>> {
    bags.iter()
        .map(|b| {
            let trace = forward_matrix(b.embeddings.view(), model, Mode::Eval)?;
            Ok(SlideScore {
                slide_id: b.slide_id.clone(),
                label: b.label,
                score: trace.probs[POSITIVE_CLASS.index()],
                predicted: trace.predicted(),
            })
        })
        .collect()
}

pub fn evaluate_scores(scores: &[SlideScore], threshold: f64) -> Result<EvalResult> {
    let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let l: Vec<bool> = scores.iter().map(|s| s.label == POSITIVE_CLASS).collect();
    evaluate(&s, &l, threshold)
}

/// Folds are independent and run on the current rayon pool; results are
/// collected in fold order, so the outcome does not depend on pool width.
pub fn run_cross_validation(bags: &[SlideBag], cfg: &CvConfig) -> Result<CvOutcome> {
    cfg.train.validate()?;
    let prepared = bags
        .iter()
        .map(PreparedBag::from_bag)
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<(String, SubtypeLabel)> = prepared
        .iter()
        .map(|b| (b.slide_id.clone(), b.label))
        .collect();
    let plans = make_folds_from(&ids, cfg.n_folds, cfg.ratios, cfg.train.seed)?;

    let folds = plans
        .into_par_iter()
        .map(|plan| -> Result<FoldOutcome> {
            let (model, log) = train_fold(&plan, &prepared, &cfg.train, &cfg.model)?;
            let test: Vec<PreparedBag> = prepared
                .iter()
                .filter(|b| plan.test_ids.contains(&b.slide_id))
                .cloned()
                .collect();
            if test.is_empty() {
                return Err(Error::validation(format!(
                    "fold {} has no test slides",
                    plan.fold_index
                )));
            }
            let test_scores = score_bags(&model, &test)?;
            let eval = evaluate_scores(&test_scores, cfg.threshold)?;
            log::info!(
                "fold {}: best epoch {}, stopped {}, test AUC {:?}",
                plan.fold_index,
                log.best_epoch,
                log.stopped_epoch,
                eval.auc
            );
            Ok(FoldOutcome {
                plan,
                model,
                log,
                test_scores,
                eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = CvReport {
        folds: folds
            .iter()
            .map(|f| FoldReport {
                fold: f.plan.fold_index,
                auc: f.eval.auc,
                acc: f.eval.acc,
                ppv: f.eval.ppv,
                npv: f.eval.npv,
                best_epoch: f.log.best_epoch,
                stopped_epoch: f.log.stopped_epoch,
                confusion: f.eval.confusion,
            })
            .collect(),
        summary: summarize_folds(folds.iter().map(|f| &f.eval)),
    };
    Ok(CvOutcome { report, folds })
}

pub fn summarize_folds<'a>(evals: impl Iterator<Item = &'a EvalResult> + Clone) -> CvSummary {
    let collect = |f: fn(&EvalResult) -> Option<f64>| evals.clone().map(f).collect::<Vec<_>>();
    CvSummary {
        auc: summarize("auc", &collect(|e| e.auc)),
        acc: summarize("acc", &collect(|e| e.acc)),
        ppv: summarize("ppv", &collect(|e| e.ppv)),
        npv: summarize("npv", &collect(|e| e.npv)),
    }
}
