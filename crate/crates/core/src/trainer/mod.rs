//! Slide-level training: AdamW, one optimizer step per slide, early stopping
//! on validation loss with best-checkpoint restoration, and the stratified
//! cross-validation harness.

mod adamw;
mod cv;
mod folds;

pub use adamw::{adamw_step, AdamWState};
pub use cv::{
    evaluate_scores, run_cross_validation, score_bags, summarize_folds, CvConfig, CvOutcome,
    CvReport, CvSummary, FoldOutcome, FoldReport, SlideScore,
};
pub use folds::{make_folds, make_folds_from, round_half_down, FoldPlan, SplitRatios};

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SlideBag, SubtypeLabel};
use crate::error::{Error, Result};
use crate::metrics::{self, POSITIVE_CLASS};
use crate::milnet::{
    self, backward_matrix, cross_entropy, forward_matrix, Activation, ClassifierMode, MilModel,
    Mode, ModelConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.1,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::validation(
                "patience must satisfy 1 <= patience <= max_epochs",
            ));
        }
        Ok(())
    }
}

/// Architecture choices that are not tied to the input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub hidden_width: usize,
    pub attention_width: usize,
    pub compress_activation: Activation,
    pub classifier_mode: ClassifierMode,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            hidden_width: 512,
            attention_width: 256,
            compress_activation: Activation::Relu,
            classifier_mode: ClassifierMode::PerClass,
        }
    }
}

impl ModelOptions {
    pub fn model_config(&self, input_dim: usize, dropout: f64) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_width: self.hidden_width,
            attention_width: self.attention_width,
            compress_activation: self.compress_activation,
            classifier_mode: self.classifier_mode,
            dropout,
        }
    }
}

/// A labelled bag with its embeddings widened once for training.
#[derive(Debug, Clone)]
pub struct PreparedBag {
    pub slide_id: String,
    pub label: SubtypeLabel,
    pub embeddings: Array2<f64>,
}

impl PreparedBag {
    pub fn from_bag(bag: &SlideBag) -> Result<Self> {
        let label = bag.label.ok_or_else(|| {
            Error::validation(format!("slide {} has no label", bag.slide_id))
        })?;
        Ok(Self {
            slide_id: bag.slide_id.clone(),
            label,
            embeddings: milnet::embeddings_f64(bag),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss,val_auc`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_loss", "val_auc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_auc.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub loss: f64,
    pub auc: Option<f64>,
}

/// Scores the model at the end of each epoch; lower loss is better.
pub trait Validator {
    fn validate(&mut self, epoch: usize, model: &MilModel) -> Result<ValidationScore>;
}

/// Mean cross-entropy and AUC over a fixed validation set, eval mode.
pub struct BagValidator<'a> {
    pub bags: &'a [PreparedBag],
}

impl Validator for BagValidator<'_> {
    fn validate(&mut self, _epoch: usize, model: &MilModel) -> Result<ValidationScore> {
        let mut loss = 0.0;
        let mut scores = Vec::with_capacity(self.bags.len());
        let mut labels = Vec::with_capacity(self.bags.len());
        for bag in self.bags {
            let trace = forward_matrix(bag.embeddings.view(), model, Mode::Eval)?;
            loss += cross_entropy(&trace.logits, bag.label);
            scores.push(trace.probs[POSITIVE_CLASS.index()]);
            labels.push(bag.label == POSITIVE_CLASS);
        }
        let auc = match metrics::roc_auc(&scores, &labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ValidationScore {
            loss: loss / self.bags.len() as f64,
            auc,
        })
    }
}

/// Trains `model` in place on `train` and returns the parameters from the
/// epoch with the lowest validation loss.
///
/// Epochs are 1-based. Training stops once `patience` consecutive epochs
/// fail to improve on the best validation loss, or after `max_epochs`.
pub fn fit(
    mut model: MilModel,
    train: &[PreparedBag],
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MilModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut state = AdamWState::new(&model.params);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = &train[i];
            let mode = Mode::Train {
                dropout_seed: rng.next_u64(),
            };
            let trace = forward_matrix(bag.embeddings.view(), &model, mode)?;
            let (loss, grads) = backward_matrix(&trace, bag.embeddings.view(), &model, bag.label)?;
            adamw_step(&mut model.params, &grads, &mut state, cfg)?;
            train_loss += loss;
        }
        train_loss /= train.len() as f64;

        let val = validator.validate(epoch, &model)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss is {} at epoch {epoch}",
                val.loss
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_auc: val.auc,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {:.5}", val.loss);

        if val.loss < best_loss {
            best_loss = val.loss;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_epoch = epoch;
                break;
            }
        }
    }
    Ok((
        best,
        TrainLog {
            epochs,
            best_epoch,
            stopped_epoch,
        },
    ))
}

/// Generator for a fold: the configured seed, on a per-fold stream.
pub fn fold_rng(seed: u64, fold_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold_index as u64);
    rng
}

fn lookup<'a>(
    ids: impl IntoIterator<Item = &'a String>,
    bags: &HashMap<&str, &PreparedBag>,
) -> Result<Vec<PreparedBag>> {
    ids.into_iter()
        .map(|id| {
            bags.get(id.as_str())
                .map(|b| (*b).clone())
                .ok_or_else(|| Error::validation(format!("slide {id} has no bag")))
        })
        .collect()
}

/// Trains one fold from a fresh initialisation.
pub fn train_fold(
    fold: &FoldPlan,
    bags: &[PreparedBag],
    cfg: &TrainConfig,
    options: &ModelOptions,
) -> Result<(MilModel, TrainLog)> {
    cfg.validate()?;
    let index: HashMap<&str, &PreparedBag> =
        bags.iter().map(|b| (b.slide_id.as_str(), b)).collect();
    let train = lookup(&fold.train_ids, &index)?;
    let val = lookup(&fold.val_ids, &index)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(format!(
            "fold {} has an empty training or validation set",
            fold.fold_index
        )));
    }
    let dim = train[0].embeddings.ncols();
    if let Some(b) = train.iter().chain(&val).find(|b| b.embeddings.ncols() != dim) {
        return Err(Error::validation(format!(
            "slide {} has width {}, expected {dim}",
            b.slide_id,
            b.embeddings.ncols()
        )));
    }
    let mut rng = fold_rng(cfg.seed, fold.fold_index);
    let model = MilModel::init(options.model_config(dim, cfg.dropout), rng.next_u64())?;
    let mut validator = BagValidator { bags: &val };
    fit(model, &train, &mut validator, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::PatchRef;
    use rand::Rng;

    fn toy_bags(n_per_class: usize, dim: usize, seed: u64) -> Vec<PreparedBag> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let label = if i % 2 == 0 { SubtypeLabel::Abc } else { SubtypeLabel::Gcb };
            let shift = if label == SubtypeLabel::Gcb { 1.5 } else { 0.0 };
            let e = Array2::from_shape_simple_fn((6, dim), || rng.random_range(-1.0..1.0))
                + shift;
            out.push(PreparedBag {
                slide_id: format!("S{i}"),
                label,
                embeddings: e,
            });
        }
        out
    }

    fn small_options() -> ModelOptions {
        ModelOptions {
            hidden_width: 16,
            attention_width: 8,
            ..ModelOptions::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_patience = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(zero_patience.validate().is_err());
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let bags = toy_bags(6, 4, 1);
        let ids: Vec<_> = bags.iter().map(|b| (b.slide_id.clone(), b.label)).collect();
        let ratios = SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let fold = &make_folds_from(&ids, 2, ratios, 0).unwrap()[0];
        let cfg = TrainConfig {
            max_epochs: 15,
            patience: 5,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        };
        let (m1, l1) = train_fold(fold, &bags, &cfg, &small_options()).unwrap();
        let (m2, l2) = train_fold(fold, &bags, &cfg, &small_options()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert!(l1.stopped_epoch - l1.best_epoch <= cfg.patience);
    }

    #[test]
    fn empty_validation_rejected() {
        let bags = toy_bags(3, 4, 1);
        let fold = FoldPlan {
            fold_index: 0,
            train_ids: bags.iter().map(|b| b.slide_id.clone()).collect(),
            val_ids: Default::default(),
            test_ids: Default::default(),
        };
        assert!(train_fold(&fold, &bags, &TrainConfig::default(), &small_options()).is_err());
    }

    #[test]
    fn unlabeled_bag_rejected() {
        let bag = SlideBag::new(
            "x",
            None,
            vec![PatchRef::new(0, 0)],
            Array2::zeros((1, 2)),
        )
        .unwrap();
        assert!(PreparedBag::from_bag(&bag).is_err());
    }

    #[test]
    fn log_csv_header() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_auc: None,
            }],
            best_epoch: 1,
            stopped_epoch: 1,
        };
        assert_eq!(
            log.to_csv().unwrap(),
            "epoch,train_loss,val_loss,val_auc\n1,0.5,0.25,\n"
        );
    }
}
