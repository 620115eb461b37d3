//! Weighted-BCE training with Adam and a plateau schedule, evaluation
//! metrics, and the cross-validation, leave-one-subject-out and few-shot
//! fine-tuning protocols.

mod metrics;
mod optim;
mod protocol;

pub use metrics::{roc_auc, Confusion, MetricStats, Metrics, METRIC_NAMES};
pub use optim::{adam_step, AdamConfig, AdamState, PlateauConfig, PlateauScheduler};
pub use protocol::{
    derive_seed, finetune, finetune_split, kfold_cv, lopo, stratified_folds, subjects_of, CvReport, FinetuneResult, FinetuneSplit, FoldResult,
    LopoReport, LopoRound,
};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::mfcc::MfccTensor;
use crate::model::{stack_batch, ModelConfig, SeizurePredictor};
use crate::preprocess::{Class, Labeled};
use crate::tensor::BCE_CLAMP;

/// Feature tensors as stored in caches.
pub type Sample = MfccTensor<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub w_pos: f64,
    pub se_reduction: usize,
    pub attention: bool,
    pub scheduler: PlateauConfig,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Share of each training split held out for validation loss.
    pub val_fraction: f64,
    /// Set from the pipeline seed, not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::helsinki()
    }
}

impl TrainConfig {
    pub fn helsinki() -> Self {
        TrainConfig {
            lr: 4e-4,
            batch_size: 256,
            weight_decay: 5e-3,
            dropout: 0.3,
            w_pos: 0.52,
            se_reduction: 8,
            attention: true,
            scheduler: PlateauConfig::default(),
            max_epochs: 300,
            early_stop_patience: 60,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn siena() -> Self {
        TrainConfig {
            lr: 0.002,
            batch_size: 128,
            weight_decay: 1e-4,
            dropout: 1e-4,
            w_pos: 0.51,
            se_reduction: 16,
            ..Self::helsinki()
        }
    }

    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &'static str, msg: String| {
            if !ok {
                v.push((field, msg));
            }
        };
        check(self.lr > 0.0, "lr", format!("must be positive, got {}", self.lr));
        check(self.batch_size >= 2, "batch_size", format!("must be at least 2, got {}", self.batch_size));
        check(self.weight_decay >= 0.0, "weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        check((0.0..1.0).contains(&self.dropout), "dropout", format!("must lie in [0, 1), got {}", self.dropout));
        check(self.w_pos > 0.0 && self.w_pos < 1.0, "w_pos", format!("must lie in (0, 1), got {}", self.w_pos));
        check(
            self.se_reduction > 0 && 128 % self.se_reduction == 0,
            "se_reduction",
            format!("must divide 128, got {}", self.se_reduction),
        );
        let s = &self.scheduler;
        check(s.patience > 0, "scheduler.patience", "must be positive".into());
        check(s.factor > 0.0 && s.factor < 1.0, "scheduler.factor", format!("must lie in (0, 1), got {}", s.factor));
        check(s.min_lr > 0.0, "scheduler.min_lr", "must be positive".into());
        check(self.max_epochs > 0, "max_epochs", "must be positive".into());
        check(self.early_stop_patience > 0, "early_stop_patience", "must be positive".into());
        check(
            (0.0..0.5).contains(&self.val_fraction),
            "val_fraction",
            format!("must lie in [0, 0.5), got {}", self.val_fraction),
        );
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        let msg: Vec<String> = v.into_iter().map(|(f, m)| format!("{f}: {m}")).collect();
        Err(Error::Config(msg.join("; ")))
    }

    /// Architecture with this run's dropout, reduction and attention switch.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dropout_p: self.dropout,
            se_reduction: self.se_reduction,
            attention: self.attention,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Per-epoch losses plus the epoch whose parameters were kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mean weighted BCE of probabilities against targets (no gradient).
pub fn weighted_bce_value(probs: &[f64], targets: &[f64], w_pos: f64) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(w_pos * y * q.ln() + (1.0 - w_pos) * (1.0 - y) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n
}

/// Largest batch used for evaluation-mode forward passes.
const EVAL_BATCH: usize = 256;

/// Evaluation-mode probabilities for every sample, in order.
pub fn predict_all(model: &SeizurePredictor, samples: &[&Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        out.extend(model.predict(stack_batch(chunk)?)?);
    }
    Ok(out)
}

fn targets(samples: &[&Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.class().target()).collect()
}

fn labels(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.class().as_u8()).collect()
}

/// Evaluation-mode metrics at the 0.5 threshold.
pub fn evaluate(model: &SeizurePredictor, test_set: &[&Sample]) -> Result<Metrics> {
    let probs = predict_all(model, test_set)?;
    Ok(Metrics::from_probs(&probs, &labels(test_set)))
}

/// Epoch-level driver; [`train`] wraps it with validation and early stopping.
pub struct Trainer {
    pub model: SeizurePredictor,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: SeizurePredictor, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam: AdamState::new(AdamConfig::default()),
            scheduler: PlateauScheduler::new(cfg.lr, cfg.scheduler),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr
    }

    /// One shuffled pass over `train_set`; returns the mean training loss.
    /// A trailing batch of a single sample is skipped because batch norm
    /// cannot normalize it.
    pub fn run_epoch(&mut self, train_set: &[&Sample]) -> Result<f64> {
        if train_set.len() < 2 {
            bail!(Batch, "training needs at least 2 samples, got {}", train_set.len());
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in order.chunks(self.cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let seed = self.rng.next_u64();
            let (loss, grads, stats) =
                self.model.loss_and_grads(stack_batch(&batch)?, &targets(&batch), self.cfg.w_pos, seed)?;
            self.model.update_running_stats(&stats);
            let lr = self.scheduler.lr;
            adam_step(
                self.model.params.iter_mut().map(|p| p.value.data.as_mut_slice()),
                &grads,
                &mut self.adam,
                lr,
                self.cfg.weight_decay,
            );
            self.model.step += 1;
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        Ok(total / seen as f64)
    }

    /// Evaluation-mode loss on `set`.
    pub fn loss_on(&self, set: &[&Sample]) -> Result<f64> {
        let probs = predict_all(&self.model, set)?;
        Ok(weighted_bce_value(&probs, &targets(set), self.cfg.w_pos))
    }
}

/// Fails unless both classes occur in `set`.
pub fn require_both_classes(set: &[&Sample], what: &str) -> Result<()> {
    let pos = set.iter().filter(|s| s.class() == Class::Preictal).count();
    if pos == 0 || pos == set.len() {
        bail!(Data, "{what} must contain both classes ({pos} preictal of {})", set.len());
    }
    Ok(())
}

/// Trains `model` on `train_set`, scoring `val_set` after every epoch to
/// drive the plateau schedule and early stopping, and returns the
/// parameters from the epoch with the lowest validation loss. An empty
/// `val_set` falls back to the evaluation-mode training loss.
pub fn train(
    model: SeizurePredictor,
    train_set: &[&Sample],
    val_set: &[&Sample],
    cfg: &TrainConfig,
) -> Result<(SeizurePredictor, History)> {
    require_both_classes(train_set, "training set")?;
    let mut tr = Trainer::new(model, cfg)?;
    let mut history = History::default();
    let mut best = (f64::INFINITY, tr.model.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let train_loss = tr.run_epoch(train_set)?;
        let val_loss = if val_set.is_empty() { tr.loss_on(train_set)? } else { tr.loss_on(val_set)? };
        let lr = tr.scheduler.step(val_loss);
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}");
        if val_loss < best.0 {
            best = (val_loss, tr.model.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                info!("early stop at epoch {epoch}, best {}", history.best_epoch);
                break;
            }
        }
    }
    Ok((best.1, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::Rng;

    /// Gaussian tensors; preictal ones get a positive offset on channel 0.
    pub(crate) fn toy_set(n_per_class: usize, shift: f32, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for k in 0..2 * n_per_class {
            let label = if k % 2 == 0 { Class::Preictal } else { Class::Interictal };
            let mut values: Vec<f32> = (0..19 * 20 * 11).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if label == Class::Preictal {
                values[..220].iter_mut().for_each(|v| *v += shift);
            }
            out.push(MfccTensor {
                subject_id: format!("s{}", k % 3),
                label,
                t_start: k as f64 * 5.0,
                shape: [19, 20, 11],
                values,
            });
        }
        out
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { lr: 2e-3, batch_size: 8, max_epochs: 4, dropout: 0.0, ..TrainConfig::helsinki() }
    }

    #[test]
    fn training_is_deterministic() {
        let set = toy_set(8, 1.0, 1);
        let refs: Vec<&Sample> = set.iter().collect();
        let cfg = small_cfg();
        let m = init_params(&cfg.model_config(), 3).unwrap();
        let (a, ha) = train(m.clone(), &refs, &refs, &cfg).unwrap();
        let (b, hb) = train(m, &refs, &refs, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.epochs.len(), 4);
    }

    #[test]
    fn single_class_is_rejected() {
        let set = toy_set(4, 1.0, 1);
        let pos: Vec<&Sample> = set.iter().filter(|s| s.label == Class::Preictal).collect();
        let m = init_params(&small_cfg().model_config(), 3).unwrap();
        assert!(matches!(train(m, &pos, &[], &small_cfg()), Err(Error::Data(_))));
    }

    #[test]
    fn returns_best_epoch_parameters() {
        let set = toy_set(8, 1.0, 2);
        let refs: Vec<&Sample> = set.iter().collect();
        let cfg = TrainConfig { max_epochs: 6, ..small_cfg() };
        let (m, h) = train(init_params(&cfg.model_config(), 4).unwrap(), &refs, &refs, &cfg).unwrap();
        let best = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.epochs[h.best_epoch].val_loss, best);
        let probs = predict_all(&m, &refs).unwrap();
        assert_eq!(weighted_bce_value(&probs, &targets(&refs), cfg.w_pos), best);
    }

    #[test]
    fn early_stopping_cuts_the_run() {
        let set = toy_set(4, 0.0, 5);
        let refs: Vec<&Sample> = set.iter().collect();
        let cfg = TrainConfig { max_epochs: 50, early_stop_patience: 2, lr: 1e-9, ..small_cfg() };
        let (_, h) = train(init_params(&cfg.model_config(), 4).unwrap(), &refs, &refs, &cfg).unwrap();
        assert!(h.epochs.len() < 50);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { w_pos: 1.5, se_reduction: 7, lr: -1.0, ..TrainConfig::helsinki() };
        let fields: Vec<&str> = bad.violations().into_iter().map(|(f, _)| f).collect();
        assert_eq!(fields, vec!["lr", "w_pos", "se_reduction"]);
        assert!(TrainConfig::helsinki().validate().is_ok());
        assert!(TrainConfig::siena().validate().is_ok());
    }

    #[test]
    fn positive_weight_shifts_sensitivity() {
        // 3:1 imbalanced, overlapping classes
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = Vec::new();
        for k in 0..48 {
            let label = if k % 4 == 0 { Class::Preictal } else { Class::Interictal };
            let mut values: Vec<f32> = (0..4180).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if label == Class::Preictal {
                values[..220].iter_mut().for_each(|v| *v += 0.15);
            }
            set.push(MfccTensor { subject_id: "s".into(), label, t_start: k as f64, shape: [19, 20, 11], values });
        }
        let refs: Vec<&Sample> = set.iter().collect();
        let sens = |w_pos: f64| {
            let cfg = TrainConfig { w_pos, max_epochs: 5, batch_size: 16, ..small_cfg() };
            let (m, _) = train(init_params(&cfg.model_config(), 1).unwrap(), &refs, &[], &cfg).unwrap();
            evaluate(&m, &refs).unwrap().sensitivity
        };
        let (hi, lo) = (sens(0.999), sens(0.001));
        assert!(hi > lo, "{hi} vs {lo}");
    }
}
