//! Evaluation protocols: stratified k-fold CV over segments, leave one
//! subject out, and few-shot fine-tuning on a held-out subject.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, train, History, MetricStats, Metrics, Sample, TrainConfig};
use crate::error::{bail, Result};
use crate::model::{init_params, SeizurePredictor};
use crate::preprocess::{Class, Labeled};

/// SplitMix64 finalizer over `base + tag`; spreads per-fold and per-trial seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base.wrapping_add(tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `0..labels.len()` into `k` folds. Each class is shuffled and dealt
/// round-robin, positives first and negatives continuing from the next
/// fold, so fold sizes and per-class counts each differ by at most one.
/// With fewer than `k` members in a class the split is unstratified.
pub fn stratified_folds(labels: &[Class], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || labels.len() < k {
        bail!(Data, "cannot make {k} folds from {} segments", labels.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Class::Preictal).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Class::Interictal).collect();
    let order: Vec<usize> = if pos.len() < k || neg.len() < k {
        warn!("class counts {}/{} below {k}; folds are not stratified", pos.len(), neg.len());
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        all
    } else {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.into_iter().chain(neg).collect()
    };
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Moves a stratified `frac` of `idx` into a validation list.
fn holdout(idx: &[usize], labels: &[Class], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if frac <= 0.0 {
        return (idx.to_vec(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for class in [Class::Preictal, Class::Interictal] {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * frac).round() as usize).min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

fn pick<'a>(data: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &data[i]).collect()
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub trial: usize,
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub metrics: Metrics,
    pub history: History,
    pub model: SeizurePredictor,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Mean and spread over the folds of each trial.
    pub per_trial: Vec<MetricStats>,
    /// Mean of the trial means, and population std across trial means.
    pub summary: MetricStats,
    /// Mean and population std across every fold of every trial.
    pub across_folds: MetricStats,
}

/// `k`-fold cross-validation repeated over `trials`, each trial with its
/// own fold assignment and initialization seeds.
pub fn kfold_cv(dataset: &[Sample], k: usize, trials: usize, cfg: &TrainConfig) -> Result<CvReport> {
    cfg.validate()?;
    if trials == 0 {
        bail!(Config, "trials must be positive");
    }
    let labels: Vec<Class> = dataset.iter().map(|s| s.class()).collect();
    let mut folds = Vec::new();
    let mut per_trial = Vec::new();
    for trial in 0..trials {
        let trial_seed = derive_seed(cfg.seed, trial as u64);
        let split = stratified_folds(&labels, k, trial_seed)?;
        let mut rows = Vec::new();
        for (f, test_idx) in split.iter().enumerate() {
            let rest: Vec<usize> = split.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
            let fold_seed = derive_seed(trial_seed, 1 + f as u64);
            let (fit, val) = holdout(&rest, &labels, cfg.val_fraction, fold_seed);
            let run_cfg = TrainConfig { seed: derive_seed(fold_seed, 1), ..cfg.clone() };
            let model = init_params(&cfg.model_config(), derive_seed(fold_seed, 2))?;
            let (model, history) = train(model, &pick(dataset, &fit), &pick(dataset, &val), &run_cfg)?;
            let metrics = evaluate(&model, &pick(dataset, test_idx))?;
            info!("trial {trial} fold {f}: f1 {:.4} acc {:.4}", metrics.f1, metrics.accuracy);
            rows.push(metrics.as_array());
            folds.push(FoldResult { trial, fold: f, test_indices: test_idx.clone(), metrics, history, model });
        }
        per_trial.push(MetricStats::of(&rows));
    }
    let trial_means: Vec<[f64; 5]> = per_trial.iter().map(|s| s.mean).collect();
    let all: Vec<[f64; 5]> = folds.iter().map(|f| f.metrics.as_array()).collect();
    Ok(CvReport {
        summary: MetricStats::of(&trial_means),
        across_folds: MetricStats::of(&all),
        per_trial,
        folds,
    })
}

#[derive(Debug, Clone)]
pub struct LopoRound {
    pub subject: String,
    pub train_subjects: BTreeSet<String>,
    pub n_test: usize,
    pub metrics: Metrics,
    /// Model trained without `subject`, the starting point for fine-tuning.
    pub model: SeizurePredictor,
    pub history: History,
}

#[derive(Debug, Clone)]
pub struct LopoReport {
    pub rounds: Vec<LopoRound>,
    pub summary: MetricStats,
}

pub fn subjects_of(dataset: &[Sample]) -> Vec<String> {
    dataset.iter().map(|s| s.subject().to_string()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// One round per subject: train on every other subject, test on this one.
pub fn lopo(dataset: &[Sample], cfg: &TrainConfig) -> Result<LopoReport> {
    cfg.validate()?;
    let subjects = subjects_of(dataset);
    if subjects.len() < 2 {
        bail!(Data, "leave-one-subject-out needs at least 2 subjects, got {}", subjects.len());
    }
    let labels: Vec<Class> = dataset.iter().map(|s| s.class()).collect();
    let mut rounds = Vec::new();
    for (r, subject) in subjects.iter().enumerate() {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&i| dataset[i].subject() == subject);
        let train_subjects: BTreeSet<String> = train_idx.iter().map(|&i| dataset[i].subject().to_string()).collect();
        debug_assert!(!train_subjects.contains(subject));
        let round_seed = derive_seed(cfg.seed, r as u64);
        let (fit, val) = holdout(&train_idx, &labels, cfg.val_fraction, round_seed);
        let run_cfg = TrainConfig { seed: derive_seed(round_seed, 1), ..cfg.clone() };
        let model = init_params(&cfg.model_config(), derive_seed(round_seed, 2))?;
        let (model, history) = train(model, &pick(dataset, &fit), &pick(dataset, &val), &run_cfg)?;
        let metrics = evaluate(&model, &pick(dataset, &test_idx))?;
        info!("held out {subject}: f1 {:.4} acc {:.4}", metrics.f1, metrics.accuracy);
        rounds.push(LopoRound { subject: subject.clone(), train_subjects, n_test: test_idx.len(), metrics, model, history });
    }
    let rows: Vec<[f64; 5]> = rounds.iter().map(|r| r.metrics.as_array()).collect();
    Ok(LopoReport { summary: MetricStats::of(&rows), rounds })
}

/// Indices into one subject's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSplit {
    pub finetune: Vec<usize>,
    pub eval: Vec<usize>,
}

/// The first `n_per_class` preictal segments in time order plus
/// `n_per_class` seeded-random interictal segments; everything else is
/// kept for evaluation.
pub fn finetune_split(samples: &[&Sample], n_per_class: usize, seed: u64) -> Result<FinetuneSplit> {
    let mut pre: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == Class::Preictal).collect();
    let mut inter: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == Class::Interictal).collect();
    let subject = samples.first().map(|s| s.subject().to_string()).unwrap_or_default();
    for (name, have) in [("preictal", pre.len()), ("interictal", inter.len())] {
        if have < n_per_class {
            bail!(Data, "subject {subject}: {have} {name} segments, fine-tuning needs {n_per_class}");
        }
    }
    pre.sort_by(|&a, &b| samples[a].t_start().total_cmp(&samples[b].t_start()).then(a.cmp(&b)));
    inter.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut finetune: Vec<usize> = pre[..n_per_class].iter().chain(&inter[..n_per_class]).copied().collect();
    finetune.sort_unstable();
    let chosen: BTreeSet<usize> = finetune.iter().copied().collect();
    let eval = (0..samples.len()).filter(|i| !chosen.contains(i)).collect();
    Ok(FinetuneSplit { finetune, eval })
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub split: FinetuneSplit,
    /// Pretrained model scored on the evaluation part of the split.
    pub before: Metrics,
    pub after: Metrics,
    pub model: SeizurePredictor,
    pub history: History,
}

/// Continues training every layer of `pretrained` on the fine-tuning part
/// of the held-out subject and scores both models on the rest. The
/// fine-tuning set doubles as the validation set.
pub fn finetune(
    pretrained: &SeizurePredictor,
    held_out: &[&Sample],
    n_per_class: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneResult> {
    let split = finetune_split(held_out, n_per_class, derive_seed(cfg.seed, 7))?;
    let ft: Vec<&Sample> = split.finetune.iter().map(|&i| held_out[i]).collect();
    let ev: Vec<&Sample> = split.eval.iter().map(|&i| held_out[i]).collect();
    if ev.is_empty() {
        bail!(Data, "no segments left to evaluate after selecting {} for fine-tuning", ft.len());
    }
    let before = evaluate(pretrained, &ev)?;
    let (model, history) = train(pretrained.clone(), &ft, &ft, cfg)?;
    let after = evaluate(&model, &ev)?;
    Ok(FinetuneResult { split, before, after, model, history })
}
