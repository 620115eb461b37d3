//! Shapley attributions for the predictor, per-channel importance and
//! scalp maps.

mod scalp;
mod shapley;

pub use scalp::{edge_opacity, render_scalp_svg, ScalpMap, ELECTRODE_POSITIONS};
pub use shapley::{shapley_sampling, CoalitionValue, FnGame, ShapleyEstimate};

use std::collections::BTreeMap;

use log::warn;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mfcc::{MfccTensor, MFCC_COEFFS, MFCC_FRAMES, MFCC_SHAPE};
use crate::model::SeizurePredictor;
use crate::preprocess::{Class, Labeled, MontageConfig, MONTAGE_PAIRS, SEGMENT_CHANNELS};
use crate::tensor::Tensor;
use crate::training::{derive_seed, Sample};

/// Per-channel scores with a spread below this are treated as constant.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Withheld segments per class and subject.
    pub n_per_class: usize,
    /// Share of the remaining segments used for retraining.
    pub train_fraction: f64,
    /// Window length, used to tell one seizure's preictal run from the next.
    pub window_s: f64,
    pub n_permutations: usize,
    /// Leading preictal attributions averaged into the importance map.
    pub n_average: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { n_per_class: 6, train_fraction: 0.7, window_s: 5.0, n_permutations: 100, n_average: 3 }
    }
}

impl ExplainConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if self.n_per_class == 0 {
            v.push(("n_per_class", "must be positive".to_string()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            v.push(("train_fraction", format!("must lie in (0, 1), got {}", self.train_fraction)));
        }
        if !(self.window_s > 0.0) {
            v.push(("window_s", format!("must be positive, got {}", self.window_s)));
        }
        if self.n_permutations == 0 {
            v.push(("n_permutations", "must be at least 1".to_string()));
        }
        if self.n_average == 0 || self.n_average > self.n_per_class {
            v.push(("n_average", format!("must lie in 1..={}, got {}", self.n_per_class, self.n_average)));
        }
        v
    }
}

/// Indices into the dataset passed to [`build_explain_testset`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExplainSplit {
    /// Withheld segments per subject: preictal in time order, then interictal.
    pub test: BTreeMap<String, Vec<usize>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub skipped: Vec<String>,
}

impl ExplainSplit {
    pub fn test_len(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }
}

/// Preictal indices of the first seizure with at least `need` windows, in
/// time order. Windows further apart than 1.5 window lengths belong to
/// different seizures.
fn earliest_preictal_run(dataset: &[Sample], idx: &[usize], window_s: f64, need: usize) -> Option<Vec<usize>> {
    let mut pre: Vec<usize> = idx.iter().copied().filter(|&i| dataset[i].class() == Class::Preictal).collect();
    pre.sort_by(|&a, &b| dataset[a].t_start.total_cmp(&dataset[b].t_start));
    let mut run: Vec<usize> = Vec::new();
    for i in pre {
        if let Some(&last) = run.last() {
            if dataset[i].t_start - dataset[last].t_start > 1.5 * window_s {
                if run.len() >= need {
                    break;
                }
                run.clear();
            }
        }
        run.push(i);
    }
    (run.len() >= need).then(|| run[..need].to_vec())
}

/// Withholds, per subject, the first `n_per_class` preictal windows of the
/// earliest seizure that has that many plus `n_per_class` seeded-random
/// interictal windows, then splits the rest of the subject's windows
/// `train_fraction` / remainder within each class. Subjects without enough
/// windows are skipped.
pub fn build_explain_testset(dataset: &[Sample], cfg: &ExplainConfig, seed: u64) -> Result<ExplainSplit> {
    if let Some((field, msg)) = cfg.violations().into_iter().next() {
        bail!(Config, "explain.{field}: {msg}");
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_subject.entry(s.subject()).or_default().push(i);
    }
    let mut out = ExplainSplit::default();
    for (k, (subject, idx)) in by_subject.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let mut inter: Vec<usize> = idx.iter().copied().filter(|&i| dataset[i].class() == Class::Interictal).collect();
        let pre = earliest_preictal_run(dataset, &idx, cfg.window_s, cfg.n_per_class);
        let Some(pre) = pre.filter(|_| inter.len() >= cfg.n_per_class) else {
            warn!("subject {subject}: fewer than {} usable segments per class, skipped", cfg.n_per_class);
            out.skipped.push(subject.to_string());
            continue;
        };
        inter.shuffle(&mut rng);
        let test: Vec<usize> = pre.iter().chain(&inter[..cfg.n_per_class]).copied().collect();
        for class in [Class::Preictal, Class::Interictal] {
            let mut rest: Vec<usize> =
                idx.iter().copied().filter(|i| dataset[*i].class() == class && !test.contains(i)).collect();
            rest.shuffle(&mut rng);
            let n_train = (rest.len() as f64 * cfg.train_fraction).round() as usize;
            out.train.extend_from_slice(&rest[..n_train]);
            out.val.extend_from_slice(&rest[n_train..]);
        }
        out.test.insert(subject.to_string(), test);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    Ok(out)
}

/// The predictor as a game over (channel, frame) players: a player in the
/// coalition contributes its 20 coefficients from `x`, the others come
/// from `baseline`.
pub struct ModelGame<'a> {
    pub model: &'a SeizurePredictor,
    pub x: Vec<f64>,
    pub baseline: Vec<f64>,
}

pub const N_PLAYERS: usize = SEGMENT_CHANNELS * MFCC_FRAMES;

fn player_of(c: usize, t: usize) -> usize {
    c * MFCC_FRAMES + t
}

impl CoalitionValue for ModelGame<'_> {
    fn n_players(&self) -> usize {
        N_PLAYERS
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        let per = self.x.len();
        let mut data = Vec::with_capacity(per * coalitions.len());
        for mask in coalitions {
            for c in 0..SEGMENT_CHANNELS {
                for k in 0..MFCC_COEFFS {
                    let base = (c * MFCC_COEFFS + k) * MFCC_FRAMES;
                    for t in 0..MFCC_FRAMES {
                        let src = if mask[player_of(c, t)] { &self.x } else { &self.baseline };
                        data.push(src[base + t]);
                    }
                }
            }
        }
        let mut shape = vec![coalitions.len()];
        shape.extend_from_slice(&MFCC_SHAPE);
        self.model.predict(Tensor::new(shape, data)?)
    }
}

/// Signed attributions with the shape of the explained feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTensor {
    pub subject_id: String,
    pub t_start: f64,
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub baseline: String,
    pub n_permutations: usize,
    pub seed: u64,
    /// Model output on the explained input and on the baseline.
    pub f_x: f64,
    pub f_baseline: f64,
    /// Standard error of the summed attribution.
    pub total_std_err: f64,
}

impl AttributionTensor {
    pub fn channel_slice(&self, c: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.values[c * n..(c + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Attributes the predicted preictal probability of `x` against an
/// all-zero baseline. Each (channel, frame) player's value is spread
/// evenly over its coefficients.
pub fn explain_segment<T: Float>(
    model: &SeizurePredictor,
    x: &MfccTensor<T>,
    n_perm: usize,
    seed: u64,
) -> Result<AttributionTensor> {
    if x.shape != MFCC_SHAPE {
        bail!(Shape, "expected feature shape {MFCC_SHAPE:?}, got {:?}", x.shape);
    }
    let xs: Vec<f64> = x.values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let game = ModelGame { model, baseline: vec![0.0; xs.len()], x: xs };
    let est = shapley_sampling(&game, n_perm, seed)?;
    let mut values = vec![0.0; game.x.len()];
    for c in 0..SEGMENT_CHANNELS {
        for k in 0..MFCC_COEFFS {
            for t in 0..MFCC_FRAMES {
                values[(c * MFCC_COEFFS + k) * MFCC_FRAMES + t] = est.values[player_of(c, t)] / MFCC_COEFFS as f64;
            }
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "attribution of {} at {} s", x.subject_id, x.t_start);
    }
    Ok(AttributionTensor {
        subject_id: x.subject_id.clone(),
        t_start: x.t_start,
        shape: MFCC_SHAPE,
        values,
        baseline: "zeros".into(),
        n_permutations: n_perm,
        seed,
        f_x: est.v_full,
        f_baseline: est.v_empty,
        total_std_err: est.total_std_err,
    })
}

/// Raw per-channel scores (all 19 rows) and the processed EEG scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance {
    pub subject: String,
    pub raw: Vec<f64>,
    pub processed: Vec<f64>,
}

/// Mean over population standard deviation, or 0 when the spread is
/// below [`SIGMA_FLOOR`].
pub fn channel_score(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < SIGMA_FLOOR {
        0.0
    } else {
        mean / sd
    }
}

/// Negatives to zero, the trailing ECG row dropped, then min-max scaled
/// to [0, 1]. When every remaining value is equal, positives map to 1
/// and zeros stay 0.
pub fn postprocess_importance(raw: &[f64]) -> Vec<f64> {
    let eeg: Vec<f64> = raw.iter().map(|v| v.max(0.0)).take(raw.len().min(MONTAGE_PAIRS)).collect();
    let lo = eeg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eeg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        eeg.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        eeg.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Averages the first `n_average` attribution tensors, scores each
/// channel slice and postprocesses the scores.
pub fn channel_importance(attrs: &[AttributionTensor], subject: &str, n_average: usize) -> Result<ChannelImportance> {
    if n_average == 0 || attrs.len() < n_average {
        bail!(Data, "subject {subject}: {} preictal attributions, need {n_average}", attrs.len());
    }
    let first = &attrs[..n_average];
    let shape = first[0].shape;
    if first.iter().any(|a| a.shape != shape) {
        bail!(Shape, "attribution tensors differ in shape");
    }
    let mut mean = vec![0.0; first[0].values.len()];
    for a in first {
        for (m, v) in mean.iter_mut().zip(&a.values) {
            *m += v / n_average as f64;
        }
    }
    let per = shape[1] * shape[2];
    let raw: Vec<f64> = mean.chunks(per).map(channel_score).collect();
    Ok(ChannelImportance { subject: subject.to_string(), processed: postprocess_importance(&raw), raw })
}

/// `channel_name,raw_I,processed`, one row per montage channel; the ECG
/// row has no processed value.
pub fn importance_csv(imp: &ChannelImportance, montage: &MontageConfig) -> String {
    let mut out = String::from("channel_name,raw_I,processed\n");
    for (c, name) in montage.channel_names().iter().enumerate() {
        let raw = imp.raw.get(c).map(|v| format!("{v:?}")).unwrap_or_default();
        let processed = imp.processed.get(c).map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!("{name},{raw},{processed}\n"));
    }
    out
}

/// Reads back the output of [`importance_csv`].
pub fn read_importance_csv(text: &str, subject: &str) -> Result<ChannelImportance> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("channel_name,raw_I,processed") {
        bail!(Parse, "importance table for {subject}: unexpected header");
    }
    let (mut raw, mut processed) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| crate::Error::Parse(format!("importance row {}: bad number {s:?}", n + 2)));
        if cols.len() != 3 {
            bail!(Parse, "importance row {}: expected 3 columns", n + 2);
        }
        raw.push(num(cols[1])?);
        if !cols[2].trim().is_empty() {
            processed.push(num(cols[2])?);
        }
    }
    Ok(ChannelImportance { subject: subject.to_string(), raw, processed })
}
