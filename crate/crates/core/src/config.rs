//! Pipeline configuration: a TOML document layered over per-profile
//! defaults, with dotted-key overrides.
//!
//! ```toml
//! profile = "synthetic"   # helsinki | siena | synthetic
//! seed = 7
//!
//! [paths]
//! raw_dir = "data/raw"
//!
//! [train]
//! lr = 0.002
//! scheduler = { patience = 25, factor = 0.98, min_lr = 1e-7 }
//! ```
//!
//! Every violation is reported with its dotted field path; one bad field
//! does not hide the others.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::mfcc::MfccConfig;
use crate::preprocess::{MontageConfig, PreprocessConfig, TimingPolicy};
use crate::signal_io::CohortConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Helsinki,
    Siena,
    Synthetic,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "helsinki" => Some(Profile::Helsinki),
            "siena" => Some(Profile::Siena),
            "synthetic" => Some(Profile::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub raw_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub runs_dir: PathBuf,
    /// Run directory of a `train-lopo` run whose models `finetune` starts from.
    pub pretrained_dir: PathBuf,
    /// Run directory of an `explain` run that `scalp-plot` renders.
    pub explain_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            raw_dir: "data/raw".into(),
            cache_dir: "data/cache".into(),
            runs_dir: "runs".into(),
            pretrained_dir: PathBuf::new(),
            explain_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSection {
    /// Sampling rate the raw recordings are expected to have.
    pub fs: u32,
    pub bandpass_lo: f64,
    pub bandpass_hi: f64,
    /// Mains frequency to notch out; 0 disables the notch.
    pub notch_hz: f64,
    pub filter_order: usize,
    pub downsample: usize,
    pub preictal_s: f64,
    pub interictal_gap_s: f64,
    pub postictal_s: f64,
    pub window_s: f64,
    /// Shortest three-expert overlap accepted as a seizure.
    pub min_overlap_s: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            fs: 256,
            bandpass_lo: 0.1,
            bandpass_hi: 70.0,
            notch_hz: 50.0,
            filter_order: 4,
            downsample: 1,
            preictal_s: 1800.0,
            interictal_gap_s: 3600.0,
            postictal_s: 1800.0,
            window_s: 5.0,
            min_overlap_s: 10.0,
        }
    }
}

impl PreprocessSection {
    pub fn to_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            bandpass_hz: (self.bandpass_lo, self.bandpass_hi),
            notch_hz: (self.notch_hz > 0.0).then_some(self.notch_hz),
            filter_order: self.filter_order,
            downsample: self.downsample,
            montage: MontageConfig::default(),
            timing: TimingPolicy {
                preictal_s: self.preictal_s,
                interictal_gap_s: self.interictal_gap_s,
                postictal_s: self.postictal_s,
                window_s: self.window_s,
            },
        }
    }

    /// Sampling rate after decimation, which the features see.
    pub fn feature_fs(&self) -> f64 {
        f64::from(self.fs) / self.downsample.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub folds: usize,
    pub trials: usize,
    /// Fine-tuning segments per class, one run per entry.
    pub finetune_sizes: Vec<usize>,
    pub finetune_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { folds: 10, trials: 3, finetune_sizes: vec![12, 60], finetune_epochs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: Paths,
    pub preprocess: PreprocessSection,
    pub mfcc: MfccConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub explain: ExplainConfig,
    pub synth: CohortConfig,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = PipelineConfig {
            profile,
            seed: 0,
            paths: Paths::default(),
            preprocess: PreprocessSection::default(),
            mfcc: MfccConfig::default(),
            train: TrainConfig::helsinki(),
            eval: EvalSection::default(),
            explain: ExplainConfig::default(),
            synth: CohortConfig::default(),
        };
        match profile {
            Profile::Helsinki => base,
            Profile::Siena => PipelineConfig {
                preprocess: PreprocessSection { fs: 512, downsample: 2, preictal_s: 3600.0, ..base.preprocess },
                train: TrainConfig::siena(),
                ..base
            },
            Profile::Synthetic => PipelineConfig {
                preprocess: PreprocessSection {
                    preictal_s: 120.0,
                    interictal_gap_s: 60.0,
                    postictal_s: 30.0,
                    ..base.preprocess
                },
                train: TrainConfig {
                    lr: 2e-3,
                    batch_size: 32,
                    dropout: 0.1,
                    max_epochs: 15,
                    early_stop_patience: 5,
                    ..TrainConfig::helsinki()
                },
                eval: EvalSection { trials: 1, ..base.eval },
                explain: ExplainConfig { n_permutations: 20, ..base.explain },
                ..base
            },
        }
    }

    /// Training settings carrying the pipeline seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig { seed: self.seed, fs: self.preprocess.fs, ..self.synth.clone() }
    }

    /// Cross-field and range checks as `(field path, message)` pairs.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = Vec::new();
        let p = &self.preprocess;
        let nyq = f64::from(p.fs) / 2.0;
        let mut push = |f: &str, m: String| v.push((f.to_string(), m));
        if p.fs == 0 {
            push("preprocess.fs", "must be positive".into());
        }
        if !(p.bandpass_lo > 0.0 && p.bandpass_lo < p.bandpass_hi) {
            push("preprocess.bandpass_lo", format!("must lie in (0, bandpass_hi), got {}", p.bandpass_lo));
        }
        if !(p.bandpass_hi < nyq) {
            push("preprocess.bandpass_hi", format!("{} must be below Nyquist {nyq}", p.bandpass_hi));
        }
        if p.notch_hz < 0.0 || (p.notch_hz > 0.0 && !(p.notch_hz > 1.0 && p.notch_hz + 1.0 < nyq)) {
            push("preprocess.notch_hz", format!("{} must be 0 or lie in (1, Nyquist - 1)", p.notch_hz));
        }
        if p.filter_order == 0 || !p.filter_order.is_multiple_of(2) {
            push("preprocess.filter_order", format!("must be a positive even number, got {}", p.filter_order));
        }
        if p.downsample == 0 || !(p.fs as usize).is_multiple_of(p.downsample.max(1)) {
            push("preprocess.downsample", format!("{} must divide fs {}", p.downsample, p.fs));
        }
        for (f, x) in [
            ("preprocess.preictal_s", p.preictal_s),
            ("preprocess.interictal_gap_s", p.interictal_gap_s),
            ("preprocess.postictal_s", p.postictal_s),
            ("preprocess.window_s", p.window_s),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                push(f, format!("must be positive, got {x}"));
            }
        }
        let w = p.window_s * p.feature_fs();
        if (w - w.round()).abs() > 1e-9 {
            push("preprocess.window_s", format!("{} s is not a whole number of samples", p.window_s));
        }
        if p.min_overlap_s < 0.0 {
            push("preprocess.min_overlap_s", "must be non-negative".into());
        }
        for msg in self.mfcc.violations(p.feature_fs()) {
            let field = msg.split_whitespace().next().unwrap_or("").to_string();
            push(&format!("mfcc.{field}"), msg);
        }
        for (f, msg) in self.train.violations() {
            push(&format!("train.{f}"), msg);
        }
        let e = &self.eval;
        if e.folds < 2 {
            push("eval.folds", format!("must be at least 2, got {}", e.folds));
        }
        if e.trials == 0 {
            push("eval.trials", "must be positive".into());
        }
        if e.finetune_sizes.contains(&0) {
            push("eval.finetune_sizes", "entries must be positive".into());
        }
        if e.finetune_epochs == 0 {
            push("eval.finetune_epochs", "must be positive".into());
        }
        for (f, msg) in self.explain.violations() {
            push(&format!("explain.{f}"), msg);
        }
        let s = &self.synth;
        if s.n_subjects == 0 {
            push("synth.n_subjects", "must be positive".into());
        }
        if !(s.onset_s > 0.0 && s.seizure_s > 0.0 && s.onset_s + s.seizure_s <= s.duration_s) {
            push("synth.onset_s", "seizure must fit inside duration_s".into());
        }
        v
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Reports keys of `user` that are unknown or of the wrong type relative
/// to `defaults`, widening integers where floats are expected.
fn check_types(user: &mut Table, defaults: &Table, prefix: &str, errors: &mut Vec<(String, String)>) {
    for (key, value) in user.iter_mut() {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(expected) = defaults.get(key) else {
            errors.push((path, "unknown field".into()));
            continue;
        };
        match (expected, &mut *value) {
            (Value::Table(d), Value::Table(u)) => check_types(u, d, &path, errors),
            (Value::Float(_), Value::Integer(i)) => *value = Value::Float(*i as f64),
            (Value::Array(d), Value::Array(u)) => {
                if let Some(first) = d.first() {
                    for (i, item) in u.iter_mut().enumerate() {
                        if let (Value::Float(_), Value::Integer(n)) = (first, &*item) {
                            *item = Value::Float(*n as f64);
                        } else if type_name(first) != type_name(item) {
                            errors.push((format!("{path}[{i}]"), format!("expected {}, got {}", type_name(first), type_name(item))));
                        }
                    }
                }
            }
            (d, u) if type_name(d) != type_name(u) => {
                errors.push((path, format!("expected {}, got {}", type_name(d), type_name(u))));
            }
            _ => {}
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(t) = entry else {
            return Err(Error::Config(format!("{key}: {part} is not a table")));
        };
        cur = t;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn fail(errors: Vec<(String, String)>) -> Error {
    let msg: Vec<String> = errors.into_iter().map(|(f, m)| format!("{f}: {m}")).collect();
    Error::Config(msg.join("; "))
}

/// Parses `text`, applies `overrides` (`a.b`, `value`) and fills every
/// missing field from the selected profile.
pub fn load_config(text: &str, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut user: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("TOML: {}", e.message())))?;
    for (k, v) in overrides {
        apply_override(&mut user, k, v)?;
    }
    let mut errors = Vec::new();
    let profile = match user.get("profile") {
        None => Profile::Helsinki,
        Some(Value::String(s)) => Profile::parse(s).unwrap_or_else(|| {
            errors.push(("profile".into(), format!("unknown profile {s:?}; expected helsinki, siena or synthetic")));
            Profile::Helsinki
        }),
        Some(other) => {
            errors.push(("profile".into(), format!("expected string, got {}", type_name(other))));
            Profile::Helsinki
        }
    };
    user.remove("profile");
    let defaults = PipelineConfig::for_profile(profile);
    let Value::Table(mut merged) = Value::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))? else {
        unreachable!("a struct serializes to a table");
    };
    check_types(&mut user, &merged, "", &mut errors);
    if !errors.is_empty() {
        return Err(fail(errors));
    }
    merge(&mut merged, user);
    let cfg: PipelineConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(fail(v))
    }
}

/// [`load_config`] without overrides.
pub fn validate_config(text: &str) -> Result<PipelineConfig> {
    load_config(text, &[])
}

/// The configuration as a complete TOML document.
pub fn to_toml(cfg: &PipelineConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}
