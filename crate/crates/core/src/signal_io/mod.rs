//! Recording ingestion: EDF container, annotation sidecars, expert consensus
//! and a synthetic recording generator used by tests and the `synth` command.

mod annotations;
mod edf;
mod synth;

pub use annotations::{read_annotations_csv, write_annotations_csv};
pub use edf::{parse_edf, write_edf};
pub use synth::{cohort_subject_id, synth_cohort, synth_record, CohortConfig, Rhythm, SynthConfig, DEFAULT_ELECTRODES};

use std::collections::BTreeMap;

use crate::error::{bail, Error, Result};

/// A multichannel recording in microvolts, one row per electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub fs: u32,
    pub electrodes: Vec<String>,
    pub data: Vec<Vec<f64>>,
    pub start_time: f64,
}

impl Recording {
    /// Builds a recording and checks its invariants.
    pub fn new(
        subject_id: impl Into<String>,
        fs: u32,
        electrodes: Vec<String>,
        data: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let rec = Recording {
            subject_id: subject_id.into(),
            fs,
            electrodes,
            data,
            start_time: 0.0,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs == 0 {
            bail!(Parse, "sampling rate must be positive");
        }
        if self.electrodes.len() != self.data.len() {
            bail!(
                Parse,
                "{} labels for {} data rows",
                self.electrodes.len(),
                self.data.len()
            );
        }
        let mut seen = std::collections::HashSet::new();
        for label in &self.electrodes {
            if !seen.insert(label.as_str()) {
                bail!(Parse, "duplicate electrode label {label:?}");
            }
        }
        if let Some(first) = self.data.first() {
            let n = first.len();
            for (label, row) in self.electrodes.iter().zip(&self.data) {
                if row.len() != n {
                    bail!(Parse, "row {label:?} has {} samples, expected {n}", row.len());
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("electrode {label}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / f64::from(self.fs)
    }

    pub fn channel(&self, label: &str) -> Option<&[f64]> {
        self.electrodes
            .iter()
            .position(|l| l == label)
            .map(|i| self.data[i].as_slice())
    }
}

/// Seizure annotation in seconds from recording start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeizureInterval {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl SeizureInterval {
    pub fn new(onset_s: f64, offset_s: f64) -> Result<Self> {
        if !(onset_s >= 0.0 && onset_s < offset_s) || !offset_s.is_finite() {
            bail!(Parse, "invalid seizure interval [{onset_s}, {offset_s})");
        }
        Ok(SeizureInterval { onset_s, offset_s })
    }

    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Per-expert seizure annotations, keyed by expert id.
///
/// Each expert's list is kept sorted and non-overlapping; overlapping or
/// touching intervals are merged on insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    experts: BTreeMap<String, Vec<SeizureInterval>>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, expert: &str, interval: SeizureInterval) {
        let list = self.experts.entry(expert.to_string()).or_default();
        list.push(interval);
        *list = merge_sorted(std::mem::take(list));
    }

    pub fn from_experts<I, S>(experts: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<SeizureInterval>)>,
        S: Into<String>,
    {
        let mut set = AnnotationSet::new();
        for (name, list) in experts {
            set.experts.insert(name.into(), merge_sorted(list));
        }
        set
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.values().all(Vec::is_empty)
    }

    pub fn experts(&self) -> impl Iterator<Item = (&str, &[SeizureInterval])> {
        self.experts.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

fn merge_sorted(mut list: Vec<SeizureInterval>) -> Vec<SeizureInterval> {
    list.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut out: Vec<SeizureInterval> = Vec::with_capacity(list.len());
    for iv in list {
        match out.last_mut() {
            Some(last) if iv.onset_s <= last.offset_s => {
                last.offset_s = last.offset_s.max(iv.offset_s);
            }
            _ => out.push(iv),
        }
    }
    out
}

fn intersect(a: &[SeizureInterval], b: &[SeizureInterval]) -> Vec<SeizureInterval> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let lo = a[i].onset_s.max(b[j].onset_s);
        let hi = a[i].offset_s.min(b[j].offset_s);
        if lo < hi {
            out.push(SeizureInterval {
                onset_s: lo,
                offset_s: hi,
            });
        }
        if a[i].offset_s < b[j].offset_s {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Number of experts in the Helsinki annotation protocol.
pub const CONSENSUS_EXPERTS: usize = 3;

/// Seizure intervals on which all three experts agree.
///
/// Returns the maximal intervals of the intersection of every expert's
/// union of intervals, dropping pieces shorter than `min_overlap_s`. An
/// expert absent from the set annotated nothing, so fewer than three experts
/// yields an empty result.
pub fn consensus_intervals(
    ann: &AnnotationSet,
    min_overlap_s: f64,
) -> Result<Vec<SeizureInterval>> {
    if ann.n_experts() > CONSENSUS_EXPERTS {
        bail!(
            Data,
            "expected {CONSENSUS_EXPERTS} experts, found {}",
            ann.n_experts()
        );
    }
    if ann.n_experts() < CONSENSUS_EXPERTS {
        return Ok(Vec::new());
    }
    let mut lists = ann.experts.values();
    let mut acc = lists.next().cloned().unwrap_or_default();
    for list in lists {
        acc = intersect(&acc, list);
    }
    acc.retain(|iv| iv.duration() >= min_overlap_s);
    Ok(acc)
}
