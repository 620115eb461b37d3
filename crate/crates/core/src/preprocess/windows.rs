//! Interictal/preictal window selection.

use std::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::signal_io::{Recording, SeizureInterval};

/// Segment class: interictal is the negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Interictal = 0,
    Preictal = 1,
}

impl Class {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Class> {
        match v {
            0 => Some(Class::Interictal),
            1 => Some(Class::Preictal),
            _ => None,
        }
    }

    pub fn target(self) -> f64 {
        f64::from(self.as_u8())
    }
}

/// Anything carrying a class label and a subject.
pub trait Labeled {
    fn class(&self) -> Class;
    fn subject(&self) -> &str;
    fn t_start(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingPolicy {
    pub preictal_s: f64,
    pub interictal_gap_s: f64,
    pub postictal_s: f64,
    pub window_s: f64,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        TimingPolicy {
            preictal_s: 1800.0,
            interictal_gap_s: 3600.0,
            postictal_s: 1800.0,
            window_s: 5.0,
        }
    }
}

impl TimingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("preictal_s", self.preictal_s),
            ("interictal_gap_s", self.interictal_gap_s),
            ("postictal_s", self.postictal_s),
            ("window_s", self.window_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!(Config, "timing.{name} must be positive, got {v}");
            }
        }
        Ok(())
    }

    fn window_samples(&self, fs: u32) -> Result<usize> {
        let w = self.window_s * f64::from(fs);
        if (w - w.round()).abs() > 1e-9 || w < 1.0 {
            bail!(Config, "window of {} s is not a whole number of samples at {fs} Hz", self.window_s);
        }
        Ok(w.round() as usize)
    }
}

/// A 19-channel window (18 bipolar EEG rows then ECG), stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub subject_id: String,
    pub label: Class,
    pub t_start: f64,
    pub n_channels: usize,
    pub data: Vec<f32>,
}

impl LabeledSegment {
    pub fn samples_per_channel(&self) -> usize {
        self.data.len() / self.n_channels.max(1)
    }

    pub fn row(&self, c: usize) -> &[f32] {
        let n = self.samples_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.samples_per_channel().max(1))
    }
}

impl Labeled for LabeledSegment {
    fn class(&self) -> Class {
        self.label
    }
    fn subject(&self) -> &str {
        &self.subject_id
    }
    fn t_start(&self) -> f64 {
        self.t_start
    }
}

/// Window placement: class and first sample index of each window,
/// chronological within each class (preictal first).
pub fn window_plan(
    n_samples: usize,
    fs: u32,
    seizures: &[SeizureInterval],
    policy: &TimingPolicy,
) -> Result<Vec<(Class, usize)>> {
    policy.validate()?;
    let w = policy.window_samples(fs)? as i64;
    let idx = |t: f64| (t * f64::from(fs)).round() as i64;
    let n = n_samples as i64;
    let (pre, gap, post) = (
        idx(policy.preictal_s),
        idx(policy.interictal_gap_s),
        idx(policy.postictal_s),
    );
    let spans: Vec<(i64, i64)> = seizures
        .iter()
        .map(|s| (idx(s.onset_s), idx(s.offset_s)))
        .collect();

    let mut plan = Vec::new();

    // preictal: [onset - pre, onset), cut backwards from the onset and
    // truncated at every earlier seizure's postictal end
    let mut earlier_end = i64::MIN;
    for &(on, off) in &spans {
        let start = (on - pre).max(earlier_end).max(0);
        let mut windows = Vec::new();
        let mut end = on;
        while end - w >= start {
            if end <= n {
                windows.push(end - w);
            }
            end -= w;
        }
        windows.reverse();
        plan.extend(windows.into_iter().map(|s| (Class::Preictal, s as usize)));
        earlier_end = earlier_end.max(off + post);
    }

    // interictal: ends at least `gap` before the first onset and avoids every
    // [onset - pre, offset + post) block
    let limit = spans.iter().map(|&(on, _)| on - gap).min().unwrap_or(n).min(n);
    let mut blocks: Vec<(i64, i64)> = spans.iter().map(|&(on, off)| (on - pre, off + post)).collect();
    blocks.sort_unstable();
    let mut cursor = 0i64;
    let mut pieces = Vec::new();
    for &(lo, hi) in &blocks {
        if lo > cursor {
            pieces.push((cursor, lo.min(limit)));
        }
        cursor = cursor.max(hi);
    }
    pieces.push((cursor, limit));
    for (lo, hi) in pieces {
        let mut s = lo;
        while s + w <= hi {
            plan.push((Class::Interictal, s as usize));
            s += w;
        }
    }
    Ok(plan)
}

/// Cuts labeled windows out of a montaged recording.
pub fn label_windows(
    r: &Recording,
    seizures: &[SeizureInterval],
    policy: &TimingPolicy,
) -> Result<Vec<LabeledSegment>> {
    let plan = window_plan(r.n_samples(), r.fs, seizures, policy)?;
    let w = policy.window_samples(r.fs)?;
    let fs = f64::from(r.fs);
    Ok(plan
        .into_iter()
        .map(|(label, start)| {
            let mut data = Vec::with_capacity(r.data.len() * w);
            for row in &r.data {
                data.extend(row[start..start + w].iter().map(|&v| v as f32));
            }
            LabeledSegment {
                subject_id: r.subject_id.clone(),
                label,
                t_start: r.start_time + start as f64 / fs,
                n_channels: r.data.len(),
                data,
            }
        })
        .collect())
}

/// Subjects that have at least one window of each class, in key order.
pub fn select_subjects<L: Labeled>(per_subject: &BTreeMap<String, Vec<L>>) -> Vec<String> {
    per_subject
        .iter()
        .filter(|(_, segs)| {
            segs.iter().any(|s| s.class() == Class::Preictal)
                && segs.iter().any(|s| s.class() == Class::Interictal)
        })
        .map(|(id, _)| id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(a: f64, b: f64) -> SeizureInterval {
        SeizureInterval::new(a, b).unwrap()
    }

    #[test]
    fn single_late_seizure() {
        let policy = TimingPolicy::default();
        let fs = 256;
        let plan = window_plan(7200 * fs as usize, fs, &[iv(7200.0, 7260.0)], &policy).unwrap();
        let pre: Vec<usize> = plan.iter().filter(|p| p.0 == Class::Preictal).map(|p| p.1).collect();
        assert_eq!(pre.len(), 360);
        assert_eq!(pre[0], 5400 * 256);
        assert_eq!(*pre.last().unwrap(), (7200 - 5) * 256);
        let inter: Vec<usize> = plan.iter().filter(|p| p.0 == Class::Interictal).map(|p| p.1).collect();
        assert_eq!(inter.len(), 720);
        assert!(inter.iter().all(|&s| s + 5 * 256 <= 3600 * 256));
    }

    #[test]
    fn early_seizure_has_no_interictal() {
        let plan = window_plan(4000 * 256, 256, &[iv(1000.0, 1030.0)], &TimingPolicy::default()).unwrap();
        assert!(plan.iter().all(|p| p.0 == Class::Preictal));
        // preictal clipped at the recording start: [0, 1000) -> 200 windows
        assert_eq!(plan.len(), 200);
    }

    #[test]
    fn colliding_seizures_truncate_preictal() {
        let policy = TimingPolicy::default();
        let seizures = [iv(8000.0, 8060.0), iv(10000.0, 10030.0)];
        let plan = window_plan(12000, 1, &seizures, &policy).unwrap();
        let pre: Vec<usize> = plan.iter().filter(|p| p.0 == Class::Preictal).map(|p| p.1).collect();
        // second seizure: [8060 + 1800, 10000) = 140 s -> 28 windows
        assert_eq!(pre.len(), 360 + 28);
        assert_eq!(pre[360], 9860);

        let close = [iv(8000.0, 8060.0), iv(9000.0, 9030.0)];
        let plan = window_plan(12000, 1, &close, &policy).unwrap();
        assert_eq!(plan.iter().filter(|p| p.0 == Class::Preictal).count(), 360);
    }

    #[test]
    fn no_seizures_is_all_interictal() {
        let plan = window_plan(1003, 1, &[], &TimingPolicy::default()).unwrap();
        assert_eq!(plan.len(), 200);
        assert!(plan.iter().all(|p| p.0 == Class::Interictal));
    }

    #[test]
    fn rejects_fractional_windows() {
        let policy = TimingPolicy {
            window_s: 0.3,
            ..Default::default()
        };
        assert!(window_plan(100, 1, &[], &policy).is_err());
    }

    #[test]
    fn segments_copy_the_right_samples() {
        let data: Vec<Vec<f64>> = (0..19).map(|c| (0..40).map(|i| (c * 100 + i) as f64).collect()).collect();
        let labels = (0..19).map(|c| format!("ch{c}")).collect();
        let r = Recording::new("s1", 1, labels, data).unwrap();
        let policy = TimingPolicy {
            preictal_s: 10.0,
            interictal_gap_s: 15.0,
            postictal_s: 5.0,
            window_s: 5.0,
        };
        let segs = label_windows(&r, &[iv(30.0, 35.0)], &policy).unwrap();
        assert_eq!(segs.len(), 2 + 3);
        assert_eq!(segs[0].label, Class::Preictal);
        assert_eq!(segs[0].t_start, 20.0);
        assert_eq!(segs[0].row(2), &[220.0, 221.0, 222.0, 223.0, 224.0]);
        assert_eq!(segs[2].label, Class::Interictal);
        assert_eq!(segs[4].t_start, 10.0);
    }

    #[derive(Clone, Copy, PartialEq, Debug)]
    enum State {
        Pre(usize),
        Inter,
        Excluded,
    }

    fn mask(n: i64, seizures: &[(i64, i64)], p: &TimingPolicy) -> Vec<State> {
        let (pre, gap, post) = (p.preictal_s as i64, p.interictal_gap_s as i64, p.postictal_s as i64);
        let first = seizures.iter().map(|s| s.0).min();
        (0..n)
            .map(|t| {
                for (k, &(on, _)) in seizures.iter().enumerate() {
                    let after_earlier = seizures[..k].iter().all(|&(_, off)| t >= off + post);
                    if t >= on - pre && t < on && after_earlier {
                        return State::Pre(k);
                    }
                }
                let before_all = first.is_none_or(|on| t < on - gap);
                let clear = seizures.iter().all(|&(on, off)| t < on - pre || t >= off + post);
                if before_all && clear {
                    State::Inter
                } else {
                    State::Excluded
                }
            })
            .collect()
    }

    fn layouts() -> impl Strategy<Value = (i64, Vec<(i64, i64)>)> {
        (prop::collection::vec((1i64..400, 5i64..60), 0..4), 0i64..300).prop_map(|(gaps, tail)| {
            let mut t = 0;
            let mut seizures = Vec::new();
            for (g, d) in gaps {
                t += g;
                seizures.push((t, t + d));
                t += d;
            }
            (t + tail + 1, seizures)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        // Expected windows come from runs of the per-second state mask:
        // preictal runs are cut backwards from the onset, interictal runs forwards.
        #[test]
        fn plan_matches_state_mask((n, seizures) in layouts()) {
            let policy = TimingPolicy { preictal_s: 60.0, interictal_gap_s: 120.0, postictal_s: 40.0, window_s: 5.0 };
            let ivs: Vec<SeizureInterval> = seizures.iter().map(|&(a, b)| iv(a as f64, b as f64)).collect();
            let plan = window_plan(n as usize, 1, &ivs, &policy).unwrap();
            let m = mask(n, &seizures, &policy);

            let mut expected = Vec::new();
            for (k, &(on, _)) in seizures.iter().enumerate() {
                let len = (0..on).rev().take_while(|&t| m[t as usize] == State::Pre(k)).count() as i64;
                let count = len / 5;
                for j in (0..count).rev() {
                    expected.push((Class::Preictal, (on - 5 * (j + 1)) as usize));
                }
            }
            let mut t = 0;
            while t < n {
                if m[t as usize] == State::Inter {
                    let start = t;
                    while t < n && m[t as usize] == State::Inter { t += 1; }
                    let mut s = start;
                    while s + 5 <= t { expected.push((Class::Interictal, s as usize)); s += 5; }
                } else {
                    t += 1;
                }
            }
            prop_assert_eq!(&plan, &expected);

            // no window touches an excluded second, and windows within a class are disjoint
            for &(class, s) in &plan {
                for t in s..s + 5 {
                    match (class, m[t]) {
                        (Class::Preictal, State::Pre(_)) | (Class::Interictal, State::Inter) => {}
                        other => prop_assert!(false, "window at {} has state {:?}", s, other),
                    }
                }
            }
        }
    }

    #[test]
    fn subject_selection() {
        let seg = |label| LabeledSegment {
            subject_id: "x".into(),
            label,
            t_start: 0.0,
            n_channels: 1,
            data: vec![0.0],
        };
        let mut map = BTreeMap::new();
        map.insert("only_pre".to_string(), vec![seg(Class::Preictal), seg(Class::Preictal)]);
        map.insert("both".to_string(), vec![seg(Class::Preictal), seg(Class::Interictal)]);
        map.insert("empty".to_string(), vec![]);
        assert_eq!(select_subjects(&map), vec!["both".to_string()]);
    }

    proptest! {
        #[test]
        fn selection_matches_predicate(classes in prop::collection::vec(prop::collection::vec(0u8..2, 0..6), 0..8)) {
            let mut map = BTreeMap::new();
            for (i, cs) in classes.iter().enumerate() {
                let segs: Vec<LabeledSegment> = cs.iter().map(|&c| LabeledSegment {
                    subject_id: format!("s{i}"), label: Class::from_u8(c).unwrap(), t_start: 0.0, n_channels: 1, data: vec![0.0],
                }).collect();
                map.insert(format!("s{i:02}"), segs);
            }
            let expected: Vec<String> = map.iter()
                .filter(|(_, s)| s.iter().map(|x| x.label as u8).sum::<u8>() > 0 && s.iter().any(|x| x.label as u8 == 0))
                .map(|(k, _)| k.clone()).collect();
            prop_assert_eq!(select_subjects(&map), expected);
        }
    }
}
