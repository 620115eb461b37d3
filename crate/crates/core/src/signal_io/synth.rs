//! Deterministic synthetic recordings.
//!
//! Background activity is leaky-integrated white noise (a 1/f-like
//! spectrum) scaled to `background_uv` RMS. Inside each seizure a 2-4 Hz
//! burst with peak amplitude five times the background RMS is added. Optional
//! rhythms mark the preictal span before each onset and the remaining
//! non-seizure time, which gives classifiers a class difference to learn.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, Recording, SeizureInterval};
use crate::error::{bail, Result};

/// Electrode labels assigned in order; the first ten cover the reduced
/// montage plus ECG.
pub const DEFAULT_ELECTRODES: [&str; 21] = [
    "Fp1", "Fp2", "T3", "T4", "C3", "C4", "Cz", "O1", "O2", "ECG", "F3", "F4", "F7", "F8", "P3",
    "P4", "T5", "T6", "Fz", "Pz", "A1",
];

const BURST_GAIN: f64 = 5.0;
const AR_COEF: f64 = 0.95;

/// A sinusoidal rhythm; `amplitude` is a multiple of the background RMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rhythm {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subject_id: String,
    pub fs: u32,
    pub n_electrodes: usize,
    pub duration_s: f64,
    pub seizure_intervals: Vec<SeizureInterval>,
    pub seed: u64,
    pub background_uv: f64,
    /// Rhythm added during `[onset - lead_s, onset)` of every seizure.
    pub preictal_rhythm: Option<(f64, Rhythm)>,
    /// Rhythm added everywhere outside seizures and preictal spans.
    pub interictal_rhythm: Option<Rhythm>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subject_id: "synth".into(),
            fs: 256,
            n_electrodes: DEFAULT_ELECTRODES.len(),
            duration_s: 600.0,
            seizure_intervals: Vec::new(),
            seed: 0,
            background_uv: 10.0,
            preictal_rhythm: None,
            interictal_rhythm: None,
        }
    }
}

fn label(i: usize) -> String {
    DEFAULT_ELECTRODES
        .get(i)
        .map_or_else(|| format!("X{}", i + 1), |s| s.to_string())
}

fn background(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Vec<f64> {
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            state = AR_COEF * state + w;
            state + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let actual = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    let scale = if actual > 0.0 { rms / actual } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

fn ecg(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut beat = rng.random_range(0.0..0.4);
    let width = 0.012 * fs;
    while beat * fs < n as f64 {
        let centre = beat * fs;
        let lo = (centre - 5.0 * width).max(0.0) as usize;
        let hi = ((centre + 5.0 * width) as usize).min(n);
        for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let d = (i as f64 - centre) / width;
            *v += 400.0 * (-0.5 * d * d).exp();
        }
        beat += 0.45 + rng.random_range(-0.03..0.03);
    }
    out
}

fn add_rhythm(
    row: &mut [f64],
    fs: f64,
    span: (usize, usize),
    freq: f64,
    peak: f64,
    phase: f64,
) {
    let (lo, hi) = (span.0.min(row.len()), span.1.min(row.len()));
    for (i, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
        *v += peak * (2.0 * PI * freq * i as f64 / fs + phase).sin();
    }
}

/// Generates a recording and three-expert annotations for `cfg`.
///
/// Expert "1" annotates the configured intervals exactly; experts "2" and
/// "3" widen them by up to two seconds, so the consensus equals the
/// configured intervals.
pub fn synth_record(cfg: &SynthConfig) -> Result<(Recording, AnnotationSet)> {
    for iv in &cfg.seizure_intervals {
        if iv.offset_s > cfg.duration_s {
            bail!(Config, "seizure ending at {} s exceeds duration {} s", iv.offset_s, cfg.duration_s);
        }
    }
    let fs = f64::from(cfg.fs);
    let n = (cfg.duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let to_idx = |t: f64| (t * fs).round().max(0.0) as usize;

    let electrodes: Vec<String> = (0..cfg.n_electrodes).map(label).collect();
    let mut data = Vec::with_capacity(cfg.n_electrodes);
    let seizure_freqs: Vec<f64> = cfg
        .seizure_intervals
        .iter()
        .map(|_| rng.random_range(2.0..4.0))
        .collect();

    // marker spans: preictal spans and their complement outside seizures
    let mut preictal_spans = Vec::new();
    if let Some((lead, _)) = cfg.preictal_rhythm {
        for iv in &cfg.seizure_intervals {
            preictal_spans.push((to_idx((iv.onset_s - lead).max(0.0)), to_idx(iv.onset_s)));
        }
    }
    let mut busy: Vec<(usize, usize)> = cfg
        .seizure_intervals
        .iter()
        .map(|iv| (to_idx(iv.onset_s), to_idx(iv.offset_s)))
        .chain(preictal_spans.iter().copied())
        .collect();
    busy.sort_unstable();
    let mut quiet = Vec::new();
    let mut cursor = 0;
    for &(lo, hi) in &busy {
        if lo > cursor {
            quiet.push((cursor, lo));
        }
        cursor = cursor.max(hi);
    }
    if cursor < n {
        quiet.push((cursor, n));
    }

    for name in &electrodes {
        if name == "ECG" {
            data.push(ecg(&mut rng, n, fs));
            continue;
        }
        let mut row = background(&mut rng, n, cfg.background_uv);
        let gain: f64 = rng.random_range(0.5..1.5);
        for (iv, &f) in cfg.seizure_intervals.iter().zip(&seizure_freqs) {
            let phase = rng.random_range(0.0..2.0 * PI);
            let span = (to_idx(iv.onset_s), to_idx(iv.offset_s));
            add_rhythm(&mut row, fs, span, f, BURST_GAIN * cfg.background_uv, phase);
        }
        if let Some((_, rhythm)) = cfg.preictal_rhythm {
            let phase = rng.random_range(0.0..2.0 * PI);
            for &span in &preictal_spans {
                let peak = gain * rhythm.amplitude * cfg.background_uv;
                add_rhythm(&mut row, fs, span, rhythm.freq_hz, peak, phase);
            }
        }
        if let Some(rhythm) = cfg.interictal_rhythm {
            let phase = rng.random_range(0.0..2.0 * PI);
            for &span in &quiet {
                let peak = gain * rhythm.amplitude * cfg.background_uv;
                add_rhythm(&mut row, fs, span, rhythm.freq_hz, peak, phase);
            }
        }
        data.push(row);
    }

    let mut ann = AnnotationSet::new();
    for iv in &cfg.seizure_intervals {
        ann.insert("1", *iv);
        for expert in ["2", "3"] {
            let lo = (iv.onset_s - f64::from(rng.random_range(0..=2u8))).max(0.0);
            let hi = (iv.offset_s + f64::from(rng.random_range(0..=2u8))).min(cfg.duration_s);
            ann.insert(expert, SeizureInterval::new(lo, hi)?);
        }
    }

    let rec = Recording::new(cfg.subject_id.clone(), cfg.fs, electrodes, data)?;
    Ok((rec, ann))
}

/// A set of single-seizure subjects for benchmarks and smoke tests.
///
/// Every subject has one seizure at `onset_s` lasting `seizure_s`, a
/// preictal marker rhythm for `lead_s` before it and an interictal marker
/// rhythm elsewhere. With `shifted`, subject `k` uses marker frequency
/// `k` for its preictal state and frequency `k + 1` (cyclically) for its
/// interictal state, so what one subject's preictal state looks like is
/// another subject's interictal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    /// Taken from the preprocessing section in pipeline configurations.
    #[serde(skip)]
    pub fs: u32,
    pub duration_s: f64,
    pub onset_s: f64,
    pub seizure_s: f64,
    pub lead_s: f64,
    pub marker_amplitude: f64,
    pub preictal_hz: f64,
    pub interictal_hz: f64,
    pub shifted: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_subjects: 9,
            fs: 256,
            duration_s: 280.0,
            onset_s: 240.0,
            seizure_s: 20.0,
            lead_s: 120.0,
            marker_amplitude: 1.0,
            preictal_hz: 9.0,
            interictal_hz: 21.0,
            shifted: false,
            seed: 0,
        }
    }
}

/// Marker frequencies cycled through by shifted cohorts.
const SHIFT_HZ: [f64; 9] = [6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0, 27.0, 30.0];

pub fn cohort_subject_id(k: usize) -> String {
    format!("synth{:02}", k + 1)
}

pub fn synth_cohort(cfg: &CohortConfig) -> Result<Vec<(Recording, AnnotationSet)>> {
    if cfg.n_subjects == 0 {
        bail!(Config, "synth.n_subjects must be positive");
    }
    let seizure = SeizureInterval::new(cfg.onset_s, cfg.onset_s + cfg.seizure_s)?;
    (0..cfg.n_subjects)
        .map(|k| {
            let (pre_hz, inter_hz) = if cfg.shifted {
                (SHIFT_HZ[k % SHIFT_HZ.len()], SHIFT_HZ[(k + 1) % SHIFT_HZ.len()])
            } else {
                (cfg.preictal_hz, cfg.interictal_hz)
            };
            synth_record(&SynthConfig {
                subject_id: cohort_subject_id(k),
                fs: cfg.fs,
                duration_s: cfg.duration_s,
                seizure_intervals: vec![seizure],
                seed: cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64),
                preictal_rhythm: Some((cfg.lead_s, Rhythm { freq_hz: pre_hz, amplitude: cfg.marker_amplitude })),
                interictal_rhythm: Some(Rhythm { freq_hz: inter_hz, amplitude: cfg.marker_amplitude }),
                ..Default::default()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::{consensus_intervals, parse_edf, write_edf};

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn seizure_cfg() -> SynthConfig {
        SynthConfig {
            duration_s: 300.0,
            seizure_intervals: vec![SeizureInterval::new(120.0, 180.0).unwrap()],
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synth_record(&seizure_cfg()).unwrap();
        let b = synth_record(&seizure_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = seizure_cfg();
        other.seed = 8;
        assert_ne!(synth_record(&other).unwrap().0, a.0);
    }

    #[test]
    fn no_seizures_no_annotations() {
        let (rec, ann) = synth_record(&SynthConfig {
            duration_s: 20.0,
            ..Default::default()
        })
        .unwrap();
        assert!(ann.is_empty());
        assert_eq!(rec.n_samples(), 20 * 256);
        assert_eq!(rec.electrodes.len(), 21);
    }

    #[test]
    fn seizure_bursts_dominate() {
        let (rec, ann) = synth_record(&seizure_cfg()).unwrap();
        let fs = 256;
        for (label, row) in rec.electrodes.iter().zip(&rec.data) {
            if label == "ECG" {
                continue;
            }
            let inside = rms(&row[120 * fs..180 * fs]);
            let outside: Vec<f64> = row[..120 * fs].iter().chain(&row[180 * fs..]).copied().collect();
            let ratio = inside / rms(&outside);
            assert!(ratio >= 3.0, "{label}: ratio {ratio}");
        }
        let consensus = consensus_intervals(&ann, 10.0).unwrap();
        assert_eq!(consensus, seizure_cfg().seizure_intervals);
    }

    #[test]
    fn edf_round_trip_within_one_step() {
        let mut cfg = seizure_cfg();
        cfg.duration_s = 30.0;
        cfg.seizure_intervals = vec![SeizureInterval::new(10.0, 20.0).unwrap()];
        let (rec, _) = synth_record(&cfg).unwrap();
        let bytes = write_edf(&rec).unwrap();
        let back = parse_edf(&bytes, &rec.subject_id).unwrap();
        assert_eq!(back.electrodes, rec.electrodes);
        assert_eq!(back.fs, rec.fs);
        for (a, b) in rec.data.iter().zip(&back.data) {
            let lo = a.iter().copied().fold(f64::INFINITY, f64::min).floor() - 1.0;
            let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
            let step = (hi - lo) / 65535.0;
            let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst <= step, "error {worst} > step {step}");
        }
    }

    #[test]
    fn cohort_subjects_differ() {
        let cfg = CohortConfig { n_subjects: 3, duration_s: 60.0, onset_s: 40.0, lead_s: 20.0, ..Default::default() };
        let cohort = synth_cohort(&cfg).unwrap();
        assert_eq!(cohort.len(), 3);
        assert_eq!(cohort[2].0.subject_id, "synth03");
        assert_ne!(cohort[0].0.data, cohort[1].0.data);
        assert_eq!(consensus_intervals(&cohort[0].1, 10.0).unwrap(), vec![SeizureInterval::new(40.0, 60.0).unwrap()]);
    }

    #[test]
    fn rejects_intervals_past_the_end() {
        let mut cfg = seizure_cfg();
        cfg.duration_s = 100.0;
        assert!(synth_record(&cfg).is_err());
    }
}
