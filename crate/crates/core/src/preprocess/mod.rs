//! Filtering, reduced montage and labeled 5-s windows.

mod cache;
mod filter;
mod montage;
mod windows;

pub use cache::{SegmentCache, SEGMENT_CACHE_VERSION};
pub use filter::{apply_zero_phase, design_butterworth, downsample, Band, Biquad, BiquadCascade};
pub use montage::{build_montage, normalize_label, MontageConfig, DEFAULT_PAIRS, MONTAGE_PAIRS};
pub use windows::{
    label_windows, select_subjects, window_plan, Class, LabeledSegment, Labeled, TimingPolicy,
};

use crate::error::{bail, Result};
use crate::signal_io::{Recording, SeizureInterval};

/// Channel count of a segment: 18 bipolar EEG channels plus ECG.
pub const SEGMENT_CHANNELS: usize = MONTAGE_PAIRS + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub bandpass_hz: (f64, f64),
    /// Mains frequency; realized as a bandstop of +-1 Hz around it.
    pub notch_hz: Option<f64>,
    pub filter_order: usize,
    pub downsample: usize,
    pub montage: MontageConfig,
    pub timing: TimingPolicy,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bandpass_hz: (0.1, 70.0),
            notch_hz: Some(50.0),
            filter_order: 4,
            downsample: 1,
            montage: MontageConfig::default(),
            timing: TimingPolicy::default(),
        }
    }
}

/// Filters the electrodes the montage needs, decimates, builds the montage
/// and cuts labeled windows.
pub fn preprocess_recording(
    rec: &Recording,
    seizures: &[SeizureInterval],
    cfg: &PreprocessConfig,
) -> Result<Vec<LabeledSegment>> {
    if cfg.downsample == 0 || !(rec.fs as usize).is_multiple_of(cfg.downsample) {
        bail!(Config, "downsample factor {} does not divide {} Hz", cfg.downsample, rec.fs);
    }
    let fs = f64::from(rec.fs);
    let (lo, hi) = cfg.bandpass_hz;
    let bandpass = design_butterworth::<f64>(Band::Bandpass { lo, hi }, cfg.filter_order, fs)?;
    let notch = cfg
        .notch_hz
        .map(|f| design_butterworth::<f64>(Band::Bandstop { lo: f - 1.0, hi: f + 1.0 }, cfg.filter_order, fs))
        .transpose()?;

    let labels = cfg.montage.electrodes();
    let rows = montage::find_rows(rec, &labels)?;
    let mut data = Vec::with_capacity(rows.len());
    for &row in &rows {
        let mut x = apply_zero_phase(&bandpass, &rec.data[row])?;
        if let Some(n) = &notch {
            x = apply_zero_phase(n, &x)?;
        }
        data.push(downsample(&x, cfg.downsample));
    }
    let mut filtered = Recording::new(
        rec.subject_id.clone(),
        rec.fs / cfg.downsample as u32,
        rows.iter().map(|&r| rec.electrodes[r].clone()).collect(),
        data,
    )?;
    filtered.start_time = rec.start_time;
    let montaged = build_montage(&filtered, &cfg.montage)?;
    label_windows(&montaged, seizures, &cfg.timing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::{synth_record, SynthConfig};

    #[test]
    fn synthetic_recording_to_segments() {
        let (rec, _) = synth_record(&SynthConfig {
            fs: 512,
            duration_s: 200.0,
            seizure_intervals: vec![SeizureInterval::new(150.0, 170.0).unwrap()],
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = PreprocessConfig {
            downsample: 2,
            timing: TimingPolicy {
                preictal_s: 30.0,
                interictal_gap_s: 60.0,
                postictal_s: 10.0,
                window_s: 5.0,
            },
            ..Default::default()
        };
        let segs = preprocess_recording(&rec, &[SeizureInterval::new(150.0, 170.0).unwrap()], &cfg).unwrap();
        let pre = segs.iter().filter(|s| s.label == Class::Preictal).count();
        let inter = segs.iter().filter(|s| s.label == Class::Interictal).count();
        assert_eq!(pre, 6);
        assert_eq!(inter, 18);
        for s in &segs {
            assert_eq!(s.n_channels, SEGMENT_CHANNELS);
            assert_eq!(s.samples_per_channel(), 1280);
            assert!(s.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bad_downsample_factor() {
        let (rec, _) = synth_record(&SynthConfig {
            duration_s: 10.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = PreprocessConfig {
            downsample: 3,
            ..Default::default()
        };
        assert!(preprocess_recording(&rec, &[], &cfg).is_err());
    }
}
