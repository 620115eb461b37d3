//! Recording-to-feature glue shared by the command line and benchmarks.

use crate::error::Result;
use crate::mfcc::{MfccConfig, MfccExtractor, MfccTensor};
use crate::preprocess::{preprocess_recording, LabeledSegment, PreprocessConfig};
use crate::signal_io::{consensus_intervals, AnnotationSet, Recording};

/// Labeled windows of one recording, using the seizures all experts agree on.
pub fn subject_segments(
    rec: &Recording,
    ann: &AnnotationSet,
    cfg: &PreprocessConfig,
    min_overlap_s: f64,
) -> Result<Vec<LabeledSegment>> {
    let seizures = consensus_intervals(ann, min_overlap_s)?;
    preprocess_recording(rec, &seizures, cfg)
}

/// MFCC tensors of `segments` sampled at `fs`, computed in double precision
/// and stored in single precision.
pub fn featurize_all(segments: &[LabeledSegment], cfg: &MfccConfig, fs: f64) -> Result<Vec<MfccTensor<f32>>> {
    let ex = MfccExtractor::<f64>::new(cfg, fs)?;
    segments.iter().map(|s| Ok(ex.featurize(s)?.cast::<f32>())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfcc::MFCC_SHAPE;
    use crate::preprocess::{Class, TimingPolicy};
    use crate::signal_io::{synth_cohort, CohortConfig};

    #[test]
    fn cohort_to_features() {
        let cohort = synth_cohort(&CohortConfig { n_subjects: 1, ..Default::default() }).unwrap();
        let pre = PreprocessConfig {
            timing: TimingPolicy { preictal_s: 120.0, interictal_gap_s: 60.0, postictal_s: 30.0, window_s: 5.0 },
            ..Default::default()
        };
        let segs = subject_segments(&cohort[0].0, &cohort[0].1, &pre, 10.0).unwrap();
        assert_eq!(segs.iter().filter(|s| s.label == Class::Preictal).count(), 24);
        assert_eq!(segs.iter().filter(|s| s.label == Class::Interictal).count(), 24);
        let feats = featurize_all(&segs, &MfccConfig::default(), 256.0).unwrap();
        assert!(feats.iter().all(|f| f.shape == MFCC_SHAPE && f.values.iter().all(|v| v.is_finite())));
    }
}
