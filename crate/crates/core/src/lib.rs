//! Seizure prediction for neonatal EEG with ECG: EDF ingestion, filtering
//! and reduced-montage windows, MFCC features, a small CNN with
//! squeeze-and-excitation attention trained by a tape-based autodiff,
//! evaluation protocols and Shapley channel attribution.
//!
//! Signal processing and feature extraction are generic over the float
//! type; the network and its gradients run in `f64`. The aliases below
//! fix the scalar for the common paths.

// `!(a < b)` checks are written that way so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod explain;
pub mod mfcc;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod signal_io;
pub mod tensor;
pub mod training;

mod binio;

pub use error::{Error, Result};

/// Scalar used for filtering, feature extraction and the network.
pub type Real = f64;
/// Feature tensor as cached and fed to training.
pub type Features = mfcc::MfccTensor<f32>;
/// Feature tensor at full precision.
pub type FeaturesF64 = mfcc::MfccTensor<Real>;
pub type Extractor = mfcc::MfccExtractor<Real>;
pub type Cascade = preprocess::BiquadCascade<Real>;
pub type Section = preprocess::Biquad<Real>;
