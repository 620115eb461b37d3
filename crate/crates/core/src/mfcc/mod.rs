//! MFCC tensors: framing with a Hamming window, FFT magnitude, triangular
//! mel filterbank, log compression and an orthonormal DCT-II, applied to
//! each of the 19 segment channels.

mod cache;
mod dct;
mod fft;
mod mel;

pub use cache::{FeatureCache, FEATURE_CACHE_VERSION};
pub use dct::Dct2;
pub use fft::{fft_magnitude, Radix2Fft};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::preprocess::{Class, LabeledSegment, Labeled, SEGMENT_CHANNELS};

/// Coefficients per frame and frames per 5-s segment at 256 Hz.
pub const MFCC_COEFFS: usize = 20;
pub const MFCC_FRAMES: usize = 11;
pub const MFCC_SHAPE: [usize; 3] = [SEGMENT_CHANNELS, MFCC_COEFFS, MFCC_FRAMES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mfcc: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_len: 256,
            hop: 128,
            n_fft: 256,
            n_mels: 20,
            fmin: 0.5,
            fmax: 100.0,
            n_mfcc: 20,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    /// Checks every constraint and reports all violations together.
    pub fn violations(&self, fs: f64) -> Vec<String> {
        let mut out = Vec::new();
        if !self.n_fft.is_power_of_two() {
            out.push(format!("n_fft {} is not a power of two", self.n_fft));
        }
        if self.n_fft != self.frame_len {
            out.push(format!("n_fft {} must equal frame_len {}", self.n_fft, self.frame_len));
        }
        if !(self.fmax < fs / 2.0) {
            out.push(format!("fmax {} must be below Nyquist {}", self.fmax, fs / 2.0));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            out.push(format!("fmin {} must lie in [0, fmax)", self.fmin));
        }
        if self.n_mfcc > self.n_mels || self.n_mfcc == 0 {
            out.push(format!("n_mfcc {} must be in 1..=n_mels ({})", self.n_mfcc, self.n_mels));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            out.push(format!("hop {} must be in 1..=frame_len", self.hop));
        }
        if !(self.log_floor > 0.0) {
            out.push("log_floor must be positive".into());
        }
        out
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let v = self.violations(fs);
        if v.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(v.join("; ")))
        }
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }
}

/// `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming<T: Float>(n: usize) -> Vec<T> {
    let denom = (n.max(2) - 1) as f64;
    (0..n)
        .map(|i| T::from(0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()).unwrap())
        .collect()
}

/// Centred frames: the signal is reflect-padded by `frame_len / 2` on each
/// side so that frame `t` is centred on sample `t * hop`; each frame is
/// multiplied by the Hamming window.
pub fn frame_signal<T: Float>(x: &[T], cfg: &MfccConfig) -> Result<Vec<Vec<T>>> {
    let pad = cfg.frame_len / 2;
    if x.len() < cfg.hop || x.len() <= pad || cfg.hop == 0 {
        bail!(
            Length,
            "framing needs at least {} samples, got {}",
            cfg.hop.max(pad + 1),
            x.len()
        );
    }
    let n = x.len() as isize;
    let reflect = |i: isize| -> T {
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        x[j as usize]
    };
    let window = hamming::<T>(cfg.frame_len);
    Ok((0..cfg.n_frames(x.len()))
        .map(|t| {
            let start = (t * cfg.hop) as isize - pad as isize;
            window
                .iter()
                .enumerate()
                .map(|(k, &w)| w * reflect(start + k as isize))
                .collect()
        })
        .collect())
}

/// Reusable MFCC machinery for one configuration and sampling rate.
#[derive(Debug, Clone)]
pub struct MfccExtractor<T> {
    pub cfg: MfccConfig,
    pub filterbank: MelFilterbank<T>,
    fft: Radix2Fft<T>,
    dct: Dct2<T>,
}

impl<T: Float> MfccExtractor<T> {
    pub fn new(cfg: &MfccConfig, fs: f64) -> Result<Self> {
        cfg.validate(fs)?;
        Ok(MfccExtractor {
            cfg: cfg.clone(),
            filterbank: build_mel_filterbank(cfg, fs),
            fft: Radix2Fft::new(cfg.n_fft)?,
            dct: Dct2::new(cfg.n_mels),
        })
    }

    /// Coefficient-major `[n_mfcc x n_frames]` matrix for one channel.
    pub fn channel(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        let frames = frame_signal(x, &self.cfg)?;
        let floor = T::from(self.cfg.log_floor).unwrap();
        let mut out = vec![Vec::with_capacity(frames.len()); self.cfg.n_mfcc];
        for frame in &frames {
            let spectrum = self.fft.magnitude(frame);
            let log_e: Vec<T> = self
                .filterbank
                .apply(&spectrum)
                .into_iter()
                .map(|e| e.max(floor).ln())
                .collect();
            for (row, c) in out.iter_mut().zip(self.dct.forward(&log_e, self.cfg.n_mfcc)) {
                row.push(c);
            }
        }
        Ok(out)
    }

    /// Applies [`Self::channel`] to each of the 19 rows of a segment.
    pub fn featurize(&self, s: &LabeledSegment) -> Result<MfccTensor<T>> {
        if s.n_channels != SEGMENT_CHANNELS || !s.data.len().is_multiple_of(SEGMENT_CHANNELS) {
            bail!(Shape, "segment has {} channels, expected {SEGMENT_CHANNELS}", s.n_channels);
        }
        let n_frames = self.cfg.n_frames(s.samples_per_channel());
        let mut values = Vec::with_capacity(SEGMENT_CHANNELS * self.cfg.n_mfcc * n_frames);
        for row in s.rows() {
            let x: Vec<T> = row.iter().map(|&v| T::from(v).unwrap()).collect();
            for coef in self.channel(&x)? {
                values.extend(coef);
            }
        }
        Ok(MfccTensor {
            subject_id: s.subject_id.clone(),
            label: s.label,
            t_start: s.t_start,
            shape: [SEGMENT_CHANNELS, self.cfg.n_mfcc, n_frames],
            values,
        })
    }
}

pub fn build_mel_filterbank<T: Float>(cfg: &MfccConfig, fs: f64) -> MelFilterbank<T> {
    MelFilterbank::new(cfg.n_mels, cfg.n_fft, fs, cfg.fmin, cfg.fmax)
}

/// One-shot version of [`MfccExtractor::channel`].
pub fn mfcc_channel<T: Float>(x: &[T], cfg: &MfccConfig, fs: f64) -> Result<Vec<Vec<T>>> {
    MfccExtractor::new(cfg, fs)?.channel(x)
}

/// One-shot version of [`MfccExtractor::featurize`].
pub fn featurize_segment<T: Float>(s: &LabeledSegment, cfg: &MfccConfig, fs: f64) -> Result<MfccTensor<T>> {
    MfccExtractor::new(cfg, fs)?.featurize(s)
}

/// `[channels x coefficients x frames]` features with segment provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccTensor<T = f64> {
    pub subject_id: String,
    pub label: Class,
    pub t_start: f64,
    pub shape: [usize; 3],
    pub values: Vec<T>,
}

impl<T: Float> MfccTensor<T> {
    pub fn zeros_like(&self) -> Self {
        MfccTensor {
            values: vec![T::zero(); self.values.len()],
            ..self.clone()
        }
    }

    pub fn cast<U: Float>(&self) -> MfccTensor<U> {
        MfccTensor {
            subject_id: self.subject_id.clone(),
            label: self.label,
            t_start: self.t_start,
            shape: self.shape,
            values: self.values.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    pub fn channel_slice(&self, c: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, k: usize, t: usize) -> T {
        self.values[(c * self.shape[1] + k) * self.shape[2] + t]
    }
}

impl<T> Labeled for MfccTensor<T> {
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
