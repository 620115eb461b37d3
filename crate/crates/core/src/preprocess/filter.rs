//! Butterworth band filters as cascades of second-order sections.
//!
//! Design runs in `f64` regardless of the sample type: the analog prototype
//! is frequency-prewarped, transformed to a band filter, mapped through the
//! bilinear transform and split into conjugate-pole biquads. Coefficients
//! are then cast to `T` for filtering.

use std::f64::consts::PI;

use num_complex::Complex64;
use num_traits::Float;

use crate::error::{bail, Result};

/// Band edges in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    Bandpass { lo: f64, hi: f64 },
    Bandstop { lo: f64, hi: f64 },
}

impl Band {
    fn edges(&self) -> (f64, f64) {
        match *self {
            Band::Bandpass { lo, hi } | Band::Bandstop { lo, hi } => (lo, hi),
        }
    }
}

/// One section of `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad<T> {
    pub b0: T,
    pub b1: T,
    pub b2: T,
    pub a1: T,
    pub a2: T,
}

impl<T: Float> Biquad<T> {
    /// Poles strictly inside the unit circle (Jury criterion for order 2).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < T::one() && self.a1.abs() < T::one() + self.a2
    }

    /// Response at `z = e^{jw}`.
    pub fn response(&self, w: f64) -> Complex64 {
        let c = |v: T| v.to_f64().unwrap_or(f64::NAN);
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = c(self.b0) + z1 * c(self.b1) + z2 * c(self.b2);
        let den = 1.0 + z1 * c(self.a1) + z2 * c(self.a2);
        num / den
    }

    /// DC gain `H(1)`.
    fn dc_gain(&self) -> T {
        (self.b0 + self.b1 + self.b2) / (T::one() + self.a1 + self.a2)
    }

    /// Transposed direct-form II state that holds a constant unit input at
    /// its steady state.
    fn unit_step_state(&self) -> [T; 2] {
        let g = self.dc_gain();
        let s2 = self.b2 - self.a2 * g;
        let s1 = self.b1 - self.a1 * g + s2;
        [s1, s2]
    }

    fn run(&self, x: &mut [T], mut state: [T; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + state[0];
            state[0] = self.b1 * input - self.a1 * y + state[1];
            state[1] = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }
}

/// Second-order sections applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade<T> {
    pub sections: Vec<Biquad<T>>,
    pub fs: f64,
}

impl<T: Float> BiquadCascade<T> {
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w))
    }

    /// Single-pass magnitude in dB.
    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Number of padding samples used by [`apply_zero_phase`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Causal filtering with initial state scaled to `x[0]`.
    pub fn filter_in_place(&self, x: &mut [T]) {
        let Some(&first) = x.first() else { return };
        let mut level = first;
        for s in &self.sections {
            let [s1, s2] = s.unit_step_state();
            s.run(x, [s1 * level, s2 * level]);
            level = level * s.dc_gain();
        }
    }
}

/// Designs a Butterworth band filter of the given prototype order.
///
/// The result has `order` sections; band edges sit at -3.01 dB.
pub fn design_butterworth<T: Float>(band: Band, order: usize, fs: f64) -> Result<BiquadCascade<T>> {
    let (lo, hi) = band.edges();
    if order == 0 {
        bail!(Config, "filter order must be positive");
    }
    if !(fs > 0.0 && 0.0 < lo && lo < hi && hi < fs / 2.0) {
        bail!(Config, "band edges must satisfy 0 < lo < hi < fs/2, got lo={lo} hi={hi} fs={fs}");
    }
    let k = 2.0 * fs;
    let w_lo = k * (PI * lo / fs).tan();
    let w_hi = k * (PI * hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // analog lowpass prototype poles on the left half unit circle
    let proto = (0..order).map(|i| {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        Complex64::from_polar(1.0, theta)
    });

    let mut analog = Vec::with_capacity(2 * order);
    for p in proto {
        let centre = match band {
            Band::Bandpass { .. } => p * (bw / 2.0),
            Band::Bandstop { .. } => (bw / 2.0) / p,
        };
        let root = (centre * centre - w0_sq).sqrt();
        analog.push(centre + root);
        analog.push(centre - root);
    }
    let digital: Vec<Complex64> = analog.iter().map(|&s| (k + s) / (k - s)).collect();

    let (num, w_ref) = match band {
        // one zero at z = 1 and one at z = -1 per section
        Band::Bandpass { .. } => ([1.0, 0.0, -1.0], 2.0 * (w0_sq.sqrt() / k).atan()),
        Band::Bandstop { .. } => {
            let w_notch = 2.0 * (w0_sq.sqrt() / k).atan();
            ([1.0, -2.0 * w_notch.cos(), 1.0], 0.0)
        }
    };

    let mut sections: Vec<Biquad<f64>> = pair_poles(&digital)
        .into_iter()
        .map(|(a1, a2)| Biquad {
            b0: num[0],
            b1: num[1],
            b2: num[2],
            a1,
            a2,
        })
        .collect();

    let gain = sections
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w_ref))
        .norm();
    if !(gain.is_finite() && gain > 0.0) {
        bail!(Design, "degenerate reference gain {gain}");
    }
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }

    let cast = |v: f64| T::from(v).expect("coefficient representable");
    let cascade = BiquadCascade {
        sections: sections
            .iter()
            .map(|s| Biquad {
                b0: cast(s.b0),
                b1: cast(s.b1),
                b2: cast(s.b2),
                a1: cast(s.a1),
                a2: cast(s.a2),
            })
            .collect(),
        fs,
    };
    if !cascade.is_stable() {
        bail!(Design, "designed section is unstable");
    }
    Ok(cascade)
}

/// Groups poles into `(a1, a2)` denominators: conjugate pairs first, then
/// the remaining real poles two at a time.
fn pair_poles(poles: &[Complex64]) -> Vec<(f64, f64)> {
    let tol = 1e-12;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > tol {
            out.push((-2.0 * p.re, p.norm_sqr()));
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => out.push((-(r1 + r2), r1 * r2)),
            [r] => out.push((-r, 0.0)),
            _ => {}
        }
    }
    out
}

/// Forward-backward filtering with odd-extension padding.
///
/// Output has the input's length and zero phase; the magnitude response is
/// squared relative to a single pass.
pub fn apply_zero_phase<T: Float>(cascade: &BiquadCascade<T>, x: &[T]) -> Result<Vec<T>> {
    let pad = cascade.pad_len();
    let n = x.len();
    if n <= pad {
        bail!(Length, "zero-phase filtering needs more than {pad} samples, got {n}");
    }
    let two = T::one() + T::one();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| two * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| two * x[n - 1] - x[n - 1 - i]));

    cascade.filter_in_place(&mut ext);
    ext.reverse();
    cascade.filter_in_place(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Keeps every `factor`-th sample, starting with the first.
pub fn downsample<T: Copy>(x: &[T], factor: usize) -> Vec<T> {
    x.iter().step_by(factor.max(1)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandpass() -> BiquadCascade<f64> {
        design_butterworth(Band::Bandpass { lo: 0.1, hi: 70.0 }, 4, 256.0).unwrap()
    }

    fn notch() -> BiquadCascade<f64> {
        design_butterworth(Band::Bandstop { lo: 49.0, hi: 51.0 }, 4, 256.0).unwrap()
    }

    fn sine(f: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn bandpass_edges_at_half_power() {
        let c = bandpass();
        assert_eq!(c.sections.len(), 4);
        for f in [0.1, 70.0] {
            let db = c.magnitude_db(f);
            assert!((db + 3.0103).abs() < 0.1, "{f} Hz: {db} dB");
        }
        assert!(c.magnitude_db(10.0).abs() < 0.01);
    }

    #[test]
    fn bandpass_blocks_dc_exactly() {
        assert_eq!(bandpass().response(0.0).norm(), 0.0);
    }

    #[test]
    fn notch_depth_at_50_hz() {
        let c = notch();
        assert!(c.magnitude_db(50.0) <= -40.0);
        assert!((c.magnitude_db(49.0) + 3.0103).abs() < 0.1);
        assert!((c.magnitude_db(51.0) + 3.0103).abs() < 0.1);
        assert!(c.magnitude_db(5.0).abs() < 0.01);
    }

    #[test]
    fn designs_are_stable() {
        for band in [
            Band::Bandpass { lo: 0.1, hi: 70.0 },
            Band::Bandpass { lo: 0.5, hi: 30.0 },
            Band::Bandstop { lo: 49.0, hi: 51.0 },
        ] {
            for order in 1..=6 {
                let c: BiquadCascade<f64> = design_butterworth(band, order, 256.0).unwrap();
                assert!(c.is_stable(), "{band:?} order {order}");
                let (lo, hi) = band.edges();
                for f in [lo, hi] {
                    assert!((c.magnitude_db(f) + 3.0103).abs() < 0.1, "{band:?} order {order} at {f}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_edges() {
        for (lo, hi) in [(0.0, 70.0), (70.0, 10.0), (1.0, 128.0), (-1.0, 5.0)] {
            let r = design_butterworth::<f64>(Band::Bandpass { lo, hi }, 4, 256.0);
            assert!(matches!(r, Err(crate::Error::Config(_))), "{lo} {hi}");
        }
    }

    #[test]
    fn zero_phase_removes_mains() {
        let x = sine(50.0, 256 * 20, 256.0);
        let y = apply_zero_phase(&notch(), &x).unwrap();
        assert_eq!(y.len(), x.len());
        let mid = &y[256 * 4..256 * 16];
        assert!(rms(mid) <= 0.01 * rms(&x[256 * 4..256 * 16]));
    }

    #[test]
    fn zero_phase_removes_dc() {
        let x = vec![5.0; 256 * 30];
        let y = apply_zero_phase(&bandpass(), &x).unwrap();
        assert!(y[256 * 10..256 * 20].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn in_band_sine_keeps_amplitude_and_phase() {
        let n = 256 * 60;
        let x = sine(10.0, n, 256.0);
        let y = apply_zero_phase(&bandpass(), &x).unwrap();
        let (a, b) = (&x[256 * 20..256 * 40], &y[256 * 20..256 * 40]);
        let ratio = rms(b) / rms(a);
        assert!((ratio - 1.0).abs() < 0.02, "amplitude ratio {ratio}");
        let xcorr = |lag: i64| -> f64 {
            (0..a.len() as i64 - 20)
                .skip(20)
                .map(|i| a[i as usize] * b[(i + lag) as usize])
                .sum()
        };
        let best = (-10..=10).max_by(|&p, &q| xcorr(p).total_cmp(&xcorr(q))).unwrap();
        assert_eq!(best, 0);

        // idempotent on an in-band sine
        let z = apply_zero_phase(&bandpass(), &y).unwrap();
        let ratio = rms(&z[256 * 20..256 * 40]) / rms(b);
        assert!((ratio - 1.0).abs() < 0.02);
    }

    #[test]
    fn short_signal_is_rejected() {
        let c = bandpass();
        let x = vec![0.0; c.pad_len()];
        assert!(matches!(apply_zero_phase(&c, &x), Err(crate::Error::Length(_))));
    }

    #[test]
    fn downsample_cases() {
        let ramp: Vec<i32> = (0..10).collect();
        assert_eq!(downsample(&ramp, 1), ramp);
        assert_eq!(downsample(&ramp, 2), vec![0, 2, 4, 6, 8]);
        let x = vec![0.0f32; 512 * 4];
        assert_eq!(downsample(&x, 2).len(), 256 * 4);
    }

    #[test]
    fn single_precision_filtering() {
        let c: BiquadCascade<f32> =
            design_butterworth(Band::Bandstop { lo: 49.0, hi: 51.0 }, 4, 256.0).unwrap();
        let x: Vec<f32> = sine(50.0, 256 * 20, 256.0).iter().map(|&v| v as f32).collect();
        let y = apply_zero_phase(&c, &x).unwrap();
        let e = y[256 * 4..256 * 16].iter().map(|v| f64::from(*v).powi(2)).sum::<f64>();
        assert!((e / (256.0 * 12.0)).sqrt() < 0.01);
    }
}
