//! Iterative radix-2 decimation-in-time FFT.

use num_complex::Complex;
use num_traits::Float;

use crate::error::{bail, Result};

/// Precomputed twiddles and bit-reversal permutation for one size.
#[derive(Debug, Clone)]
pub struct Radix2Fft<T> {
    n: usize,
    twiddles: Vec<Complex<T>>,
    rev: Vec<usize>,
}

impl<T: Float> Radix2Fft<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            bail!(Config, "FFT length {n} is not a power of two");
        }
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        // twiddles straight from f64 angles so precision does not drift with k
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(T::from(a.cos()).unwrap(), T::from(a.sin()).unwrap())
            })
            .collect();
        Ok(Radix2Fft { n, twiddles, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform in place, `X[k] = sum x[n] e^{-2 pi i k n / N}`.
    pub fn process(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n, "buffer length must match the plan");
        for i in 0..self.n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let stride = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len *= 2;
        }
    }

    /// `|X[k]|` for `k = 0..=N/2` of a real frame.
    pub fn magnitude(&self, frame: &[T]) -> Vec<T> {
        let mut buf: Vec<Complex<T>> = frame.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.process(&mut buf);
        buf[..=self.n / 2].iter().map(|c| c.norm()).collect()
    }
}

/// One-shot magnitude spectrum; errors unless the frame length is a power of two.
pub fn fft_magnitude<T: Float>(frame: &[T]) -> Result<Vec<T>> {
    Ok(Radix2Fft::new(frame.len())?.magnitude(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn direct_dft(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = vec![0.0; 64];
        x[0] = 1.0;
        let m = fft_magnitude(&x).unwrap();
        assert_eq!(m.len(), 33);
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cosine_at_bin_eight() {
        let x: Vec<f64> = (0..256).map(|t| (2.0 * PI * 8.0 * t as f64 / 256.0).cos()).collect();
        let m = fft_magnitude(&x).unwrap();
        assert!((m[8] - 128.0).abs() < 1e-9);
        for (k, v) in m.iter().enumerate() {
            if k != 8 {
                assert!(v.abs() < 1e-9, "bin {k}: {v}");
            }
        }
    }

    #[test]
    fn matches_direct_dft() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 4, 8, 64, 256] {
            for _ in 0..5 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let fast = fft_magnitude(&x).unwrap();
                let slow = direct_dft(&x);
                let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-9, "n={n}: {err}");
            }
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft_magnitude(&[0.0f64; 12]).is_err());
        assert!(fft_magnitude::<f64>(&[]).is_err());
    }

    #[test]
    fn single_precision_plan() {
        let x: Vec<f32> = (0..256).map(|t| (2.0 * PI * 8.0 * t as f64 / 256.0).cos() as f32).collect();
        let m = fft_magnitude(&x).unwrap();
        assert!((m[8] - 128.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn magnitude_is_homogeneous(x in prop::collection::vec(-10.0f64..10.0, 32), a in 0.01f64..100.0) {
            let m = fft_magnitude(&x).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| a * v).collect();
            let ms = fft_magnitude(&scaled).unwrap();
            for (p, q) in m.iter().zip(&ms) {
                prop_assert!((a * p - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }
    }
}
