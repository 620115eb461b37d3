use num_traits::Float;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the `n_fft/2 + 1` magnitude bins, peak 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    pub weights: Vec<Vec<T>>,
    pub center_freqs: Vec<f64>,
}

impl<T: Float> MelFilterbank<T> {
    /// Filters whose `n_mels + 2` edge points are evenly spaced in mel
    /// between `fmin` and `fmax`; filter `m` rises from point `m` to its
    /// peak at point `m + 1` and falls to zero at point `m + 2`.
    pub fn new(n_mels: usize, n_fft: usize, fs: f64, fmin: f64, fmax: f64) -> Self {
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let weights = (0..n_mels)
            .map(|m| {
                let (left, centre, right) = (points[m], points[m + 1], points[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * fs / n_fft as f64;
                        let rise = (f - left) / (centre - left);
                        let fall = (right - f) / (right - centre);
                        T::from(rise.min(fall).max(0.0)).unwrap()
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            center_freqs: points[1..=n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// Filterbank energies `weights * spectrum`.
    pub fn apply(&self, spectrum: &[T]) -> Vec<T> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(spectrum).fold(T::zero(), |acc, (&w, &s)| acc + w * s))
            .collect()
    }
}
