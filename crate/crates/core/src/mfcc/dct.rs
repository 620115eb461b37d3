use num_traits::Float;

/// Orthonormal DCT-II as a dense `n x n` matrix.
#[derive(Debug, Clone)]
pub struct Dct2<T> {
    n: usize,
    basis: Vec<T>,
}

impl<T: Float> Dct2<T> {
    pub fn new(n: usize) -> Self {
        let mut basis = Vec::with_capacity(n * n);
        for k in 0..n {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                let angle = std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64;
                basis.push(T::from(scale * angle.cos()).unwrap());
            }
        }
        Dct2 { n, basis }
    }

    /// First `n_out` coefficients of the transform of `x`.
    pub fn forward(&self, x: &[T], n_out: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.n);
        self.basis
            .chunks_exact(self.n)
            .take(n_out)
            .map(|row| row.iter().zip(x).fold(T::zero(), |acc, (&b, &v)| acc + b * v))
            .collect()
    }

    /// Inverse (DCT-III) of a full coefficient vector.
    pub fn inverse(&self, c: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| {
                (0..self.n).fold(T::zero(), |acc, k| acc + self.basis[k * self.n + i] * c[k])
            })
            .collect()
    }
}
