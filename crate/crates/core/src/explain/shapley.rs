//! Permutation-sampling Shapley values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// A cooperative game: the value of each coalition, given as membership
/// masks. Implementations may evaluate the whole slice in one batch.
pub trait CoalitionValue {
    fn n_players(&self) -> usize;
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>>;
}

/// Wraps a closure over membership masks.
pub struct FnGame<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[bool]) -> f64> CoalitionValue for FnGame<F> {
    fn n_players(&self) -> usize {
        self.n
    }
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        Ok(coalitions.iter().map(|c| (self.f)(c)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEstimate {
    /// Mean marginal contribution of each player.
    pub values: Vec<f64>,
    /// Standard error of each mean over permutations.
    pub std_err: Vec<f64>,
    /// Standard error of the summed attribution.
    pub total_std_err: f64,
    pub v_empty: f64,
    pub v_full: f64,
    pub n_perm: usize,
}

impl ShapleyEstimate {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Samples `n_perm` player orderings. Permutation `p` draws from stream `p`
/// of a ChaCha generator keyed by `seed`, and every ordering adds players
/// one at a time from the empty coalition, crediting each with the change
/// in value.
pub fn shapley_sampling<G: CoalitionValue>(game: &G, n_perm: usize, seed: u64) -> Result<ShapleyEstimate> {
    if n_perm < 1 {
        bail!(Config, "n_perm must be at least 1");
    }
    let n = game.n_players();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let (mut tot_sum, mut tot_sq) = (0.0, 0.0);
    let (mut v_empty, mut v_full) = (0.0, 0.0);
    for p in 0..n_perm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut mask = vec![false; n];
        let mut chain = Vec::with_capacity(n + 1);
        chain.push(mask.clone());
        for &i in &order {
            mask[i] = true;
            chain.push(mask.clone());
        }
        let v = game.values(&chain)?;
        if v.len() != n + 1 {
            bail!(Shape, "game returned {} values for {} coalitions", v.len(), n + 1);
        }
        let mut total = 0.0;
        for (j, &i) in order.iter().enumerate() {
            let d = v[j + 1] - v[j];
            sum[i] += d;
            sum_sq[i] += d * d;
            total += d;
        }
        tot_sum += total;
        tot_sq += total * total;
        v_empty = v[0];
        v_full = v[n];
    }
    let m = n_perm as f64;
    let se = |s: f64, sq: f64| {
        if n_perm < 2 {
            return 0.0;
        }
        let mean = s / m;
        let var = ((sq - m * mean * mean) / (m - 1.0)).max(0.0);
        (var / m).sqrt()
    };
    Ok(ShapleyEstimate {
        values: sum.iter().map(|s| s / m).collect(),
        std_err: sum.iter().zip(&sum_sq).map(|(&s, &q)| se(s, q)).collect(),
        total_std_err: se(tot_sum, tot_sq),
        v_empty,
        v_full,
        n_perm,
    })
}
