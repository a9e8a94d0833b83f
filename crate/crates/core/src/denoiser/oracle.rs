//! Exact `q(z_0 | z_t)` for a known, enumerable data distribution.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{mixture_reverse_dist, Denoiser};
use crate::error::{domain, shape};
use crate::grid::{GridDistribution, LatentGrid, ProbGrid};
use crate::math::log_sum_exp;
use crate::{Result, Schedule};

/// Largest support the oracle will enumerate.
pub const MAX_SUPPORT: usize = 4096;

/// Per-position marginal of `q(z_0 | z_t)` under `dist`.
pub fn oracle_denoiser(
    dist: &GridDistribution,
    z_t: &LatentGrid,
    t: usize,
    sched: &Schedule,
) -> Result<ProbGrid> {
    if dist.support().len() > MAX_SUPPORT {
        return Err(domain!("support of {} grids exceeds {MAX_SUPPORT}", dist.support().len()));
    }
    if t > sched.steps() {
        return Err(domain!("t={t} exceeds T={}", sched.steps()));
    }
    let (h, w, k) = dist.shape();
    if (z_t.h(), z_t.w(), z_t.k()) != (h, w, k) {
        return Err(shape!("z_t does not match the distribution's grids"));
    }
    let ab = sched.alpha_bar(t);
    let log_hit = libm::log(ab + (1.0 - ab) / k as f64);
    let log_miss = libm::log((1.0 - ab) / k as f64);

    let log_post: Vec<f64> = dist
        .iter()
        .map(|(g, p)| {
            let agree = g.indices().iter().zip(z_t.indices()).filter(|(a, b)| a == b).count();
            let disagree = g.len() - agree;
            let mut lp = libm::log(p) + agree as f64 * log_hit;
            if disagree > 0 {
                lp += disagree as f64 * log_miss;
            }
            lp
        })
        .collect();
    let norm = log_sum_exp(&log_post);

    let mut out = vec![0.0; z_t.len() * k];
    for ((g, _), lp) in dist.iter().zip(&log_post) {
        let weight = libm::exp(lp - norm);
        for (pos, &c) in g.indices().iter().enumerate() {
            out[pos * k + c] += weight;
        }
    }
    Ok(ProbGrid::from_raw(h, w, k, out))
}

/// The Bayes-optimal denoiser for a known distribution.
///
/// `predict_z0` is the exact per-position posterior. The reverse step mixes
/// the exact per-`z_0` posteriors by those weights, which recovers the true
/// per-position reverse marginal. Substituting the posterior into θ directly
/// would not.
#[derive(Debug, Clone, Copy)]
pub struct OracleDenoiser<'a> {
    pub dist: &'a GridDistribution,
    pub sched: &'a Schedule,
}

impl<'a> OracleDenoiser<'a> {
    pub fn new(dist: &'a GridDistribution, sched: &'a Schedule) -> Self {
        Self { dist, sched }
    }
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict_z0(&self, z_t: &LatentGrid, t: usize) -> Result<ProbGrid> {
        oracle_denoiser(self.dist, z_t, t, self.sched)
    }

    fn reverse_dist(&self, z_t: &LatentGrid, t: usize, sched: &Schedule) -> Result<ProbGrid> {
        let w = oracle_denoiser(self.dist, z_t, t, sched)?;
        mixture_reverse_dist(z_t, &w, t, sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{transition_matrix, TransitionMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(k: usize, idx: &[usize]) -> LatentGrid {
        LatentGrid::new(1, idx.len(), k, idx.to_vec()).unwrap()
    }

    #[test]
    fn single_grid_is_one_hot() {
        let sched = Schedule::cosine(50, 0.008, 0.999).unwrap();
        let g = grid(4, &[1, 3, 0]);
        let d = GridDistribution::new(vec![g.clone()], vec![1.0]).unwrap();
        let zt = grid(4, &[2, 2, 2]);
        let p = oracle_denoiser(&d, &zt, 50, &sched).unwrap();
        assert_eq!(p.as_slice(), g.one_hot().as_slice());
    }

    #[test]
    fn uninformative_step_splits_evenly() {
        let sched = Schedule::cosine(4000, 0.008, 0.999).unwrap();
        let a = grid(3, &[0, 1]);
        let b = grid(3, &[0, 2]);
        let d = GridDistribution::new(vec![a, b], vec![1.0, 1.0]).unwrap();
        let p = oracle_denoiser(&d, &grid(3, &[2, 1]), 4000, &sched).unwrap();
        assert!((p.row(1)[1] - 0.5).abs() < 1e-6);
        assert!((p.row(1)[2] - 0.5).abs() < 1e-6);
        assert!((p.row(0)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_joint_enumeration() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sched = Schedule::cosine(30, 0.008, 0.999).unwrap();
        for _ in 0..50 {
            let support: Vec<LatentGrid> = (0..3)
                .map(|_| grid(k, &[rng.random_range(0..k), rng.random_range(0..k), rng.random_range(0..k)]))
                .collect();
            let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let d = GridDistribution::new(support, weights).unwrap();
            let t = rng.random_range(1..=30);
            let zt = grid(k, &[rng.random_range(0..k), rng.random_range(0..k), rng.random_range(0..k)]);

            // q(z_t | z_0) from explicit kernel products, then Bayes over
            // whole grids.
            let mut qbar = TransitionMatrix::identity(k);
            for u in 1..=t {
                qbar = qbar.then(&transition_matrix(sched.beta(u), k).unwrap());
            }
            let joint: Vec<f64> = d
                .iter()
                .map(|(g, p)| p * (0..3).map(|i| qbar.get(g.get(i), zt.get(i))).product::<f64>())
                .collect();
            let total: f64 = joint.iter().sum();
            let mut want = vec![0.0; 3 * k];
            for ((g, _), j) in d.iter().zip(&joint) {
                for i in 0..3 {
                    want[i * k + g.get(i)] += j / total;
                }
            }
            let got = oracle_denoiser(&d, &zt, t, &sched).unwrap();
            for (a, b) in got.as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
