//! Ancestral sampling and mask-constrained inpainting.
//!
//! Both routines draw exactly one uniform per position for the initial grid
//! and per position for every reverse step. Inpainting additionally draws the
//! diffused context, but only when the mask has at least one known position,
//! so an all-zero mask replays `sample` draw for draw.

use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{sample_q, Denoiser};
use crate::error::{domain, shape};
use crate::grid::LatentGrid;
use crate::math::sample_categorical;
use crate::{Result, Schedule};

/// Which positions are given (`true`) and which are generated (`false`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    m: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, m: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(domain!("mask must be non-empty"));
        }
        if m.len() != h * w {
            return Err(shape!("{} mask entries for a {h}x{w} grid", m.len()));
        }
        Ok(Self { h, w, m })
    }

    pub fn filled(h: usize, w: usize, known: bool) -> Result<Self> {
        Self::new(h, w, alloc::vec![known; h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn is_known(&self, pos: usize) -> bool {
        self.m[pos]
    }

    pub fn known_count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.m
    }
}

fn uniform_grid<R: Rng + ?Sized>(h: usize, w: usize, k: usize, rng: &mut R) -> Result<LatentGrid> {
    let idx = (0..h * w)
        .map(|_| {
            let u: f64 = rng.random();
            ((u * k as f64) as usize).min(k - 1)
        })
        .collect();
    LatentGrid::new(h, w, k, idx)
}

fn reverse_draw<D, R>(denoiser: &D, z: &LatentGrid, t: usize, sched: &Schedule, rng: &mut R) -> Result<LatentGrid>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let p = denoiser.reverse_dist(z, t, sched)?;
    let idx = (0..z.len()).map(|pos| sample_categorical(p.row(pos), rng)).collect();
    LatentGrid::new(z.h(), z.w(), z.k(), idx)
}

/// Draws `z_T` uniformly and runs the reverse chain down to `z_0`.
pub fn sample<D, R>(denoiser: &D, sched: &Schedule, h: usize, w: usize, k: usize, rng: &mut R) -> Result<LatentGrid>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    if k < 2 {
        return Err(domain!("need K >= 2"));
    }
    let mut z = uniform_grid(h, w, k, rng)?;
    for t in (1..=sched.steps()).rev() {
        z = reverse_draw(denoiser, &z, t, sched, rng)?;
    }
    Ok(z)
}

/// Fills the unknown part of `z0_known` by running the reverse chain while
/// clamping known positions to freshly diffused copies of the context.
pub fn inpaint<D, R>(denoiser: &D, sched: &Schedule, z0_known: &LatentGrid, mask: &Mask, rng: &mut R) -> Result<LatentGrid>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    if (mask.h, mask.w) != (z0_known.h(), z0_known.w()) {
        return Err(shape!(
            "{}x{} mask for a {}x{} grid",
            mask.h, mask.w, z0_known.h(), z0_known.w()
        ));
    }
    if z0_known.k() < 2 {
        return Err(domain!("need K >= 2"));
    }
    let any_known = mask.known_count() > 0;
    let merge = |z: &mut LatentGrid, context: &LatentGrid| {
        for pos in 0..z.len() {
            if mask.is_known(pos) {
                z.set(pos, context.get(pos));
            }
        }
    };
    let steps = sched.steps();
    let mut z = uniform_grid(z0_known.h(), z0_known.w(), z0_known.k(), rng)?;
    if any_known {
        let ctx = sample_q(z0_known, steps, sched, rng)?;
        merge(&mut z, &ctx);
    }
    for t in (1..=steps).rev() {
        z = reverse_draw(denoiser, &z, t, sched, rng)?;
        if any_known {
            if t > 1 {
                let ctx = sample_q(z0_known, t - 1, sched, rng)?;
                merge(&mut z, &ctx);
            } else {
                merge(&mut z, z0_known);
            }
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::denoiser::OracleDenoiser;
    use crate::grid::{GridDistribution, ProbGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts a fixed distribution regardless of input.
    struct Constant(ProbGrid);

    impl Denoiser for Constant {
        fn predict_z0(&self, _: &LatentGrid, _: usize) -> Result<ProbGrid> {
            Ok(self.0.clone())
        }
    }

    fn toy() -> GridDistribution {
        let g = |v: [usize; 4]| LatentGrid::new(2, 2, 4, v.to_vec()).unwrap();
        GridDistribution::new(vec![g([0, 0, 1, 2]), g([1, 1, 3, 0]), g([2, 3, 0, 1])], vec![0.5, 0.3, 0.2]).unwrap()
    }

    #[test]
    fn single_step_chain_returns_prediction() {
        let sched = Schedule::cosine(1, 0.008, 0.999).unwrap();
        let p = ProbGrid::new(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let d = Constant(p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample(&d, &sched, 1, 1, 3, &mut rng).unwrap().get(0)] += 1;
        }
        for (c, p) in counts.iter().zip([0.2, 0.5, 0.3]) {
            let sd = libm::sqrt(n as f64 * p * (1.0 - p));
            assert!((*c as f64 - n as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn initial_grid_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, n) = (5, 50_000);
        let mut counts = [0usize; 5];
        for _ in 0..n / 4 {
            for &i in uniform_grid(2, 2, k, &mut rng).unwrap().indices() {
                counts[i] += 1;
            }
        }
        let sd = libm::sqrt(n as f64 * 0.2 * 0.8);
        assert!(counts.iter().all(|&c| (c as f64 - n as f64 / 5.0).abs() < 4.0 * sd), "{counts:?}");
    }

    #[test]
    fn sampling_is_seeded() {
        let dist = toy();
        let sched = Schedule::cosine(20, 0.008, 0.999).unwrap();
        let o = OracleDenoiser::new(&dist, &sched);
        let a = sample(&o, &sched, 2, 2, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&o, &sched, 2, 2, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_returns_input() {
        let dist = toy();
        let sched = Schedule::cosine(20, 0.008, 0.999).unwrap();
        let o = OracleDenoiser::new(&dist, &sched);
        let z = dist.support()[1].clone();
        let mask = Mask::filled(2, 2, true).unwrap();
        for seed in 0..10 {
            assert_eq!(inpaint(&o, &sched, &z, &mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(), z);
        }
    }

    #[test]
    fn empty_mask_matches_sample() {
        let dist = toy();
        let sched = Schedule::cosine(20, 0.008, 0.999).unwrap();
        let o = OracleDenoiser::new(&dist, &sched);
        let mask = Mask::filled(2, 2, false).unwrap();
        for seed in 0..10 {
            let a = inpaint(&o, &sched, &dist.support()[0], &mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample(&o, &sched, 2, 2, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn known_positions_are_preserved() {
        let dist = toy();
        let sched = Schedule::cosine(15, 0.008, 0.999).unwrap();
        let o = OracleDenoiser::new(&dist, &sched);
        let mask = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let z = LatentGrid::new(2, 2, 4, vec![3, 3, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = inpaint(&o, &sched, &z, &mask, &mut rng).unwrap();
            assert_eq!((out.get(0), out.get(3)), (3, 2));
        }
    }

    #[test]
    fn mask_shape_is_checked() {
        let dist = toy();
        let sched = Schedule::cosine(5, 0.008, 0.999).unwrap();
        let o = OracleDenoiser::new(&dist, &sched);
        let mask = Mask::filled(1, 4, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(inpaint(&o, &sched, &dist.support()[0], &mask, &mut rng).is_err());
    }
}
