//! Synthetic datasets with known generating distributions.
//!
//! `patterns` is an enumerable distribution over latent grids: the top half
//! of the grid picks one of two stripes, the bottom half one of four
//! checkerboards, and the bottom choice leans on the top one by `coupling`.
//! `clusters` builds images from noisy copies of random patch prototypes, so
//! encoder features form well separated blobs.

use alloc::vec::Vec;

use rand::Rng;

use crate::autoencoder::ToyImage;
use crate::error::domain;
use crate::grid::{GridDistribution, LatentGrid};
use crate::Result;

/// Probabilities of the two top-half options.
pub const TOP_PROBS: [f64; 2] = [0.6, 0.4];
/// Bottom-half preference under the first top option; reversed under the
/// second.
pub const BOTTOM_TILT: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
pub const DEFAULT_COUPLING: f64 = 0.25;

const BOTTOM_PAIRS: [(usize, usize); 4] = [(0, 1), (1, 0), (2, 3), (3, 2)];

/// The grid for top option `a ∈ {0, 1}` and bottom option `b ∈ 0..4`.
pub fn pattern_grid(h: usize, w: usize, k: usize, a: usize, b: usize) -> Result<LatentGrid> {
    if h < 2 || w == 0 || k < 4 {
        return Err(domain!("patterns need h >= 2, w >= 1 and K >= 4"));
    }
    if a > 1 || b > 3 {
        return Err(domain!("pattern option ({a}, {b}) out of range"));
    }
    let top = h / 2;
    let (x, y) = BOTTOM_PAIRS[b];
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            idx.push(if r < top {
                (a + r) % k
            } else if (r + c) % 2 == 0 {
                x
            } else {
                y
            });
        }
    }
    LatentGrid::new(h, w, k, idx)
}

/// `P(b | a) = (1 − λ)/4 + λ·tilt_a[b]`.
pub fn bottom_given_top(a: usize, coupling: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (b, o) in out.iter_mut().enumerate() {
        let tilt = if a == 0 { BOTTOM_TILT[b] } else { BOTTOM_TILT[3 - b] };
        *o = (1.0 - coupling) * 0.25 + coupling * tilt;
    }
    out
}

/// The eight-grid pattern distribution.
pub fn pattern_distribution(h: usize, w: usize, k: usize, coupling: f64) -> Result<GridDistribution> {
    if !(0.0..=1.0).contains(&coupling) {
        return Err(domain!("coupling must lie in [0, 1]"));
    }
    let mut grids = Vec::with_capacity(8);
    let mut weights = Vec::with_capacity(8);
    for (a, pa) in TOP_PROBS.iter().enumerate() {
        for (b, pb) in bottom_given_top(a, coupling).iter().enumerate() {
            grids.push(pattern_grid(h, w, k, a, b)?);
            weights.push(pa * pb);
        }
    }
    GridDistribution::new(grids, weights)
}

/// Prototype patches and noise level behind a `clusters` dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub c: usize,
    pub patch: usize,
    /// `k × (c·patch²)`, each entry in `[0.1, 0.9]`.
    pub prototypes: Vec<f64>,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
}

impl ClusterSpec {
    pub fn random<R: Rng + ?Sized>(k: usize, c: usize, patch: usize, noise: f64, rng: &mut R) -> Result<Self> {
        if k == 0 || c == 0 || patch == 0 {
            return Err(domain!("prototype count, channels and patch must be positive"));
        }
        if !(0.0..=0.1).contains(&noise) {
            return Err(domain!("noise must lie in [0, 0.1]"));
        }
        let n = c * patch * patch;
        let prototypes = (0..k * n).map(|_| rng.random_range(0.1..0.9)).collect();
        Ok(Self { c, patch, prototypes, noise })
    }

    pub fn k(&self) -> usize {
        self.prototypes.len() / self.patch_len()
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.patch * self.patch
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.prototypes[i * n..(i + 1) * n]
    }

    /// One `h × w` image; each patch copies a uniformly chosen prototype
    /// plus noise, rounded to 8-bit levels.
    pub fn image<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<ToyImage> {
        let p = self.patch;
        if h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(domain!("{h}x{w} image is not a whole number of {p}-pixel patches"));
        }
        let mut pixels = alloc::vec![0.0; self.c * h * w];
        for gy in 0..h / p {
            for gx in 0..w / p {
                let proto = self.prototype(rng.random_range(0..self.k()));
                let mut it = proto.iter();
                for ch in 0..self.c {
                    for py in 0..p {
                        for px in 0..p {
                            let base = *it.next().unwrap();
                            let v = if self.noise > 0.0 { base + rng.random_range(-self.noise..self.noise) } else { base };
                            pixels[(ch * h + gy * p + py) * w + gx * p + px] = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
                        }
                    }
                }
            }
        }
        ToyImage::new(self.c, h, w, pixels)
    }

    pub fn images<R: Rng + ?Sized>(&self, h: usize, w: usize, count: usize, rng: &mut R) -> Result<Vec<ToyImage>> {
        (0..count).map(|_| self.image(h, w, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_layout() {
        let g = pattern_grid(2, 2, 4, 1, 2).unwrap();
        assert_eq!(g.indices(), &[1, 1, 3, 2]);
        let g = pattern_grid(4, 3, 5, 1, 0).unwrap();
        assert_eq!(g.indices(), &[1, 1, 1, 2, 2, 2, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn distribution_has_eight_grids() {
        let d = pattern_distribution(2, 2, 4, DEFAULT_COUPLING).unwrap();
        assert_eq!(d.support().len(), 8);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let p = d.prob_of(&pattern_grid(2, 2, 4, 0, 0).unwrap());
        assert!((p - 0.6 * (0.75 * 0.25 + 0.25 * 0.4)).abs() < 1e-15);
        assert!(pattern_distribution(2, 2, 3, 0.25).is_err());
    }

    #[test]
    fn zero_coupling_is_independent() {
        for a in 0..2 {
            assert_eq!(bottom_given_top(a, 0.0), [0.25; 4]);
        }
    }

    #[test]
    fn cluster_images_stay_near_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ClusterSpec::random(6, 1, 2, 0.02, &mut rng).unwrap();
        let img = spec.image(4, 6, &mut rng).unwrap();
        for gy in 0..2 {
            for gx in 0..3 {
                let patch: Vec<f64> = (0..2)
                    .flat_map(|py| (0..2).map(move |px| (gy * 2 + py, gx * 2 + px)))
                    .map(|(y, x)| img.pixels()[y * 6 + x])
                    .collect();
                let close = (0..6).any(|k| {
                    spec.prototype(k).iter().zip(&patch).all(|(a, b)| (a - b).abs() <= 0.02 + 0.5 / 255.0)
                });
                assert!(close);
            }
        }
        assert!(img.pixels().iter().all(|v| (v * 255.0 - libm::round(v * 255.0)).abs() < 1e-9));
    }
}
