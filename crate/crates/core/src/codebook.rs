//! Nearest-neighbour codebook, VQ loss terms and codebook usage.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, shape};
use crate::grid::{FeatureGrid, LatentGrid};
use crate::math::sq_dist;
use crate::{Error, Result};

/// Conventional commitment weight.
pub const DEFAULT_COMMITMENT: f64 = 0.25;

/// `K` code vectors of dimension `d` plus a running count of selections.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    vectors: Vec<f64>,
    hit_counts: Vec<u64>,
}

impl Codebook {
    /// `vectors` is row-major `k × d`. An empty codebook is representable but
    /// cannot quantize.
    pub fn new(k: usize, d: usize, vectors: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(domain!("code dimension must be positive"));
        }
        if vectors.len() != k * d {
            return Err(shape!("{} values for {k} codes of dimension {d}", vectors.len()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook vectors".into()));
        }
        Ok(Self { k, d, vectors, hit_counts: vec![0; k] })
    }

    pub fn with_hits(k: usize, d: usize, vectors: Vec<f64>, hit_counts: Vec<u64>) -> Result<Self> {
        let mut cb = Self::new(k, d, vectors)?;
        if hit_counts.len() != k {
            return Err(shape!("{} hit counts for {k} codes", hit_counts.len()));
        }
        cb.hit_counts = hit_counts;
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub(crate) fn vector_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn hit_counts(&self) -> &[u64] {
        &self.hit_counts
    }

    pub fn reset_hits(&mut self) {
        self.hit_counts.fill(0);
    }

    /// Adds one hit per position of `z`.
    pub fn record_hits(&mut self, z: &LatentGrid) {
        for &i in z.indices() {
            self.hit_counts[i] += 1;
        }
    }

    /// Index of the nearest code in squared L2, lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> Result<usize> {
        if self.k == 0 {
            return Err(domain!("codebook is empty"));
        }
        if v.len() != self.d {
            return Err(shape!("feature of dimension {} against codes of dimension {}", v.len(), self.d));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.k {
            let dist = sq_dist(v, self.vector(i));
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        Ok(best)
    }

    /// Quantizes without touching the hit counts.
    pub fn lookup(&self, h: &FeatureGrid) -> Result<(LatentGrid, FeatureGrid)> {
        if h.d() != self.d {
            return Err(shape!("features have d={}, codebook d={}", h.d(), self.d));
        }
        if self.k == 0 {
            return Err(domain!("codebook is empty"));
        }
        let mut idx = Vec::with_capacity(h.len());
        let mut zq = FeatureGrid::zeros(h.h(), h.w(), self.d);
        for pos in 0..h.len() {
            let i = self.nearest(h.vector(pos))?;
            idx.push(i);
            zq.vector_mut(pos).copy_from_slice(self.vector(i));
        }
        Ok((LatentGrid::new(h.h(), h.w(), self.k, idx)?, zq))
    }

    /// Quantizes and counts the selections.
    pub fn quantize(&mut self, h: &FeatureGrid) -> Result<(LatentGrid, FeatureGrid)> {
        let out = self.lookup(h)?;
        self.record_hits(&out.0);
        Ok(out)
    }

    /// Pairs of codes whose vectors are bit-identical.
    pub fn duplicate_codes(&self) -> Vec<(usize, usize)> {
        let mut dups = Vec::new();
        for i in 0..self.k {
            for j in i + 1..self.k {
                let same = self.vector(i).iter().zip(self.vector(j)).all(|(a, b)| a.to_bits() == b.to_bits());
                if same {
                    dups.push((i, j));
                }
            }
        }
        dups
    }

    /// Logs a warning when two codes coincide. Returns the number of pairs.
    pub fn warn_duplicates(&self) -> usize {
        let dups = self.duplicate_codes();
        if let Some(&(i, j)) = dups.first() {
            log::warn!("{} duplicate code pairs, first ({i}, {j})", dups.len());
        }
        dups.len()
    }
}

/// The three VQ training terms, all sums of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

/// `(‖x − x̂‖², ‖sg[h] − z_q‖², β‖sg[z_q] − h‖²)`.
///
/// The stop-gradient only matters for which parameters each term trains; the
/// values of the second and third terms differ just by `β`.
pub fn vq_loss(x: &[f64], x_hat: &[f64], enc_out: &FeatureGrid, z_q: &FeatureGrid, beta: f64) -> Result<VqLoss> {
    if x.len() != x_hat.len() {
        return Err(shape!("image has {} values, reconstruction {}", x.len(), x_hat.len()));
    }
    if !enc_out.same_shape(z_q) {
        return Err(shape!("encoder output and quantized grid differ in shape"));
    }
    let rec = sq_dist(x, x_hat);
    let code = sq_dist(enc_out.as_slice(), z_q.as_slice());
    Ok(VqLoss { reconstruction: rec, codebook: code, commitment: beta * code })
}

/// Quantization with a pass-through gradient.
///
/// The forward value is `z_q`; the backward map hands the downstream gradient
/// to the encoder output unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightThrough {
    value: FeatureGrid,
}

pub fn straight_through(enc_out: &FeatureGrid, z_q: &FeatureGrid) -> Result<StraightThrough> {
    if !enc_out.same_shape(z_q) {
        return Err(shape!("encoder output and quantized grid differ in shape"));
    }
    Ok(StraightThrough { value: z_q.clone() })
}

impl StraightThrough {
    pub fn value(&self) -> &FeatureGrid {
        &self.value
    }

    /// `∂L/∂enc_out` given `∂L/∂value`.
    pub fn backward(&self, grad_value: &[f64]) -> Vec<f64> {
        assert_eq!(grad_value.len(), self.value.as_slice().len());
        grad_value.to_vec()
    }
}

/// Distinct codes seen so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageTracker {
    seen: Vec<bool>,
    distinct: usize,
}

impl UsageTracker {
    pub fn new(k: usize) -> Self {
        Self { seen: vec![false; k], distinct: 0 }
    }

    pub fn add(&mut self, z: &LatentGrid) -> Result<()> {
        if z.k() > self.seen.len() {
            return Err(domain!("grid over K={} fed to a tracker for K={}", z.k(), self.seen.len()));
        }
        for &i in z.indices() {
            if !self.seen[i] {
                self.seen[i] = true;
                self.distinct += 1;
            }
        }
        Ok(())
    }

    pub fn distinct(&self) -> usize {
        self.distinct
    }

    pub fn usage(&self) -> f64 {
        if self.seen.is_empty() {
            return 0.0;
        }
        self.distinct as f64 / self.seen.len() as f64
    }
}

/// Fraction of the `k` codes that appear anywhere in `stream`.
pub fn usage<'a, I>(stream: I, k: usize) -> Result<f64>
where
    I: IntoIterator<Item = &'a LatentGrid>,
{
    let mut tracker = UsageTracker::new(k);
    for z in stream {
        tracker.add(z)?;
    }
    Ok(tracker.usage())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_nearest_and_breaks_ties_low() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.1, 0.2]).unwrap(), 0);
        // Codes 3 and 7 sit at distance 1 from the origin, the rest farther.
        let mut v = vec![5.0; 16];
        v[6..8].copy_from_slice(&[1.0, 0.0]);
        v[14..16].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebook::new(8, 2, v).unwrap();
        assert_eq!(cb.nearest(&[0.0, 0.0]).unwrap(), 3);
    }

    #[test]
    fn empty_codebook_errors() {
        let cb = Codebook::new(0, 3, vec![]).unwrap();
        assert!(cb.nearest(&[0.0; 3]).is_err());
        assert!(cb.lookup(&FeatureGrid::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn quantized_vectors_are_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, d) = (16, 3);
        let vecs: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cb = Codebook::new(k, d, vecs.clone()).unwrap();
        let feats: Vec<f64> = (0..1000 * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let h = FeatureGrid::new(10, 100, d, feats).unwrap();
        let (z, zq) = cb.quantize(&h).unwrap();
        for pos in 0..1000 {
            let i = z.get(pos);
            assert_eq!(zq.vector(pos), &vecs[i * d..(i + 1) * d]);
            let f = h.vector(pos);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist: f64 = (0..d).map(|j| (f[j] - vecs[c * d + j]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assert_eq!(i, best.1);
        }
        assert_eq!(cb.hit_counts().iter().sum::<u64>(), 1000);
        cb.reset_hits();
        assert!(cb.hit_counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn lookup_leaves_counts_alone() {
        let cb = Codebook::new(2, 1, vec![0.0, 1.0]).unwrap();
        cb.lookup(&FeatureGrid::zeros(2, 2, 1)).unwrap();
        assert_eq!(cb.hit_counts(), &[0, 0]);
    }

    #[test]
    fn detects_duplicates() {
        let cb = Codebook::new(3, 1, vec![0.5, 1.0, 0.5]).unwrap();
        assert_eq!(cb.duplicate_codes(), vec![(0, 2)]);
        assert_eq!(cb.warn_duplicates(), 1);
    }

    #[test]
    fn vq_loss_terms() {
        let h = FeatureGrid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = vq_loss(&[0.5], &[0.5], &h, &h, 0.25).unwrap();
        assert_eq!((l.reconstruction, l.codebook, l.commitment), (0.0, 0.0, 0.0));

        let eps = 0.01;
        let u = [0.6, 0.8];
        let zq = FeatureGrid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let shifted: Vec<f64> = zq.as_slice().iter().enumerate().map(|(i, v)| v + eps * u[i % 2]).collect();
        let enc = FeatureGrid::new(1, 2, 2, shifted).unwrap();
        let l = vq_loss(&[1.0, 0.0], &[0.0, 0.0], &enc, &zq, DEFAULT_COMMITMENT).unwrap();
        assert_eq!(l.reconstruction, 1.0);
        assert!((l.codebook - 2.0 * eps * eps).abs() < 1e-15);
        assert_eq!(l.commitment, 0.25 * l.codebook);
        assert!((l.total() - (1.0 + 1.25 * l.codebook)).abs() < 1e-15);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let enc = FeatureGrid::new(1, 1, 3, vec![0.2, -0.1, 0.4]).unwrap();
        let zq = FeatureGrid::new(1, 1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let st = straight_through(&enc, &zq).unwrap();
        assert_eq!(st.value(), &zq);
        // L = Σ out²  ⇒  ∂L/∂out = 2·z_q, passed through unchanged.
        let g: Vec<f64> = st.value().as_slice().iter().map(|v| 2.0 * v).collect();
        assert_eq!(st.backward(&g), vec![0.0, 0.0, 2.0]);
        assert_eq!(st.backward(&[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn usage_counts_distinct() {
        let z = LatentGrid::new(1, 4, 8, vec![0, 1, 1, 3]).unwrap();
        assert_eq!(usage([&z], 8).unwrap(), 0.375);
        let all = LatentGrid::new(2, 4, 8, (0..8).collect()).unwrap();
        assert_eq!(usage([&z, &all], 8).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn usage_is_monotone(grids in proptest::collection::vec(proptest::collection::vec(0usize..6, 3), 1..20)) {
            let mut tracker = UsageTracker::new(6);
            let mut last = 0.0;
            for g in grids {
                tracker.add(&LatentGrid::new(1, 3, 6, g).unwrap()).unwrap();
                prop_assert!(tracker.usage() >= last);
                prop_assert!(tracker.usage() <= 1.0);
                last = tracker.usage();
            }
        }

        #[test]
        fn vq_terms_nonnegative(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            y in proptest::collection::vec(-5.0f64..5.0, 4),
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            beta in 0.0f64..2.0,
        ) {
            let ga = FeatureGrid::new(2, 2, 1, a).unwrap();
            let gb = FeatureGrid::new(2, 2, 1, b).unwrap();
            let l = vq_loss(&x, &y, &ga, &gb, beta).unwrap();
            prop_assert!(l.reconstruction >= 0.0 && l.codebook >= 0.0 && l.commitment >= 0.0);
        }

        #[test]
        fn nearest_is_minimal(
            codes in proptest::collection::vec(-3.0f64..3.0, 2..40),
            f in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let k = codes.len() / 2;
            let cb = Codebook::new(k, 2, codes[..2 * k].to_vec()).unwrap();
            let best = cb.nearest(&f).unwrap();
            let d_best = sq_dist(&f, cb.vector(best));
            for i in 0..k {
                prop_assert!(d_best <= sq_dist(&f, cb.vector(i)));
            }
        }
    }
}
