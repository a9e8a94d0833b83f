//! Grid containers: category maps, per-position distributions, feature maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, shape};
use crate::Result;

/// An `h × w` map of category indices in `0..k`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatentGrid {
    h: usize,
    w: usize,
    k: usize,
    idx: Vec<usize>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, k: usize, idx: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(domain!("latent grid must be non-empty, got {h}x{w}"));
        }
        if k == 0 {
            return Err(domain!("category count must be positive"));
        }
        if idx.len() != h * w {
            return Err(shape!("{} indices for a {h}x{w} grid", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(domain!("index {bad} out of range for K={k}"));
        }
        Ok(Self { h, w, k, idx })
    }

    pub fn filled(h: usize, w: usize, k: usize, value: usize) -> Result<Self> {
        Self::new(h, w, k, vec![value; h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn get(&self, pos: usize) -> usize {
        self.idx[pos]
    }

    pub(crate) fn set(&mut self, pos: usize, value: usize) {
        debug_assert!(value < self.k);
        self.idx[pos] = value;
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.h == other.h && self.w == other.w && self.k == other.k
    }

    /// The one-hot encoding of every position.
    pub fn one_hot(&self) -> ProbGrid {
        let mut p = vec![0.0; self.len() * self.k];
        for (pos, &i) in self.idx.iter().enumerate() {
            p[pos * self.k + i] = 1.0;
        }
        ProbGrid { h: self.h, w: self.w, k: self.k, p }
    }
}

/// An `h × w` grid of probability vectors over `k` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    h: usize,
    w: usize,
    k: usize,
    p: Vec<f64>,
}

impl ProbGrid {
    /// Tolerance on each row's sum.
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(h: usize, w: usize, k: usize, p: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || k == 0 {
            return Err(domain!("probability grid must be non-empty"));
        }
        if p.len() != h * w * k {
            return Err(shape!("{} entries for a {h}x{w}x{k} grid", p.len()));
        }
        let grid = Self { h, w, k, p };
        for pos in 0..h * w {
            let row = grid.row(pos);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > Self::SUM_TOL {
                return Err(domain!("row {pos} is not a distribution (sum {sum})"));
            }
        }
        Ok(grid)
    }

    /// Every position uniform over `k` categories.
    pub fn uniform(h: usize, w: usize, k: usize) -> Self {
        Self { h, w, k, p: vec![1.0 / k as f64; h * w * k] }
    }

    pub(crate) fn from_raw(h: usize, w: usize, k: usize, p: Vec<f64>) -> Self {
        debug_assert_eq!(p.len(), h * w * k);
        Self { h, w, k, p }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.p[pos * self.k..(pos + 1) * self.k]
    }

    pub(crate) fn row_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.p[pos * self.k..(pos + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn matches(&self, z: &LatentGrid) -> bool {
        self.h == z.h && self.w == z.w && self.k == z.k
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.len())
            .map(|pos| (self.row(pos).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// An `h × w` grid of `d`-dimensional real vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    d: usize,
    v: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, d: usize, v: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(domain!("feature grid must be non-empty"));
        }
        if v.len() != h * w * d {
            return Err(shape!("{} values for a {h}x{w}x{d} feature grid", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(crate::Error::NonFinite("feature grid".into()));
        }
        Ok(Self { h, w, d, v })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d, v: vec![0.0; h * w * d] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.v[pos * self.d..(pos + 1) * self.d]
    }

    pub(crate) fn vector_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.v[pos * self.d..(pos + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }
}

/// A finite distribution over latent grids of one shape.
///
/// Used as ground truth for enumeration oracles and total-variation checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistribution {
    grids: Vec<LatentGrid>,
    probs: Vec<f64>,
}

impl GridDistribution {
    /// Builds a distribution, normalizing `weights` and merging duplicates.
    pub fn new(grids: Vec<LatentGrid>, weights: Vec<f64>) -> Result<Self> {
        if grids.is_empty() {
            return Err(domain!("distribution support is empty"));
        }
        if grids.len() != weights.len() {
            return Err(shape!("{} grids but {} weights", grids.len(), weights.len()));
        }
        let first = &grids[0];
        if let Some(g) = grids.iter().find(|g| !g.same_shape(first)) {
            return Err(shape!(
                "support mixes {}x{}x{} and {}x{}x{} grids",
                first.h, first.w, first.k, g.h, g.w, g.k
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(domain!("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(domain!("weights sum to zero"));
        }
        let mut merged: alloc::collections::BTreeMap<LatentGrid, f64> = Default::default();
        for (g, w) in grids.into_iter().zip(weights) {
            *merged.entry(g).or_insert(0.0) += w / total;
        }
        let (grids, probs) = merged.into_iter().filter(|(_, p)| *p > 0.0).unzip();
        Ok(Self { grids, probs })
    }

    pub fn support(&self) -> &[LatentGrid] {
        &self.grids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LatentGrid, f64)> {
        self.grids.iter().zip(self.probs.iter().copied())
    }

    pub fn prob_of(&self, z: &LatentGrid) -> f64 {
        self.grids.binary_search(z).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    /// Shape `(h, w, k)` shared by the support.
    pub fn shape(&self) -> (usize, usize, usize) {
        let g = &self.grids[0];
        (g.h, g.w, g.k)
    }

    /// Draws one grid.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> LatentGrid {
        self.grids[crate::math::sample_categorical(&self.probs, rng)].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_grid_rejects_out_of_range() {
        assert!(LatentGrid::new(1, 2, 3, vec![0, 3]).is_err());
        assert!(LatentGrid::new(0, 2, 3, vec![]).is_err());
        assert!(LatentGrid::new(1, 2, 3, vec![0]).is_err());
        assert!(LatentGrid::new(1, 2, 3, vec![0, 2]).is_ok());
    }

    #[test]
    fn prob_grid_validates_rows() {
        assert!(ProbGrid::new(1, 1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbGrid::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(ProbGrid::new(1, 1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn one_hot_places_mass() {
        let z = LatentGrid::new(1, 2, 3, vec![2, 0]).unwrap();
        assert_eq!(z.one_hot().as_slice(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn distribution_merges_and_normalizes() {
        let a = LatentGrid::new(1, 1, 2, vec![0]).unwrap();
        let b = LatentGrid::new(1, 1, 2, vec![1]).unwrap();
        let d = GridDistribution::new(vec![a.clone(), b.clone(), a.clone()], vec![1.0, 2.0, 1.0])
            .unwrap();
        assert_eq!(d.support().len(), 2);
        assert!((d.prob_of(&a) - 0.5).abs() < 1e-15);
        assert!((d.prob_of(&b) - 0.5).abs() < 1e-15);
    }
}
