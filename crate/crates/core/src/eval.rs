//! Likelihood bounds, distribution distances and codebook statistics.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autoencoder::{ToyAutoencoder, ToyImage};
use crate::codebook::{Codebook, UsageTracker};
use crate::diffusion::{vlb, Denoiser, VlbMode};
use crate::error::domain;
use crate::grid::{GridDistribution, LatentGrid};
use crate::math::{sq_dist, CompensatedSum};
use crate::{Result, Schedule};

/// Mean exact-mode variational bound in bits per position, over `passes`
/// sweeps of `dataset`.
pub fn nll_bits<D, R>(dataset: &[LatentGrid], denoiser: &D, sched: &Schedule, rng: &mut R, passes: usize) -> Result<f64>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    if passes == 0 {
        return Err(domain!("need at least one pass"));
    }
    if dataset.is_empty() {
        return Err(domain!("dataset is empty"));
    }
    let mut total = CompensatedSum::default();
    for _ in 0..passes {
        for z0 in dataset {
            total.add(vlb(z0, denoiser, sched, rng, VlbMode::Exact)?.total_bits_per_pos);
        }
    }
    Ok(total.value() / (passes * dataset.len()) as f64)
}

/// Half the L1 distance between the empirical distribution of `samples` and
/// `truth`, counting mass outside the support.
pub fn tv_distance_empirical(samples: &[LatentGrid], truth: &GridDistribution) -> f64 {
    if samples.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<&LatentGrid, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for (g, p) in truth.iter() {
        let e = counts.remove(g).unwrap_or(0) as f64 / n;
        total += (e - p).abs();
    }
    for c in counts.values() {
        total += *c as f64 / n;
    }
    0.5 * total
}

/// Total variation between two explicit distributions.
pub fn tv_distance(a: &GridDistribution, b: &GridDistribution) -> f64 {
    let mut total = 0.0;
    for (g, p) in a.iter() {
        total += (p - b.prob_of(g)).abs();
    }
    for (g, q) in b.iter() {
        if a.prob_of(g) == 0.0 {
            total += q;
        }
    }
    0.5 * total
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageReport {
    pub usage: f64,
    /// Selections per code over the dataset.
    pub histogram: Vec<u64>,
}

/// Encodes and quantizes every image; the codebook's own counters are left
/// alone.
pub fn usage_report(dataset: &[ToyImage], ae: &ToyAutoencoder, cb: &Codebook) -> Result<UsageReport> {
    let mut tracker = UsageTracker::new(cb.k());
    let mut histogram = vec![0u64; cb.k()];
    for img in dataset {
        let (z, _) = cb.lookup(&ae.encode(img)?)?;
        tracker.add(&z)?;
        for &i in z.indices() {
            histogram[i] += 1;
        }
    }
    Ok(UsageReport { usage: tracker.usage(), histogram })
}

/// Mean squared distance per feature component between encoder outputs and
/// their quantized vectors.
pub fn quantization_mse(dataset: &[ToyImage], ae: &ToyAutoencoder, cb: &Codebook) -> Result<f64> {
    if dataset.is_empty() {
        return Err(domain!("dataset is empty"));
    }
    let mut total = CompensatedSum::default();
    let mut count = 0usize;
    for img in dataset {
        let h = ae.encode(img)?;
        let (_, zq) = cb.lookup(&h)?;
        total.add(sq_dist(h.as_slice(), zq.as_slice()));
        count += h.as_slice().len();
    }
    Ok(total.value() / count as f64)
}
