use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::categorical_from_uniform;

/// Importance sampler over timesteps `1..=T`.
///
/// Keeps the last `capacity` squared losses per step. Until every step has a
/// full buffer it samples uniformly; afterwards `q(t) ∝ sqrt(mean L_t²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSampler {
    steps: usize,
    capacity: usize,
    history: Vec<VecDeque<f64>>,
}

impl TimestepSampler {
    pub const DEFAULT_CAPACITY: usize = 10;

    pub fn new(steps: usize) -> Self {
        Self::with_capacity(steps, Self::DEFAULT_CAPACITY)
    }

    pub fn with_capacity(steps: usize, capacity: usize) -> Self {
        assert!(steps >= 1 && capacity >= 1);
        Self { steps, capacity, history: (0..steps).map(|_| VecDeque::with_capacity(capacity)).collect() }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// True once every step has a full history.
    pub fn is_warm(&self) -> bool {
        self.history.iter().all(|h| h.len() == self.capacity)
    }

    pub fn record(&mut self, t: usize, loss: f64) {
        if !loss.is_finite() {
            return;
        }
        let h = &mut self.history[t - 1];
        if h.len() == self.capacity {
            h.pop_front();
        }
        h.push_back(loss * loss);
    }

    /// Sampling probabilities, entry `i` for `t = i + 1`.
    pub fn weights(&self) -> Vec<f64> {
        let uniform = || alloc::vec![1.0 / self.steps as f64; self.steps];
        if !self.is_warm() {
            return uniform();
        }
        let raw: Vec<f64> = self
            .history
            .iter()
            .map(|h| libm::sqrt(h.iter().sum::<f64>() / h.len() as f64))
            .collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return uniform();
        }
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Draws `t` with its sampling probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let w = self.weights();
        let i = categorical_from_uniform(&w, rng.random());
        (i + 1, w[i])
    }

    /// Recorded squared losses for step `t`, oldest first.
    pub fn history(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        self.history[t - 1].iter().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_until_warm() {
        let mut s = TimestepSampler::new(3);
        for _ in 0..10 {
            s.record(1, 5.0);
            s.record(2, 1.0);
        }
        assert!(!s.is_warm());
        assert!(s.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn weights_follow_root_mean_square() {
        let steps = 8;
        let mut s = TimestepSampler::new(steps);
        for _ in 0..12 {
            for t in 1..=steps {
                s.record(t, t as f64);
            }
        }
        assert!(s.is_warm());
        // sqrt(mean(t²)) = t for a constant loss; normalize by Σt.
        let norm: f64 = (1..=steps).map(|t| t as f64).sum();
        for (i, w) in s.weights().iter().enumerate() {
            assert!((w - (i + 1) as f64 / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn ring_buffer_keeps_latest() {
        let mut s = TimestepSampler::with_capacity(1, 3);
        for x in 1..=5 {
            s.record(1, x as f64);
        }
        assert_eq!(s.history(1).collect::<Vec<_>>(), alloc::vec![9.0, 16.0, 25.0]);
    }
}
