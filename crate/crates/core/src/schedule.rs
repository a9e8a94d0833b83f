//! Cosine keep-probability schedule for the categorical chain.
//!
//! `alpha_bar(t)` is the probability that a token survives `t` steps without
//! being resampled. It follows `f(t) / f(0)` with
//! `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`. Per-step mixing probabilities
//! are derived from consecutive ratios and capped, after which the cumulative
//! products are recomputed so that `alpha_bar(t) = Π alpha(u)` holds exactly
//! as stored.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::domain;
use crate::Result;

pub const DEFAULT_STEPS: usize = 4000;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_CAP: f64 = 0.999;

/// Evaluates the cosine `alpha_bar` at step `t` of a `steps`-step chain.
pub fn cosine_alpha_bar(t: usize, steps: usize, offset: f64) -> Result<f64> {
    if steps == 0 {
        return Err(domain!("schedule needs at least one step"));
    }
    if t > steps {
        return Err(domain!("t={t} exceeds T={steps}"));
    }
    if !(offset > 0.0) {
        return Err(domain!("offset must be positive, got {offset}"));
    }
    let f = |t: usize| {
        let c = libm::cos(((t as f64 / steps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2);
        c * c
    };
    Ok(f(t) / f(0))
}

/// Precomputed noise parameters for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    offset: f64,
    beta_cap: f64,
    // Index 0 holds the identity step (beta 0, alpha 1) so that indexing by t
    // needs no offset.
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Schedule {
    /// Builds the cosine schedule with betas capped at `beta_cap`.
    pub fn cosine(steps: usize, offset: f64, beta_cap: f64) -> Result<Self> {
        if !(beta_cap > 0.0 && beta_cap < 1.0) {
            return Err(domain!("beta cap must lie in (0, 1), got {beta_cap}"));
        }
        let raw = (0..=steps)
            .map(|t| cosine_alpha_bar(t, steps, offset))
            .collect::<Result<Vec<_>>>()?;
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        for t in 1..=steps {
            let b = 1.0 - raw[t] / raw[t - 1];
            beta.push(b.min(beta_cap));
        }
        let schedule = Self::from_betas_unchecked(steps, offset, beta_cap, beta);
        schedule.validate()?;
        Ok(schedule)
    }

    /// Rebuilds a schedule from stored betas (index 0 must be 0).
    pub fn from_betas(steps: usize, offset: f64, beta_cap: f64, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != steps + 1 || beta[0] != 0.0 {
            return Err(domain!("expected {} betas with beta[0] = 0", steps + 1));
        }
        let s = Self::from_betas_unchecked(steps, offset, beta_cap, beta);
        s.validate()?;
        Ok(s)
    }

    fn from_betas_unchecked(steps: usize, offset: f64, beta_cap: f64, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        }
        Self { steps, offset, beta_cap, alpha_bar, alpha, beta }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(domain!("schedule needs at least one step"));
        }
        for t in 1..=self.steps {
            let b = self.beta[t];
            if !(b > 0.0 && b <= 1.0) {
                return Err(domain!("beta[{t}] = {b} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn beta_cap(&self) -> f64 {
        self.beta_cap
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// All betas, index 0 included.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values computed with mpmath at 50 digits straight from the
    // cosine formula.
    const AB_2000_OF_4000: f64 = 0.493_843_590_440_637_7;

    #[test]
    fn alpha_bar_endpoints() {
        assert_eq!(cosine_alpha_bar(0, 4000, 0.008).unwrap(), 1.0);
        let mid = cosine_alpha_bar(2000, 4000, 0.008).unwrap();
        assert!((mid - AB_2000_OF_4000).abs() < 1e-14, "{mid}");
        assert!((mid - 0.4940).abs() < 1e-3);
        let end = cosine_alpha_bar(4000, 4000, 0.008).unwrap();
        assert!(end > 0.0 && end < 1e-3, "{end}");
    }

    #[test]
    fn alpha_bar_domain_errors() {
        assert!(cosine_alpha_bar(5, 4, 0.008).is_err());
        assert!(cosine_alpha_bar(0, 0, 0.008).is_err());
        assert!(cosine_alpha_bar(0, 4, 0.0).is_err());
    }

    #[test]
    fn single_step_chain_is_capped() {
        let s = Schedule::cosine(1, 0.008, 0.999).unwrap();
        let raw = 1.0 - cosine_alpha_bar(1, 1, 0.008).unwrap();
        assert_eq!(s.beta(1), raw.min(0.999));
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
    }

    #[test]
    fn long_chain_ends_near_uniform() {
        let s = Schedule::cosine(4000, 0.008, 0.999).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(4000) < 1e-3 && s.alpha_bar(4000) > 0.0);
        assert!((1..=4000).all(|t| s.beta(t) > 0.0 && s.beta(t) <= 0.999));
    }

    #[test]
    fn short_chain_betas_in_range() {
        let s = Schedule::cosine(10, 0.008, 0.999).unwrap();
        assert!((1..=10).all(|t| s.beta(t) > 0.0 && s.beta(t) <= 0.999));
    }

    #[test]
    fn rejects_bad_cap() {
        assert!(Schedule::cosine(10, 0.008, 1.0).is_err());
        assert!(Schedule::cosine(10, 0.008, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..=10_000, offset in 1e-3f64..0.1) {
            let s = Schedule::cosine(steps, offset, DEFAULT_BETA_CAP).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            let mut prod = 1.0;
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) <= 1.0);
                prop_assert!((s.alpha(t) - s.alpha_bar(t) / s.alpha_bar(t - 1)).abs() <= 4.0 * f64::EPSILON);
                prop_assert!((s.beta(t) - (1.0 - s.alpha(t))).abs() <= f64::EPSILON);
                prod *= s.alpha(t);
                prop_assert!(((prod - s.alpha_bar(t)) / s.alpha_bar(t)).abs() < 1e-12);
            }
        }

        #[test]
        fn betas_nondecreasing_before_cap(steps in 2usize..=4000, offset in 1e-3f64..0.1) {
            let s = Schedule::cosine(steps, offset, DEFAULT_BETA_CAP).unwrap();
            for t in 2..=steps {
                if s.beta(t) < DEFAULT_BETA_CAP {
                    prop_assert!(s.beta(t) + 1e-12 >= s.beta(t - 1), "t={}", t);
                }
            }
        }
    }
}
