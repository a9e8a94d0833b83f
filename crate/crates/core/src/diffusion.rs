//! Uniform-mixing categorical diffusion.
//!
//! One forward step keeps a token with probability `1 - β` and otherwise
//! resamples it uniformly over `K` categories, i.e. the kernel
//! `Q = (1 - β)·I + β/K`. Products of such kernels stay in the family, which
//! gives the closed-form marginal `q(z_t | z_0) = ᾱ_t·z_0 + (1 - ᾱ_t)/K` and
//! the Bayes posterior
//!
//! ```text
//! θ(z_t, z_0) = [α_t·z_t + (1 - α_t)/K] ⊙ [ᾱ_{t-1}·z_0 + (1 - ᾱ_{t-1})/K]
//! q(z_{t-1} | z_t, z_0) = θ / Σθ
//! ```
//!
//! `Q` is symmetric here, so the transpose that appears in the general
//! posterior is dropped. Do not reuse these shortcuts for asymmetric kernels.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;

use rand::Rng;

use crate::denoiser::TimestepSampler;
use crate::error::{domain, shape};
use crate::grid::{LatentGrid, ProbGrid};
use crate::math::{categorical_from_uniform, CompensatedSum, PROB_FLOOR};
use crate::{Result, Schedule};

/// A row-stochastic `K × K` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    q: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let mut q = vec![0.0; k * k];
        for i in 0..k {
            q[i * k + i] = 1.0;
        }
        Self { k, q }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.q[from * self.k + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.q[from * self.k..(from + 1) * self.k]
    }

    /// Matrix product `self · next`: first apply `self`, then `next`.
    pub fn then(&self, next: &TransitionMatrix) -> Self {
        assert_eq!(self.k, next.k, "kernel sizes differ");
        let k = self.k;
        let mut q = vec![0.0; k * k];
        for i in 0..k {
            for m in 0..k {
                let a = self.q[i * k + m];
                if a == 0.0 {
                    continue;
                }
                for j in 0..k {
                    q[i * k + j] += a * next.q[m * k + j];
                }
            }
        }
        Self { k, q }
    }
}

/// The one-step kernel `(1 - β)·I + β/K`.
pub fn transition_matrix(beta: f64, k: usize) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(domain!("need at least two categories, got {k}"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(domain!("beta must lie in [0, 1], got {beta}"));
    }
    let off = beta / k as f64;
    let mut q = vec![off; k * k];
    for i in 0..k {
        q[i * k + i] = 1.0 - beta + off;
    }
    Ok(TransitionMatrix { k, q })
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(domain!("beta must lie in [0, 1], got {beta}"));
    }
    Ok(())
}

/// One forward step applied to a distribution: `(1 - β)·p + β/K` per position.
pub fn q_step(z_prev: &ProbGrid, beta: f64) -> Result<ProbGrid> {
    check_beta(beta)?;
    let floor = beta / z_prev.k() as f64;
    let p = z_prev.as_slice().iter().map(|&x| (1.0 - beta) * x + floor).collect();
    Ok(ProbGrid::from_raw(z_prev.h(), z_prev.w(), z_prev.k(), p))
}

/// Closed-form `q(z_t | z_0)` given `ᾱ_t`.
pub fn q_marginal(z0: &LatentGrid, alpha_bar: f64) -> Result<ProbGrid> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(domain!("alpha_bar must lie in [0, 1], got {alpha_bar}"));
    }
    let k = z0.k();
    let mut p = vec![(1.0 - alpha_bar) / k as f64; z0.len() * k];
    for (pos, &i) in z0.indices().iter().enumerate() {
        p[pos * k + i] += alpha_bar;
    }
    Ok(ProbGrid::from_raw(z0.h(), z0.w(), k, p))
}

/// Draws `z_t ~ q(z_t | z_0)` independently per position.
///
/// Consumes exactly one uniform per position. `t = 0` returns `z0`.
pub fn sample_q<R: Rng + ?Sized>(
    z0: &LatentGrid,
    t: usize,
    sched: &Schedule,
    rng: &mut R,
) -> Result<LatentGrid> {
    if t > sched.steps() {
        return Err(domain!("t={t} exceeds T={}", sched.steps()));
    }
    let mut out = z0.clone();
    let ab = sched.alpha_bar(t);
    let k = z0.k();
    let mut row = vec![0.0; k];
    for pos in 0..z0.len() {
        let u: f64 = rng.random();
        if t == 0 {
            continue;
        }
        row.fill((1.0 - ab) / k as f64);
        row[z0.get(pos)] += ab;
        out.set(pos, categorical_from_uniform(&row, u));
    }
    Ok(out)
}

fn check_step(t: usize, sched: &Schedule, min: usize) -> Result<()> {
    if t < min || t > sched.steps() {
        return Err(domain!("t={t} outside [{min}, {}]", sched.steps()));
    }
    Ok(())
}

/// Normalized `θ(z_t, z_0)` for one position, written into `out`.
pub(crate) fn posterior_row(zt: usize, z0: &[f64], alpha_t: f64, ab_prev: f64, out: &mut [f64]) {
    let kf = z0.len() as f64;
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let keep = if j == zt { alpha_t } else { 0.0 };
        let left = keep + (1.0 - alpha_t) / kf;
        let right = ab_prev * z0[j] + (1.0 - ab_prev) / kf;
        *o = left * right;
        sum += *o;
    }
    assert!(sum > 0.0, "posterior has no mass; beta must lie in (0, 1)");
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `q(z_{t-1} | z_t, z_0)` for `t ≥ 2`, with `z0_dist` either one-hot or a
/// soft prediction substituted directly into θ.
pub fn posterior(
    z_t: &LatentGrid,
    z0_dist: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<ProbGrid> {
    check_step(t, sched, 2)?;
    if !z0_dist.matches(z_t) {
        return Err(shape!("z0 distribution does not match z_t"));
    }
    let (alpha_t, ab_prev) = (sched.alpha(t), sched.alpha_bar(t - 1));
    let mut out = ProbGrid::from_raw(z_t.h(), z_t.w(), z_t.k(), vec![0.0; z_t.len() * z_t.k()]);
    for pos in 0..z_t.len() {
        posterior_row(z_t.get(pos), z0_dist.row(pos), alpha_t, ab_prev, out.row_mut(pos));
    }
    Ok(out)
}

/// Bayes posterior over `z_{t-1}` by explicit enumeration.
///
/// Builds `Q̄_{t-1}` by multiplying one-step kernels and weighs each
/// candidate `j` by `Q̄_{t-1}[z0, j] · Q_t[j, z_t]`. Shares nothing with
/// [`posterior`] beyond the schedule, so it serves as its oracle.
pub fn brute_force_posterior(
    z_t: usize,
    z0: usize,
    t: usize,
    sched: &Schedule,
    k: usize,
) -> Result<Vec<f64>> {
    check_step(t, sched, 1)?;
    if k > 1024 {
        return Err(domain!("K={k} too large to enumerate"));
    }
    if z_t >= k || z0 >= k {
        return Err(domain!("category out of range for K={k}"));
    }
    let mut cumulative = TransitionMatrix::identity(k);
    for u in 1..t {
        cumulative = cumulative.then(&transition_matrix(sched.beta(u), k)?);
    }
    let step = transition_matrix(sched.beta(t), k)?;
    let mut p: Vec<f64> = (0..k).map(|j| cumulative.get(z0, j) * step.get(j, z_t)).collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }
    Ok(p)
}

/// Reverse-step distribution from a ẑ₀ prediction: `ẑ₀` itself at `t = 1`,
/// otherwise `N[θ(z_t, ẑ₀)]`.
pub fn reverse_step_dist(
    z_t: &LatentGrid,
    z0_hat: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<ProbGrid> {
    check_step(t, sched, 1)?;
    if !z0_hat.matches(z_t) {
        return Err(shape!("z0 prediction does not match z_t"));
    }
    if t == 1 {
        return Ok(z0_hat.clone());
    }
    posterior(z_t, z0_hat, t, sched)
}

/// Reverse-step distribution as the mixture `Σ_j w_j · q(z_{t-1} | z_t, z_0 = j)`.
///
/// With `w` the exact per-position posterior `q(z_0 | z_t)` this is the exact
/// per-position reverse marginal `q(z_{t-1} | z_t)`, which the plug-in form of
/// [`reverse_step_dist`] is not.
pub fn mixture_reverse_dist(
    z_t: &LatentGrid,
    z0_weights: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<ProbGrid> {
    check_step(t, sched, 1)?;
    if !z0_weights.matches(z_t) {
        return Err(shape!("z0 weights do not match z_t"));
    }
    if t == 1 {
        return Ok(z0_weights.clone());
    }
    let k = z_t.k();
    let kf = k as f64;
    let (alpha_t, ab_prev) = (sched.alpha(t), sched.alpha_bar(t - 1));
    let c = (1.0 - ab_prev) / kf;
    let mut out = ProbGrid::from_raw(z_t.h(), z_t.w(), k, vec![0.0; z_t.len() * k]);
    let mut a = vec![0.0; k];
    for pos in 0..z_t.len() {
        let zt = z_t.get(pos);
        for (j, aj) in a.iter_mut().enumerate() {
            *aj = if j == zt { alpha_t } else { 0.0 } + (1.0 - alpha_t) / kf;
        }
        // Σθ(z_t, e_j) = ᾱ_{t-1}·a_j + c because Σa = 1.
        let w = z0_weights.row(pos);
        let shared: f64 = (0..k).map(|j| w[j] / (ab_prev * a[j] + c)).sum();
        let row = out.row_mut(pos);
        let mut sum = 0.0;
        for j in 0..k {
            row[j] = a[j] * (ab_prev * w[j] / (ab_prev * a[j] + c) + c * shared);
            sum += row[j];
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// A KL or NLL value plus whether the probability floor was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub value: f64,
    pub clamped: bool,
}

/// `Σ_pos KL(q(z_{t-1} | z_t, z_0) ‖ reverse)` for an arbitrary reverse
/// distribution.
pub fn kl_to_reverse(
    z_t: &LatentGrid,
    z0_true: &LatentGrid,
    reverse: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<StepLoss> {
    check_step(t, sched, 2)?;
    if !z0_true.same_shape(z_t) || !reverse.matches(z_t) {
        return Err(shape!("grids disagree in shape"));
    }
    let k = z_t.k();
    let (alpha_t, ab_prev) = (sched.alpha(t), sched.alpha_bar(t - 1));
    let mut target = vec![0.0; k];
    let mut onehot = vec![0.0; k];
    let mut total = CompensatedSum::default();
    let mut clamped = false;
    for pos in 0..z_t.len() {
        onehot.fill(0.0);
        onehot[z0_true.get(pos)] = 1.0;
        posterior_row(z_t.get(pos), &onehot, alpha_t, ab_prev, &mut target);
        let q = reverse.row(pos);
        let mut kl = 0.0;
        for j in 0..k {
            if target[j] > 0.0 {
                if q[j] < PROB_FLOOR {
                    clamped = true;
                }
                kl += target[j] * (libm::log(target[j]) - libm::log(q[j].max(PROB_FLOOR)));
            }
        }
        total.add(kl);
    }
    Ok(StepLoss { value: total.value(), clamped })
}

/// KL between the true posterior and the plug-in reverse step for ẑ₀.
pub fn kl_step(
    z_t: &LatentGrid,
    z0_true: &LatentGrid,
    z0_hat: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<StepLoss> {
    let reverse = posterior(z_t, z0_hat, t, sched)?;
    kl_to_reverse(z_t, z0_true, &reverse, t, sched)
}

/// `-Σ_pos log p(z_0 | z_1)` under a predicted distribution.
pub fn decoder_nll(z0_true: &LatentGrid, z0_hat: &ProbGrid) -> Result<StepLoss> {
    if !z0_hat.matches(z0_true) {
        return Err(shape!("prediction does not match z0"));
    }
    let mut total = CompensatedSum::default();
    let mut clamped = false;
    for pos in 0..z0_true.len() {
        let p = z0_hat.row(pos)[z0_true.get(pos)];
        if p < PROB_FLOOR {
            clamped = true;
        }
        total.add(-libm::log(p.max(PROB_FLOOR)));
    }
    Ok(StepLoss { value: total.value(), clamped })
}

/// `Σ_pos KL(q(z_T | z_0) ‖ uniform)` in closed form.
pub fn prior_kl(z0: &LatentGrid, sched: &Schedule) -> f64 {
    let a = sched.alpha_bar(sched.steps());
    let k = z0.k() as f64;
    let hit = a + (1.0 - a) / k;
    let miss = (1.0 - a) / k;
    // Written with log1p: for tiny ᾱ_T both log ratios are tiny.
    let per_pos = hit * libm::log1p((k - 1.0) * a) + (k - 1.0) * miss * libm::log1p(-a);
    per_pos.max(0.0) * z0.len() as f64
}

/// Anything that can predict `ẑ₀` from a noisy grid.
pub trait Denoiser {
    /// The predicted per-position distribution over clean categories.
    fn predict_z0(&self, z_t: &LatentGrid, t: usize) -> Result<ProbGrid>;

    /// `p(z_{t-1} | z_t)`; at `t = 1` this is the distribution of `z_0`.
    fn reverse_dist(&self, z_t: &LatentGrid, t: usize, sched: &Schedule) -> Result<ProbGrid> {
        let z0_hat = self.predict_z0(z_t, t)?;
        reverse_step_dist(z_t, &z0_hat, t, sched)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_z0(&self, z_t: &LatentGrid, t: usize) -> Result<ProbGrid> {
        (**self).predict_z0(z_t, t)
    }

    fn reverse_dist(&self, z_t: &LatentGrid, t: usize, sched: &Schedule) -> Result<ProbGrid> {
        (**self).reverse_dist(z_t, t, sched)
    }
}

/// The loss term for step `t` given the model's reverse distribution:
/// decoder NLL at `t = 1`, KL to the true posterior otherwise.
pub fn step_term(
    z0: &LatentGrid,
    z_t: &LatentGrid,
    reverse: &ProbGrid,
    t: usize,
    sched: &Schedule,
) -> Result<StepLoss> {
    if t == 1 {
        decoder_nll(z0, reverse)
    } else {
        kl_to_reverse(z_t, z0, reverse, t, sched)
    }
}

/// Components of the variational bound for one grid, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct VlbTerms {
    pub prior_kl: f64,
    /// Entry `i` holds the term for `t = i + 2`.
    pub step_kls: Vec<f64>,
    pub decoder_nll: f64,
    pub total_bits_per_pos: f64,
}

impl VlbTerms {
    pub fn total_nats(&self) -> f64 {
        let mut s = CompensatedSum::default();
        s.add(self.prior_kl);
        for &x in &self.step_kls {
            s.add(x);
        }
        s.add(self.decoder_nll);
        s.value()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum VlbMode<'a> {
    /// Every step, one `z_t` draw each.
    Exact,
    /// One importance-weighted step per call.
    Sampled(&'a TimestepSampler),
}

/// Variational bound on `-log p(z0)` for one grid.
pub fn vlb<D, R>(
    z0: &LatentGrid,
    denoiser: &D,
    sched: &Schedule,
    rng: &mut R,
    mode: VlbMode<'_>,
) -> Result<VlbTerms>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let steps = sched.steps();
    let mut step_kls = vec![0.0; steps.saturating_sub(1)];
    let mut decoder = 0.0;
    let term_at = |t: usize, rng: &mut R| -> Result<f64> {
        let z_t = sample_q(z0, t, sched, rng)?;
        let reverse = denoiser.reverse_dist(&z_t, t, sched)?;
        Ok(step_term(z0, &z_t, &reverse, t, sched)?.value)
    };
    match mode {
        VlbMode::Exact => {
            for t in 1..=steps {
                let v = term_at(t, rng)?;
                if t == 1 {
                    decoder = v;
                } else {
                    step_kls[t - 2] = v;
                }
            }
        }
        VlbMode::Sampled(sampler) => {
            if sampler.steps() != steps {
                return Err(shape!("timestep sampler covers {} steps, schedule {steps}", sampler.steps()));
            }
            let (t, prob) = sampler.sample(rng);
            let v = term_at(t, rng)? / prob;
            if t == 1 {
                decoder = v;
            } else {
                step_kls[t - 2] = v;
            }
        }
    }
    let mut terms = VlbTerms {
        prior_kl: prior_kl(z0, sched),
        step_kls,
        decoder_nll: decoder,
        total_bits_per_pos: 0.0,
    };
    terms.total_bits_per_pos = terms.total_nats() / (z0.len() as f64 * LN_2);
    Ok(terms)
}
