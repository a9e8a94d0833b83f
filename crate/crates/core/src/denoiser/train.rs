use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::adam::{adam_step, AdamOutcome, AdamState};
use super::model::DenoiserModel;
use super::timestep::TimestepSampler;
use crate::diffusion::sample_q;
use crate::error::{domain, shape};
use crate::grid::LatentGrid;
use crate::{Error, Result, Schedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Abort once the per-position batch loss exceeds this.
    pub divergence_limit: f64,
}

impl TrainConfig {
    pub fn new(steps: usize, batch: usize) -> Self {
        Self { steps, batch, divergence_limit: 1e6 }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// Importance-weighted loss per position, the quantity being minimized.
    pub loss: f64,
    /// Unweighted loss per position.
    pub raw_loss: f64,
    pub mean_t: f64,
    pub skipped: bool,
}

/// Minimizes the variational bound by stochastic single-step terms.
///
/// Each batch element draws a clean grid uniformly from `dataset`, a step
/// `t` from `ts`, and `z_t ~ q(z_t | z_0)`. Its term is scaled by
/// `1 / (T · q(t))`, so the expected gradient matches uniform sampling of `t`
/// whatever `ts` currently prefers. `on_step` sees every record as it is made.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser<R, F>(
    dataset: &[LatentGrid],
    model: &mut DenoiserModel,
    sched: &Schedule,
    ts: &mut TimestepSampler,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_step: F,
) -> Result<Vec<TrainRecord>>
where
    R: Rng + ?Sized,
    F: FnMut(&TrainRecord),
{
    if dataset.is_empty() {
        return Err(domain!("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(domain!("batch size must be positive"));
    }
    if ts.steps() != sched.steps() {
        return Err(shape!("timestep sampler covers {} steps, schedule {}", ts.steps(), sched.steps()));
    }
    let c = model.config();
    if let Some(g) = dataset.iter().find(|g| (g.h(), g.w(), g.k()) != (c.h, c.w, c.k)) {
        return Err(shape!(
            "grid {}x{} over K={} does not fit a {}x{} K={} model",
            g.h(), g.w(), g.k(), c.h, c.w, c.k
        ));
    }
    if adam.m.len() != model.params().len() {
        return Err(shape!("optimizer state does not match the model"));
    }
    let positions = (c.h * c.w) as f64;
    let steps_f = sched.steps() as f64;
    let scale = 1.0 / (cfg.batch as f64 * positions);

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; model.params().len()];
    for step in 0..cfg.steps {
        grad.fill(0.0);
        let (mut loss, mut raw, mut t_sum) = (0.0, 0.0, 0.0);
        let mut seen = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let z0 = &dataset[rng.random_range(0..dataset.len())];
            let (t, prob) = ts.sample(rng);
            let zt = sample_q(z0, t, sched, rng)?;
            let (l, g) = model.loss_and_grad(z0, &zt, t, sched)?;
            let weight = 1.0 / (steps_f * prob);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += weight * b * scale;
            }
            loss += weight * l * scale;
            raw += l * scale;
            t_sum += t as f64;
            seen.push((t, l / positions));
        }
        if !loss.is_finite() || loss > cfg.divergence_limit {
            return Err(Error::Diverged { step, loss });
        }
        for (t, l) in seen {
            ts.record(t, l);
        }
        let outcome = adam_step(model.params_mut(), &grad, adam);
        let record = TrainRecord {
            step,
            loss,
            raw_loss: raw,
            mean_t: t_sum / cfg.batch as f64,
            skipped: outcome == AdamOutcome::SkippedNonFinite,
        };
        if record.skipped {
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        on_step(&record);
        trace.push(record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::Denoiser;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(k: usize, h: usize, w: usize) -> DenoiserConfig {
        DenoiserConfig { k, h, w, embed_dim: 16, time_dim: 16, time_base: 1000.0, hidden: [32, 32] }
    }

    /// Mean single-step loss per position over all `t`, one `z_t` per step,
    /// averaged over a few repeats.
    fn sweep(model: &DenoiserModel, z0: &LatentGrid, sched: &Schedule, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..4 {
            for t in 1..=sched.steps() {
                let zt = sample_q(z0, t, sched, &mut rng).unwrap();
                total += model.loss_and_grad(z0, &zt, t, sched).unwrap().0;
            }
        }
        total / (4.0 * sched.steps() as f64 * z0.len() as f64)
    }

    #[test]
    fn fits_a_single_grid() {
        let sched = Schedule::cosine(20, 0.008, 0.999).unwrap();
        let z0 = LatentGrid::new(2, 2, 4, vec![3, 0, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = DenoiserModel::init(small(4, 2, 2), &mut rng).unwrap();
        let before = sweep(&model, &z0, &sched, 11);
        let mut ts = TimestepSampler::new(20);
        let mut adam = AdamState::new(model.params().len(), 1e-3);
        let cfg = TrainConfig::new(2000, 4);
        let trace = train_denoiser(core::slice::from_ref(&z0), &mut model, &sched, &mut ts, &mut adam, &cfg, &mut rng, |_| {})
            .unwrap();
        assert_eq!(trace.len(), 2000);
        let after = sweep(&model, &z0, &sched, 11);
        assert!(after < 0.1 * before, "before {before}, after {after}");

        let zt = sample_q(&z0, 1, &sched, &mut rng).unwrap();
        let p = model.predict_z0(&zt, 1).unwrap();
        for pos in 0..4 {
            assert!(p.row(pos)[z0.get(pos)] >= 0.9);
        }
    }

    #[test]
    fn rejects_mismatched_data() {
        let sched = Schedule::cosine(5, 0.008, 0.999).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::zeros(small(4, 2, 2)).unwrap();
        let mut adam = AdamState::new(model.params().len(), 1e-3);
        let mut ts = TimestepSampler::new(5);
        let bad = LatentGrid::new(1, 4, 4, vec![0; 4]).unwrap();
        let cfg = TrainConfig::new(1, 1);
        assert!(train_denoiser(&[bad], &mut model, &sched, &mut ts, &mut adam, &cfg, &mut rng, |_| {}).is_err());
        let mut ts_wrong = TimestepSampler::new(6);
        let ok = LatentGrid::new(2, 2, 4, vec![0; 4]).unwrap();
        assert!(train_denoiser(&[ok], &mut model, &sched, &mut ts_wrong, &mut adam, &cfg, &mut rng, |_| {}).is_err());
    }

    #[test]
    fn divergence_guard_trips() {
        let sched = Schedule::cosine(5, 0.008, 0.999).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::zeros(small(4, 2, 2)).unwrap();
        let mut adam = AdamState::new(model.params().len(), 1e-3);
        let mut ts = TimestepSampler::new(5);
        let z = LatentGrid::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let cfg = TrainConfig { steps: 3, batch: 2, divergence_limit: 1e-9 };
        let err = train_denoiser(&[z], &mut model, &sched, &mut ts, &mut adam, &cfg, &mut rng, |_| {});
        assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
    }
}
