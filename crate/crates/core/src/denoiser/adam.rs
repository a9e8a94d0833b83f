use alloc::vec;
use alloc::vec::Vec;

/// First and second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Standard settings (0.9, 0.999, 1e-8) for `n` parameters.
    pub fn new(n: usize, lr: f64) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n], beta1: 0.9, beta2: 0.999, eps: 1e-8, lr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// The gradient held a NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> AdamOutcome {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    if grads.iter().any(|g| !g.is_finite()) {
        return AdamOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
    }
    AdamOutcome::Applied
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 0.1);
        assert_eq!(adam_step(&mut p, &[0.0, 0.0], &mut s), AdamOutcome::Applied);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, 0.01);
        adam_step(&mut p, &[3.0, -0.5], &mut s);
        // m̂ = g and v̂ = g² after correction.
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-18);
        assert!((p[1] - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-3);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut p, &[0.7], &mut s);
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1, 0.1);
        assert_eq!(adam_step(&mut p, &[f64::NAN], &mut s), AdamOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn update_is_scale_invariant() {
        let g = [0.3, -1.2, 0.5, 2.0];
        let run = |scale: f64| {
            let mut p = vec![0.0; 4];
            let mut s = AdamState::new(4, 1e-2);
            for i in 0..5 {
                let gs: Vec<f64> = g.iter().map(|x| x * scale * (1.0 + i as f64 * 0.1)).collect();
                adam_step(&mut p, &gs, &mut s);
            }
            p
        };
        let base = run(1.0);
        for scale in [1e-2, 1e2] {
            let other = run(scale);
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b} at scale {scale}");
            }
        }
    }
}
