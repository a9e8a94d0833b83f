//! Reference ẑ₀ network.
//!
//! Per position `i` of a grid `z_t`:
//!
//! ```text
//! x_i  = [cat[z_i] + pos[i] ; τ(t)]
//! h1_i = silu(W1ᵀ x_i + b1)
//! m    = mean_i h1_i
//! h2_i = silu(W2ᵀ h1_i + U2ᵀ m + b2)
//! ẑ₀_i = softmax(W3ᵀ h2_i + b3 + onehot(z_i))
//! ```
//!
//! `τ` is a fixed sinusoidal embedding. The mean `m` is the only channel
//! through which positions see each other. The network output is a residual
//! added to the one-hot encoding of `z_t` before the softmax.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::diffusion::{posterior_row, Denoiser};
use crate::error::{domain, shape};
use crate::grid::{LatentGrid, ProbGrid};
use crate::math::{softmax_in_place, PROB_FLOOR};
use crate::{Error, Result, Schedule};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub embed_dim: usize,
    /// Even.
    pub time_dim: usize,
    pub time_base: f64,
    pub hidden: [usize; 2],
}

impl DenoiserConfig {
    /// The reference sizes: 64-wide embeddings, two 256-wide hidden layers.
    pub fn reference(k: usize, h: usize, w: usize) -> Self {
        Self { k, h, w, embed_dim: 64, time_dim: 64, time_base: 10_000.0, hidden: [256, 256] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.h == 0 || self.w == 0 {
            return Err(domain!("denoiser needs K >= 2 and a non-empty grid"));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(domain!("layer widths must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(domain!("time embedding dimension must be even"));
        }
        if !(self.time_base > 1.0) {
            return Err(domain!("time embedding base must exceed 1"));
        }
        Ok(())
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Where each weight block lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub cat_embed: Range<usize>,
    pub pos_embed: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub u2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl ParamLayout {
    pub fn new(c: &DenoiserConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let input = c.embed_dim + c.time_dim;
        let [h1, h2] = c.hidden;
        Self {
            cat_embed: take(c.k * c.embed_dim),
            pos_embed: take(c.positions() * c.embed_dim),
            w1: take(input * h1),
            b1: take(h1),
            w2: take(h1 * h2),
            u2: take(h1 * h2),
            b2: take(h2),
            w3: take(h2 * c.k),
            b3: take(c.k),
        }
    }

    pub fn len(&self) -> usize {
        self.b3.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight blocks in storage order, with their names.
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 9] {
        [
            ("cat_embed", self.cat_embed.clone()),
            ("pos_embed", self.pos_embed.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("u2", self.u2.clone()),
            ("b2", self.b2.clone()),
            ("w3", self.w3.clone()),
            ("b3", self.b3.clone()),
        ]
    }
}

/// The network with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Gradient with respect to every parameter, same layout as the model.
pub type Gradients = Vec<f64>;

struct Activations {
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    mean: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out[c] += Σ_r x[r] · w[r, c]` with `w` stored row-major `rows × cols`.
fn gemv_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xr * wv;
        }
    }
}

/// `out[r] += Σ_c w[r, c] · g[c]`.
fn gemv_t_acc(g: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dw[r, c] += x[r] · g[c]`.
fn outer_acc(x: &[f64], g: &[f64], dw: &mut [f64]) {
    let cols = g.len();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (d, &gc) in dw[r * cols..(r + 1) * cols].iter_mut().zip(g) {
            *d += xr * gc;
        }
    }
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("denoiser layer {layer}")));
    }
    Ok(())
}

impl DenoiserModel {
    /// All parameters zero: the output reduces to `softmax(onehot(z_t))`.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = vec![0.0; layout.len()];
        Ok(Self { config, layout, params })
    }

    /// Uniform fan-in scaled initialization with zero biases.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let c = config;
        let input = c.embed_dim + c.time_dim;
        let [h1, h2] = c.hidden;
        let l = model.layout.clone();
        let mut fill = |range: Range<usize>, scale: f64| {
            for p in &mut model.params[range] {
                *p = rng.random_range(-scale..scale);
            }
        };
        fill(l.cat_embed, 1.0);
        fill(l.pos_embed, 1.0);
        fill(l.w1, libm::sqrt(3.0 / input as f64));
        fill(l.w2, libm::sqrt(3.0 / (2 * h1) as f64));
        fill(l.u2, libm::sqrt(3.0 / (2 * h1) as f64));
        fill(l.w3, 0.1 * libm::sqrt(3.0 / h2 as f64));
        Ok(model)
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(shape!("expected {} parameters, got {}", layout.len(), params.len()));
        }
        check_finite(&params, "parameters")?;
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sinusoidal embedding of the step index.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_dim / 2;
        let mut e = vec![0.0; self.config.time_dim];
        for i in 0..half {
            let freq = libm::pow(self.config.time_base, -(i as f64) / half as f64);
            let arg = t as f64 * freq;
            e[i] = libm::sin(arg);
            e[half + i] = libm::cos(arg);
        }
        e
    }

    fn check_input(&self, z_t: &LatentGrid) -> Result<()> {
        let c = &self.config;
        if z_t.h() != c.h || z_t.w() != c.w || z_t.k() != c.k {
            return Err(shape!(
                "denoiser expects {}x{} grids over K={}, got {}x{} over K={}",
                c.h, c.w, c.k, z_t.h(), z_t.w(), z_t.k()
            ));
        }
        Ok(())
    }

    fn forward(&self, z_t: &LatentGrid, t: usize) -> Result<Activations> {
        self.check_input(z_t)?;
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let (e, n, k) = (c.embed_dim, c.positions(), c.k);
        let input = e + c.time_dim;
        let [h1d, h2d] = c.hidden;
        let tau = self.time_embedding(t);

        let mut x = vec![0.0; n * input];
        for i in 0..n {
            let xi = &mut x[i * input..(i + 1) * input];
            let cat = &p[l.cat_embed.start + z_t.get(i) * e..][..e];
            let pos = &p[l.pos_embed.start + i * e..][..e];
            for j in 0..e {
                xi[j] = cat[j] + pos[j];
            }
            xi[e..].copy_from_slice(&tau);
        }

        let mut a1 = vec![0.0; n * h1d];
        for i in 0..n {
            let ai = &mut a1[i * h1d..(i + 1) * h1d];
            ai.copy_from_slice(&p[l.b1.clone()]);
            gemv_acc(&x[i * input..(i + 1) * input], &p[l.w1.clone()], h1d, ai);
        }
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        check_finite(&h1, "hidden1")?;

        let mut mean = vec![0.0; h1d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(&h1[i * h1d..(i + 1) * h1d]) {
                *m += v / n as f64;
            }
        }
        let mut shared = p[l.b2.clone()].to_vec();
        gemv_acc(&mean, &p[l.u2.clone()], h2d, &mut shared);

        let mut a2 = vec![0.0; n * h2d];
        for i in 0..n {
            let ai = &mut a2[i * h2d..(i + 1) * h2d];
            ai.copy_from_slice(&shared);
            gemv_acc(&h1[i * h1d..(i + 1) * h1d], &p[l.w2.clone()], h2d, ai);
        }
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        check_finite(&h2, "hidden2")?;

        let mut probs = vec![0.0; n * k];
        for i in 0..n {
            let oi = &mut probs[i * k..(i + 1) * k];
            oi.copy_from_slice(&p[l.b3.clone()]);
            gemv_acc(&h2[i * h2d..(i + 1) * h2d], &p[l.w3.clone()], k, oi);
            oi[z_t.get(i)] += 1.0;
        }
        check_finite(&probs, "logits")?;
        for i in 0..n {
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        Ok(Activations { x, a1, h1, mean, a2, h2, probs })
    }

    /// Per-position softmax of `μ(z_t, t) + onehot(z_t)`.
    pub fn predict_z0_logits(&self, z_t: &LatentGrid, t: usize) -> Result<ProbGrid> {
        let act = self.forward(z_t, t)?;
        Ok(ProbGrid::from_raw(self.config.h, self.config.w, self.config.k, act.probs))
    }

    fn backward(&self, z_t: &LatentGrid, act: &Activations, dlogits: &[f64]) -> Gradients {
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let (e, n, k) = (c.embed_dim, c.positions(), c.k);
        let input = e + c.time_dim;
        let [h1d, h2d] = c.hidden;
        let mut g = vec![0.0; self.layout.len()];

        let mut da2 = vec![0.0; n * h2d];
        for i in 0..n {
            let dout = &dlogits[i * k..(i + 1) * k];
            let h2i = &act.h2[i * h2d..(i + 1) * h2d];
            outer_acc(h2i, dout, &mut g[l.w3.clone()]);
            for (gb, d) in g[l.b3.clone()].iter_mut().zip(dout) {
                *gb += d;
            }
            let dai = &mut da2[i * h2d..(i + 1) * h2d];
            gemv_t_acc(dout, &p[l.w3.clone()], k, dai);
            for (d, &a) in dai.iter_mut().zip(&act.a2[i * h2d..(i + 1) * h2d]) {
                *d *= silu_grad(a);
            }
        }

        let mut dshared = vec![0.0; h2d];
        let mut dh1 = vec![0.0; n * h1d];
        for i in 0..n {
            let dai = &da2[i * h2d..(i + 1) * h2d];
            outer_acc(&act.h1[i * h1d..(i + 1) * h1d], dai, &mut g[l.w2.clone()]);
            for (s, d) in dshared.iter_mut().zip(dai) {
                *s += d;
            }
            gemv_t_acc(dai, &p[l.w2.clone()], h2d, &mut dh1[i * h1d..(i + 1) * h1d]);
        }
        for (gb, d) in g[l.b2.clone()].iter_mut().zip(&dshared) {
            *gb += d;
        }
        outer_acc(&act.mean, &dshared, &mut g[l.u2.clone()]);
        let mut dmean = vec![0.0; h1d];
        gemv_t_acc(&dshared, &p[l.u2.clone()], h2d, &mut dmean);

        for i in 0..n {
            let dhi = &mut dh1[i * h1d..(i + 1) * h1d];
            for ((d, &dm), &a) in dhi.iter_mut().zip(&dmean).zip(&act.a1[i * h1d..(i + 1) * h1d]) {
                *d = (*d + dm / n as f64) * silu_grad(a);
            }
            let xi = &act.x[i * input..(i + 1) * input];
            outer_acc(xi, dhi, &mut g[l.w1.clone()]);
            for (gb, d) in g[l.b1.clone()].iter_mut().zip(dhi.iter()) {
                *gb += d;
            }
            let mut dx = vec![0.0; e];
            // Only the embedding rows of W1 carry gradient back; τ(t) is fixed.
            gemv_t_acc(dhi, &p[l.w1.start..l.w1.start + e * h1d], h1d, &mut dx);
            let cat = l.cat_embed.start + z_t.get(i) * e;
            let pos = l.pos_embed.start + i * e;
            for j in 0..e {
                g[cat + j] += dx[j];
                g[pos + j] += dx[j];
            }
        }
        g
    }

    /// Loss for one `(z_0, z_t, t)` triple and its gradient, both summed over
    /// positions.
    ///
    /// At `t = 1` the loss is `-log ẑ₀[z_0]`; otherwise it is the KL from the
    /// true posterior to the plug-in reverse step `N[θ(z_t, ẑ₀)]`.
    pub fn loss_and_grad(
        &self,
        z0: &LatentGrid,
        z_t: &LatentGrid,
        t: usize,
        sched: &Schedule,
    ) -> Result<(f64, Gradients)> {
        if !z0.same_shape(z_t) {
            return Err(shape!("z0 and z_t disagree in shape"));
        }
        if t == 0 || t > sched.steps() {
            return Err(domain!("t={t} outside [1, {}]", sched.steps()));
        }
        let act = self.forward(z_t, t)?;
        let (n, k) = (self.config.positions(), self.config.k);
        let kf = k as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n * k];
        let mut dz = vec![0.0; k];
        let mut target = vec![0.0; k];
        let mut onehot = vec![0.0; k];
        for i in 0..n {
            let zh = &act.probs[i * k..(i + 1) * k];
            let truth = z0.get(i);
            if t == 1 {
                loss -= libm::log(zh[truth].max(PROB_FLOOR));
                for j in 0..k {
                    dlogits[i * k + j] = zh[j] - if j == truth { 1.0 } else { 0.0 };
                }
                continue;
            }
            let (alpha_t, ab_prev) = (sched.alpha(t), sched.alpha_bar(t - 1));
            let c = (1.0 - ab_prev) / kf;
            let zt = z_t.get(i);
            onehot.fill(0.0);
            onehot[truth] = 1.0;
            posterior_row(zt, &onehot, alpha_t, ab_prev, &mut target);
            // Reverse step r_j = a_j (ᾱ ẑ_j + c) / S, with S = Σ a_j (ᾱ ẑ_j + c).
            let a = |j: usize| if j == zt { alpha_t } else { 0.0 } + (1.0 - alpha_t) / kf;
            let s: f64 = (0..k).map(|j| a(j) * (ab_prev * zh[j] + c)).sum();
            for j in 0..k {
                let b = ab_prev * zh[j] + c;
                if target[j] > 0.0 {
                    let r = (a(j) * b / s).max(PROB_FLOOR);
                    loss += target[j] * (libm::log(target[j]) - libm::log(r));
                }
                dz[j] = -target[j] * ab_prev / b + ab_prev * a(j) / s;
            }
            let inner: f64 = (0..k).map(|j| zh[j] * dz[j]).sum();
            for j in 0..k {
                dlogits[i * k + j] = zh[j] * (dz[j] - inner);
            }
        }
        let grads = self.backward(z_t, &act, &dlogits);
        Ok((loss, grads))
    }
}

impl Denoiser for DenoiserModel {
    fn predict_z0(&self, z_t: &LatentGrid, t: usize) -> Result<ProbGrid> {
        self.predict_z0_logits(z_t, t)
    }
}
