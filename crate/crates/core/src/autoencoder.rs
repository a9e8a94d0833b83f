//! Patch-linear encoder and decoder for toy images.
//!
//! Each non-overlapping `patch × patch` block (all channels) is flattened and
//! mapped affinely to a `d`-vector; the decoder maps code vectors back to
//! blocks the same way.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codebook::{straight_through, vq_loss, Codebook, VqLoss};
use crate::error::{domain, shape};
use crate::grid::{FeatureGrid, LatentGrid};
use crate::{Error, Result};

pub const DEFAULT_PATCH: usize = 4;

/// A `c × h × w` image with values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    c: usize,
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(c: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(domain!("image must be non-empty"));
        }
        if pixels.len() != c * h * w {
            return Err(shape!("{} pixels for a {c}x{h}x{w} image", pixels.len()));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(domain!("pixel values must lie in [0, 1]"));
        }
        Ok(Self { c, h, w, pixels })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoencoder {
    c: usize,
    patch: usize,
    d: usize,
    /// `(c·patch²) × d`, row-major.
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `d × (c·patch²)`, row-major.
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

/// Gradients with the autoencoder's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AeGrads {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

/// One forward/backward evaluation on a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct VqStep {
    pub loss: VqLoss,
    pub indices: LatentGrid,
    pub grads: AeGrads,
    /// `K × d`; rows of unselected codes are zero.
    pub codebook_grad: Vec<f64>,
}

impl ToyAutoencoder {
    pub fn zeros(c: usize, patch: usize, d: usize) -> Result<Self> {
        if c == 0 || patch == 0 || d == 0 {
            return Err(domain!("channels, patch and d must be positive"));
        }
        let n = c * patch * patch;
        Ok(Self { c, patch, d, enc_w: vec![0.0; n * d], enc_b: vec![0.0; d], dec_w: vec![0.0; d * n], dec_b: vec![0.0; n] })
    }

    pub fn init<R: Rng + ?Sized>(c: usize, patch: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut ae = Self::zeros(c, patch, d)?;
        let n = ae.patch_len();
        let se = libm::sqrt(3.0 / n as f64);
        let sd = libm::sqrt(3.0 / d as f64);
        for v in &mut ae.enc_w {
            *v = rng.random_range(-se..se);
        }
        for v in &mut ae.dec_w {
            *v = rng.random_range(-sd..sd);
        }
        Ok(ae)
    }

    pub fn from_parts(c: usize, patch: usize, d: usize, enc_w: Vec<f64>, enc_b: Vec<f64>, dec_w: Vec<f64>, dec_b: Vec<f64>) -> Result<Self> {
        let z = Self::zeros(c, patch, d)?;
        if enc_w.len() != z.enc_w.len() || enc_b.len() != d || dec_w.len() != z.dec_w.len() || dec_b.len() != z.dec_b.len() {
            return Err(shape!("autoencoder parameter blocks do not match c={c}, patch={patch}, d={d}"));
        }
        let ae = Self { c, patch, d, enc_w, enc_b, dec_w, dec_b };
        ae.check_finite()?;
        Ok(ae)
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `c · patch²`.
    pub fn patch_len(&self) -> usize {
        self.c * self.patch * self.patch
    }

    fn check_finite(&self) -> Result<()> {
        let all = self.enc_w.iter().chain(&self.enc_b).chain(&self.dec_w).chain(&self.dec_b);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("autoencoder parameters".into()));
        }
        Ok(())
    }

    fn check_image(&self, img: &ToyImage) -> Result<()> {
        if img.c != self.c {
            return Err(domain!("image has {} channels, autoencoder {}", img.c, self.c));
        }
        if !img.h.is_multiple_of(self.patch) || !img.w.is_multiple_of(self.patch) {
            return Err(domain!("{}x{} image is not divisible into {}-pixel patches", img.h, img.w, self.patch));
        }
        Ok(())
    }

    /// The flattened patches of `img`, one row per grid position.
    pub fn patches(&self, img: &ToyImage) -> Result<Vec<Vec<f64>>> {
        self.check_image(img)?;
        let p = self.patch;
        let (gh, gw) = (img.h / p, img.w / p);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut v = Vec::with_capacity(self.patch_len());
                for ch in 0..self.c {
                    for py in 0..p {
                        let row = (ch * img.h + gy * p + py) * img.w + gx * p;
                        v.extend_from_slice(&img.pixels[row..row + p]);
                    }
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, img: &ToyImage) -> Result<FeatureGrid> {
        let patches = self.patches(img)?;
        let mut v = Vec::with_capacity(patches.len() * self.d);
        for x in &patches {
            let mut f = self.enc_b.clone();
            for (i, &xi) in x.iter().enumerate() {
                for (fj, w) in f.iter_mut().zip(&self.enc_w[i * self.d..(i + 1) * self.d]) {
                    *fj += xi * w;
                }
            }
            v.extend(f);
        }
        FeatureGrid::new(img.h / self.patch, img.w / self.patch, self.d, v)
    }

    fn decode_patch(&self, z: &[f64]) -> Vec<f64> {
        let n = self.patch_len();
        let mut out = self.dec_b.clone();
        for (j, &zj) in z.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.dec_w[j * n..(j + 1) * n]) {
                *o += zj * w;
            }
        }
        out
    }

    /// Unclamped reconstruction in image layout.
    pub fn decode_raw(&self, z_q: &FeatureGrid) -> Result<Vec<f64>> {
        if z_q.d() != self.d {
            return Err(shape!("grid has d={}, decoder expects {}", z_q.d(), self.d));
        }
        let p = self.patch;
        let (h, w) = (z_q.h() * p, z_q.w() * p);
        let mut pixels = vec![0.0; self.c * h * w];
        for gy in 0..z_q.h() {
            for gx in 0..z_q.w() {
                let block = self.decode_patch(z_q.vector(gy * z_q.w() + gx));
                let mut it = block.into_iter();
                for ch in 0..self.c {
                    for py in 0..p {
                        let row = (ch * h + gy * p + py) * w + gx * p;
                        for px in 0..p {
                            pixels[row + px] = it.next().unwrap();
                        }
                    }
                }
            }
        }
        Ok(pixels)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode(&self, z_q: &FeatureGrid) -> Result<ToyImage> {
        let raw = self.decode_raw(z_q)?;
        let clamped = raw.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        ToyImage::new(self.c, z_q.h() * self.patch, z_q.w() * self.patch, clamped)
    }

    /// Loss terms and gradients for one image under the straight-through
    /// convention.
    pub fn loss_and_grads(&self, img: &ToyImage, cb: &Codebook, beta: f64) -> Result<VqStep> {
        if cb.d() != self.d {
            return Err(shape!("codebook d={} does not match autoencoder d={}", cb.d(), self.d));
        }
        let patches = self.patches(img)?;
        let h = self.encode(img)?;
        let (indices, z_q) = cb.lookup(&h)?;
        let st = straight_through(&h, &z_q)?;
        let x_hat = self.decode_raw(st.value())?;
        let loss = vq_loss(&img.pixels, &x_hat, &h, &z_q, beta)?;

        let x_hat_img = ToyImage { c: self.c, h: img.h, w: img.w, pixels: x_hat };
        let hat_patches = self.patches_unchecked(&x_hat_img);
        let (n, d) = (self.patch_len(), self.d);
        let mut g = AeGrads {
            enc_w: vec![0.0; n * d],
            enc_b: vec![0.0; d],
            dec_w: vec![0.0; d * n],
            dec_b: vec![0.0; n],
        };
        let mut dz_all = Vec::with_capacity(h.len() * d);
        for pos in 0..h.len() {
            let dout: Vec<f64> = hat_patches[pos].iter().zip(&patches[pos]).map(|(a, b)| 2.0 * (a - b)).collect();
            let z = z_q.vector(pos);
            for j in 0..d {
                for (gw, &o) in g.dec_w[j * n..(j + 1) * n].iter_mut().zip(&dout) {
                    *gw += z[j] * o;
                }
            }
            for (gb, o) in g.dec_b.iter_mut().zip(&dout) {
                *gb += o;
            }
            for j in 0..d {
                let row = &self.dec_w[j * n..(j + 1) * n];
                dz_all.push(row.iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let dh_rec = st.backward(&dz_all);
        assert_eq!(dh_rec, dz_all, "straight-through must hand the decoder-input gradient to the encoder unchanged");

        let mut codebook_grad = vec![0.0; cb.k() * d];
        for pos in 0..h.len() {
            let (hv, zv) = (h.vector(pos), z_q.vector(pos));
            let k = indices.get(pos);
            let mut dh = dh_rec[pos * d..(pos + 1) * d].to_vec();
            for j in 0..d {
                dh[j] += 2.0 * beta * (hv[j] - zv[j]);
                codebook_grad[k * d + j] += 2.0 * (zv[j] - hv[j]);
            }
            for (i, &xi) in patches[pos].iter().enumerate() {
                for (gw, &dj) in g.enc_w[i * d..(i + 1) * d].iter_mut().zip(&dh) {
                    *gw += xi * dj;
                }
            }
            for (gb, dj) in g.enc_b.iter_mut().zip(&dh) {
                *gb += dj;
            }
        }
        Ok(VqStep { loss, indices, grads: g, codebook_grad })
    }

    fn patches_unchecked(&self, img: &ToyImage) -> Vec<Vec<f64>> {
        let p = self.patch;
        let mut out = Vec::new();
        for gy in 0..img.h / p {
            for gx in 0..img.w / p {
                let mut v = Vec::with_capacity(self.patch_len());
                for ch in 0..self.c {
                    for py in 0..p {
                        let row = (ch * img.h + gy * p + py) * img.w + gx * p;
                        v.extend_from_slice(&img.pixels[row..row + p]);
                    }
                }
                out.push(v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqTrainConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub divergence_limit: f64,
}

impl VqTrainConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self { beta: crate::codebook::DEFAULT_COMMITMENT, steps, lr, divergence_limit: 1e6 }
    }
}

fn smooth(trace: &mut Vec<f64>, value: f64) {
    let next = match trace.last() {
        Some(&prev) => 0.9 * prev + 0.1 * value,
        None => value,
    };
    trace.push(next);
}

/// Plain gradient descent on all three VQ terms, one random image per step.
///
/// Returns the exponentially smoothed total loss per step. Hit counts on
/// `cb` accumulate over training.
pub fn train_vq_autoencoder<R: Rng + ?Sized>(
    dataset: &[ToyImage],
    ae: &mut ToyAutoencoder,
    cb: &mut Codebook,
    cfg: &VqTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(domain!("training set is empty"));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let img = &dataset[rng.random_range(0..dataset.len())];
        let s = ae.loss_and_grads(img, cb, cfg.beta)?;
        let total = s.loss.total();
        if !total.is_finite() || total > cfg.divergence_limit {
            return Err(Error::Diverged { step, loss: total });
        }
        let lr = cfg.lr;
        for (p, g) in ae.enc_w.iter_mut().zip(&s.grads.enc_w) {
            *p -= lr * g;
        }
        for (p, g) in ae.enc_b.iter_mut().zip(&s.grads.enc_b) {
            *p -= lr * g;
        }
        for (p, g) in ae.dec_w.iter_mut().zip(&s.grads.dec_w) {
            *p -= lr * g;
        }
        for (p, g) in ae.dec_b.iter_mut().zip(&s.grads.dec_b) {
            *p -= lr * g;
        }
        let d = cb.d();
        for k in 0..cb.k() {
            let g = &s.codebook_grad[k * d..(k + 1) * d];
            if g.iter().any(|&v| v != 0.0) {
                for (p, gv) in cb.vector_mut(k).iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
        cb.record_hits(&s.indices);
        smooth(&mut trace, total);
    }
    Ok(trace)
}

/// Trains only the decoder on the reconstruction term; encoder and codebook
/// stay fixed.
pub fn finetune_decoder<R: Rng + ?Sized>(
    dataset: &[ToyImage],
    ae: &mut ToyAutoencoder,
    cb: &Codebook,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(domain!("training set is empty"));
    }
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let img = &dataset[rng.random_range(0..dataset.len())];
        let s = ae.loss_and_grads(img, cb, 0.0)?;
        let rec = s.loss.reconstruction;
        if !rec.is_finite() || rec > 1e6 {
            return Err(Error::Diverged { step, loss: rec });
        }
        for (p, g) in ae.dec_w.iter_mut().zip(&s.grads.dec_w) {
            *p -= lr * g;
        }
        for (p, g) in ae.dec_b.iter_mut().zip(&s.grads.dec_b) {
            *p -= lr * g;
        }
        smooth(&mut trace, rec);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ToyImage {
        ToyImage::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn identity_ae(c: usize, patch: usize) -> ToyAutoencoder {
        let n = c * patch * patch;
        let mut ae = ToyAutoencoder::zeros(c, patch, n).unwrap();
        for i in 0..n {
            ae.enc_w[i * n + i] = 1.0;
            ae.dec_w[i * n + i] = 1.0;
        }
        ae
    }

    #[test]
    fn zero_image_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ae = ToyAutoencoder::init(1, 2, 3, &mut rng).unwrap();
        ae.enc_b.fill(0.0);
        let img = ToyImage::new(1, 4, 4, vec![0.0; 16]).unwrap();
        assert!(ae.encode(&img).unwrap().as_slice().iter().all(|&v| v == 0.0));
        ae.dec_b.fill(0.0);
        let back = ae.decode_raw(&FeatureGrid::zeros(2, 2, 3)).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_expose_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(2, 4, 6, &mut rng);
        let ae = identity_ae(2, 2);
        let f = ae.encode(&img).unwrap();
        assert_eq!((f.h(), f.w(), f.d()), (2, 3, 8));
        // Position (1, 2): rows 2..4, columns 4..6, both channels.
        let px = |ch: usize, y: usize, x: usize| img.pixels()[(ch * 4 + y) * 6 + x];
        let want = [px(0, 2, 4), px(0, 2, 5), px(0, 3, 4), px(0, 3, 5), px(1, 2, 4), px(1, 2, 5), px(1, 3, 4), px(1, 3, 5)];
        assert_eq!(f.vector(5), &want);
        assert_eq!(ae.decode_raw(&f).unwrap(), img.pixels());
    }

    #[test]
    fn rejects_indivisible_image() {
        let ae = ToyAutoencoder::zeros(1, 4, 2).unwrap();
        let img = ToyImage::new(1, 6, 8, vec![0.0; 48]).unwrap();
        assert!(ae.encode(&img).is_err());
        assert!(ToyImage::new(1, 1, 1, vec![1.5]).is_err());
    }

    /// Inverse of a small square matrix by Gauss-Jordan elimination.
    fn invert(mut a: Vec<f64>, n: usize) -> Vec<f64> {
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())).unwrap();
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
            let p = a[col * n + col];
            for j in 0..n {
                a[col * n + j] /= p;
                inv[col * n + j] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r * n + col];
                    for j in 0..n {
                        a[r * n + j] -= f * a[col * n + j];
                        inv[r * n + j] -= f * inv[col * n + j];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn pseudo_inverse_decoder_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, p, d) = (1, 2, 6);
        let n = c * p * p;
        let mut ae = ToyAutoencoder::init(c, p, d, &mut rng).unwrap();
        for b in &mut ae.enc_b {
            *b = rng.random_range(-0.5..0.5);
        }
        // h = x·E + b with E: n × d. The right inverse D = Eᵀ(EEᵀ)⁻¹ gives
        // E·D = I, so decoding with D and bias −b·D returns x.
        let e = &ae.enc_w;
        let mut eet = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                eet[i * n + j] = (0..d).map(|k| e[i * d + k] * e[j * d + k]).sum();
            }
        }
        let inv = invert(eet, n);
        for k in 0..d {
            for i in 0..n {
                ae.dec_w[k * n + i] = (0..n).map(|j| e[j * d + k] * inv[j * n + i]).sum();
            }
        }
        for i in 0..n {
            ae.dec_b[i] = -(0..d).map(|k| ae.enc_b[k] * ae.dec_w[k * n + i]).sum::<f64>();
        }
        let img = random_image(c, 6, 4, &mut rng);
        let back = ae.decode_raw(&ae.encode(&img).unwrap()).unwrap();
        for (a, b) in back.iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn setup(seed: u64) -> (ToyAutoencoder, Codebook, ToyImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = ToyAutoencoder::init(1, 2, 3, &mut rng).unwrap();
        let cb = Codebook::new(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let img = random_image(1, 4, 4, &mut rng);
        (ae, cb, img)
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let (mut ae, cb, img) = setup(3);
        let s = ae.loss_and_grads(&img, &cb, 0.25).unwrap();
        let h = 1e-6;
        for i in 0..ae.dec_w.len() {
            let keep = ae.dec_w[i];
            ae.dec_w[i] = keep + h;
            let up = ae.loss_and_grads(&img, &cb, 0.25).unwrap().loss.total();
            ae.dec_w[i] = keep - h;
            let down = ae.loss_and_grads(&img, &cb, 0.25).unwrap().loss.total();
            ae.dec_w[i] = keep;
            let fd = (up - down) / (2.0 * h);
            let g = s.grads.dec_w[i];
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-8), "{i}: {fd} vs {g}");
        }
    }

    #[test]
    fn encoder_gradient_by_hand() {
        // One 1x1 patch, d = 1: x, h = e·x + b, z = code, x̂ = v·z + c.
        let mut ae = ToyAutoencoder::zeros(1, 1, 1).unwrap();
        ae.enc_w[0] = 0.8;
        ae.enc_b[0] = 0.1;
        ae.dec_w[0] = 1.5;
        ae.dec_b[0] = -0.2;
        let cb = Codebook::new(2, 1, vec![0.0, 0.6]).unwrap();
        let img = ToyImage::new(1, 1, 1, vec![0.7]).unwrap();
        let beta = 0.25;
        let s = ae.loss_and_grads(&img, &cb, beta).unwrap();
        let (x, hh, z) = (0.7, 0.8 * 0.7 + 0.1, 0.6);
        let xh = 1.5 * z - 0.2;
        let dh = 2.0 * (xh - x) * 1.5 + 2.0 * beta * (hh - z);
        assert!((s.grads.enc_w[0] - dh * x).abs() < 1e-15);
        assert!((s.grads.enc_b[0] - dh).abs() < 1e-15);
        assert_eq!(s.codebook_grad[0], 0.0);
        assert!((s.codebook_grad[1] - 2.0 * (z - hh)).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(1, 4, 4, &mut rng);
        let mut ae = ToyAutoencoder::init(1, 2, 2, &mut rng).unwrap();
        let mut cb = Codebook::new(8, 2, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let first = ae.loss_and_grads(&img, &cb, 0.25).unwrap().loss.reconstruction;
        let before = cb.clone();
        train_vq_autoencoder(core::slice::from_ref(&img), &mut ae, &mut cb, &VqTrainConfig::new(500, 0.01), &mut rng).unwrap();
        let last = ae.loss_and_grads(&img, &cb, 0.25).unwrap().loss.reconstruction;
        assert!(last < first, "{first} -> {last}");
        for k in 0..8 {
            if cb.hit_counts()[k] == 0 {
                assert_eq!(cb.vector(k), before.vector(k));
            }
        }
    }

    #[test]
    fn finetune_keeps_encoder() {
        let (mut ae, cb, img) = setup(5);
        let enc = ae.enc_w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = finetune_decoder(&[img], &mut ae, &cb, 200, 0.01, &mut rng).unwrap();
        assert_eq!(ae.enc_w, enc);
        assert!(tr.last().unwrap() < &tr[0]);
    }
}
