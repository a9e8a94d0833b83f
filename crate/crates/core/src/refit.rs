//! Codebook re-building: sample encoder features, seed with AFK-MC², refine
//! with Lloyd's algorithm, replace the codebook.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::Codebook;
use crate::error::{domain, shape};
use crate::grid::FeatureGrid;
use crate::math::sq_dist;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefitConfig {
    /// Number of sampled features `P`.
    pub samples: usize,
    pub k_target: usize,
    /// Markov chain length `m`.
    pub chain_len: usize,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl RefitConfig {
    pub const DEFAULT_SAMPLES: usize = 20_000;
    pub const DEFAULT_CHAIN_LEN: usize = 200;

    pub fn new(k_target: usize, seed: u64) -> Self {
        Self {
            samples: Self::DEFAULT_SAMPLES,
            k_target,
            chain_len: Self::DEFAULT_CHAIN_LEN,
            kmeans_iters: 100,
            kmeans_tol: 1e-9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_target == 0 {
            return Err(domain!("target codebook size must be positive"));
        }
        if self.samples < 10 * self.k_target {
            return Err(domain!("P={} is below 10 x K_target={}", self.samples, self.k_target));
        }
        if self.chain_len == 0 {
            return Err(domain!("chain length must be at least 1"));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(domain!("k-means tolerance must be nonnegative"));
        }
        Ok(())
    }
}

/// `n` row vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(domain!("feature dimension must be positive"));
        }
        if data.len() != n * d {
            return Err(shape!("{} values for {n} rows of dimension {d}", data.len()));
        }
        Ok(Self { n, d, data })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn push(&mut self, row: &[f64]) {
        self.data.extend_from_slice(row);
        self.n += 1;
    }
}

/// Draws `p` vectors: a grid uniformly with replacement, then a position.
pub fn sample_features<R: Rng + ?Sized>(dataset: &[FeatureGrid], p: usize, rng: &mut R) -> Result<FeatureMatrix> {
    let first = dataset.first().ok_or_else(|| domain!("feature dataset is empty"))?;
    let d = first.d();
    if dataset.iter().any(|g| g.d() != d) {
        return Err(shape!("feature grids disagree on dimension"));
    }
    let mut data = Vec::with_capacity(p * d);
    for _ in 0..p {
        let g = &dataset[rng.random_range(0..dataset.len())];
        data.extend_from_slice(g.vector(rng.random_range(0..g.len())));
    }
    FeatureMatrix::new(p, d, data)
}

/// `Σ_x min_c ‖x − c‖²`.
pub fn potential(features: &FeatureMatrix, centers: &FeatureMatrix) -> f64 {
    (0..features.rows()).map(|i| nearest(features.row(i), centers).1).sum()
}

/// Lowest-index nearest center and its squared distance.
fn nearest(x: &[f64], centers: &FeatureMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let dist = sq_dist(x, centers.row(c));
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Inverse-CDF draw from a precomputed cumulative table.
fn draw_cumulative<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("nonempty table");
    let u: f64 = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

fn d2_to_set(x: &[f64], centers: &FeatureMatrix) -> f64 {
    nearest(x, centers).1
}

/// AFK-MC² seeding of `k` centers.
///
/// The first center is uniform. Each later one is the end state of a
/// Metropolis-Hastings chain of `m` proposals from
/// `q(x) = ½·d²(x, c₁)/Σd² + ½/P`, targeting the D² distribution for the
/// centers chosen so far. If the chain ends on a point already covered
/// (distance zero), the center is drawn from the exact D² distribution
/// instead, so the rows returned stay distinct whenever the data allows it.
pub fn afkmc2_seed<R: Rng + ?Sized>(features: &FeatureMatrix, k: usize, m: usize, rng: &mut R) -> Result<FeatureMatrix> {
    let p = features.rows();
    if k == 0 || m == 0 {
        return Err(domain!("need k >= 1 and chain length >= 1"));
    }
    if p < k {
        return Err(domain!("{p} features cannot seed {k} centers"));
    }
    let d = features.d();
    let mut centers = FeatureMatrix { n: 0, d, data: Vec::with_capacity(k * d) };
    let first = rng.random_range(0..p);
    centers.push(features.row(first));

    let d2_first: Vec<f64> = (0..p).map(|i| sq_dist(features.row(i), features.row(first))).collect();
    let total: f64 = d2_first.iter().sum();
    if total == 0.0 {
        log::warn!("all {p} features are identical; seeding returns {k} copies");
        for _ in 1..k {
            centers.push(features.row(first));
        }
        return Ok(centers);
    }
    let q: Vec<f64> = d2_first.iter().map(|&x| 0.5 * x / total + 0.5 / p as f64).collect();
    let mut cumulative = Vec::with_capacity(p);
    let mut acc = 0.0;
    for &x in &q {
        acc += x;
        cumulative.push(acc);
    }

    for _ in 1..k {
        let mut x = draw_cumulative(&cumulative, rng);
        let mut dx = d2_to_set(features.row(x), &centers);
        for _ in 1..m {
            let y = draw_cumulative(&cumulative, rng);
            let dy = d2_to_set(features.row(y), &centers);
            let u: f64 = rng.random();
            if dx == 0.0 || dy * q[x] > u * dx * q[y] {
                x = y;
                dx = dy;
            }
        }
        if dx == 0.0 {
            let table: Vec<f64> = (0..p)
                .scan(0.0, |acc, i| {
                    *acc += d2_to_set(features.row(i), &centers);
                    Some(*acc)
                })
                .collect();
            if *table.last().unwrap() == 0.0 {
                log::warn!("fewer than {k} distinct features; seeding repeats points");
            } else {
                x = draw_cumulative(&table, rng);
            }
        }
        centers.push(features.row(x));
    }
    Ok(centers)
}

/// Lloyd refinement output.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centers: FeatureMatrix,
    /// Potential under the centers at the start of each iteration, then the
    /// final one.
    pub potentials: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm from `init`.
///
/// Stops after `iters` rounds or once no center moves by `tol` or more
/// (Euclidean). An empty cluster is moved onto the point farthest from its
/// current center.
pub fn kmeans(features: &FeatureMatrix, init: &FeatureMatrix, iters: usize, tol: f64) -> Result<KmeansResult> {
    if features.d() != init.d() {
        return Err(shape!("features have d={}, centers d={}", features.d(), init.d()));
    }
    if init.rows() == 0 || features.rows() == 0 {
        return Err(domain!("k-means needs at least one center and one feature"));
    }
    let (k, d, n) = (init.rows(), init.d(), features.rows());
    let mut centers = init.clone();
    let mut potentials = Vec::new();
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..iters {
        let mut pot = 0.0;
        for i in 0..n {
            let (c, dd) = nearest(features.row(i), &centers);
            assign[i] = c;
            dist[i] = dd;
            pot += dd;
        }
        potentials.push(pot);
        iterations += 1;

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                match far {
                    Some(i) => {
                        taken[i] = true;
                        dist[i] = 0.0;
                        features.row(i).to_vec()
                    }
                    None => centers.row(c).to_vec(),
                }
            };
            moved = moved.max(libm::sqrt(sq_dist(&new, centers.row(c))));
            centers.data[c * d..(c + 1) * d].copy_from_slice(&new);
        }
        if moved < tol {
            break;
        }
    }
    potentials.push(potential(features, &centers));
    Ok(KmeansResult { centers, potentials, iterations })
}

/// A fresh codebook of `cfg.k_target` entries fitted to `dataset`.
///
/// Draws all randomness from a generator seeded with `cfg.seed`, so the
/// result is a pure function of its inputs.
pub fn rebuild(cb: &Codebook, dataset: &[FeatureGrid], cfg: &RefitConfig) -> Result<Codebook> {
    cfg.validate()?;
    if dataset.iter().any(|g| g.d() != cb.d()) {
        return Err(shape!("features do not match codebook dimension {}", cb.d()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let feats = sample_features(dataset, cfg.samples, &mut rng)?;
    let seeds = afkmc2_seed(&feats, cfg.k_target, cfg.chain_len, &mut rng)?;
    let fit = kmeans(&feats, &seeds, cfg.kmeans_iters, cfg.kmeans_tol)?;
    log::info!(
        "rebuild: potential {:.6} after seeding, {:.6} after {} Lloyd rounds",
        fit.potentials[0],
        fit.potentials.last().unwrap(),
        fit.iterations
    );
    let out = Codebook::new(cfg.k_target, cb.d(), fit.centers.data)?;
    out.warn_duplicates();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::codebook::usage;
    use crate::math::sq_dist;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn clustered(means: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> FeatureMatrix {
        let mut r = rng(seed);
        let mut data = Vec::new();
        for m in means {
            for _ in 0..per {
                data.push(m[0] + sigma * r.random_range(-1.0..1.0));
                data.push(m[1] + sigma * r.random_range(-1.0..1.0));
            }
        }
        FeatureMatrix::new(means.len() * per, 2, data).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = RefitConfig::new(64, 0);
        assert!(c.validate().is_ok());
        c.samples = 639;
        assert!(c.validate().is_err());
        c.samples = 640;
        c.chain_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_vectors_sample_identically() {
        let g = FeatureGrid::new(2, 2, 2, [0.5, -1.0].repeat(4)).unwrap();
        let f = sample_features(&[g], 50, &mut rng(1)).unwrap();
        assert!((0..50).all(|i| f.row(i) == [0.5, -1.0]));
    }

    #[test]
    fn image_selection_is_uniform() {
        let grids: Vec<FeatureGrid> =
            (0..10).map(|i| FeatureGrid::new(2, 2, 1, vec![i as f64; 4]).unwrap()).collect();
        let p = 20_000;
        let f = sample_features(&grids, p, &mut rng(2)).unwrap();
        let mut counts = [0usize; 10];
        for i in 0..p {
            counts[f.row(i)[0] as usize] += 1;
        }
        let mean = p as f64 / 10.0;
        let sd = libm::sqrt(p as f64 * 0.1 * 0.9);
        for c in counts {
            assert!((c as f64 - mean).abs() < 4.0 * sd, "{counts:?}");
        }
        assert_eq!(f, sample_features(&grids, p, &mut rng(2)).unwrap());
    }

    #[test]
    fn seeding_finds_every_cluster() {
        let means: Vec<[f64; 2]> = (0..8).map(|i| [(i % 4) as f64 * 100.0, (i / 4) as f64 * 100.0]).collect();
        let mut data = Vec::new();
        for m in &means {
            for _ in 0..50 {
                data.extend_from_slice(m);
            }
        }
        let f = FeatureMatrix::new(400, 2, data).unwrap();
        for trial in 0..50 {
            let seeds = afkmc2_seed(&f, 8, 200, &mut rng(trial)).unwrap();
            for m in &means {
                assert!((0..8).any(|c| seeds.row(c) == m), "trial {trial} missed {m:?}");
            }
        }
    }

    #[test]
    fn degenerate_input_repeats() {
        let f = FeatureMatrix::new(30, 2, [1.0, 2.0].repeat(30)).unwrap();
        let seeds = afkmc2_seed(&f, 4, 10, &mut rng(0)).unwrap();
        assert!((0..4).all(|c| seeds.row(c) == [1.0, 2.0]));
    }

    #[test]
    fn seeds_are_input_rows() {
        let f = clustered(&[[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]], 40, 0.5, 4);
        let seeds = afkmc2_seed(&f, 5, 1, &mut rng(8)).unwrap();
        for c in 0..5 {
            assert!((0..f.rows()).any(|i| f.row(i) == seeds.row(c)));
        }
    }

    #[test]
    fn seeding_beats_uniform_on_average() {
        let f = clustered(&[[0.0, 0.0], [20.0, 0.0]], 200, 1.0, 5);
        let mut r = rng(6);
        let (mut mc, mut uni) = (0.0, 0.0);
        for _ in 0..100 {
            let s = afkmc2_seed(&f, 2, 200, &mut r).unwrap();
            mc += potential(&f, &s);
            let a = r.random_range(0..f.rows());
            let b = r.random_range(0..f.rows());
            let u = FeatureMatrix::new(2, 2, [f.row(a), f.row(b)].concat()).unwrap();
            uni += potential(&f, &u);
        }
        assert!(mc <= uni, "afk-mc2 {mc} vs uniform {uni}");
    }

    #[test]
    fn kmeans_fixed_point() {
        let f = FeatureMatrix::new(4, 1, vec![0.0, 2.0, 10.0, 12.0]).unwrap();
        let init = FeatureMatrix::new(2, 1, vec![1.0, 11.0]).unwrap();
        let r = kmeans(&f, &init, 10, 1e-12).unwrap();
        assert_eq!(r.centers, init);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn kmeans_recovers_cluster_means() {
        let f = clustered(&[[0.0, 0.0], [10.0, 10.0]], 300, 0.1, 7);
        let init = FeatureMatrix::new(2, 2, [f.row(0), f.row(1)].concat()).unwrap();
        let r = kmeans(&f, &init, 50, 1e-12).unwrap();
        let mean = |lo: usize| {
            let mut m = [0.0; 2];
            for i in lo..lo + 300 {
                m[0] += f.row(i)[0] / 300.0;
                m[1] += f.row(i)[1] / 300.0;
            }
            m
        };
        for truth in [mean(0), mean(300)] {
            assert!((0..2).any(|c| libm::sqrt(sq_dist(r.centers.row(c), &truth)) < 0.5));
        }
        assert!(r.potentials.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn empty_cluster_takes_farthest_point() {
        let f = FeatureMatrix::new(3, 1, vec![0.0, 1.0, 9.0]).unwrap();
        let init = FeatureMatrix::new(2, 1, vec![0.5, 100.0]).unwrap();
        let r = kmeans(&f, &init, 1, 0.0).unwrap();
        assert_eq!(r.centers.row(1), &[9.0]);
    }

    #[test]
    fn rebuild_single_center_is_mean() {
        let grids = [FeatureGrid::new(1, 2, 1, vec![1.0, 3.0]).unwrap()];
        let cb = Codebook::new(4, 1, vec![0.0; 4]).unwrap();
        let cfg = RefitConfig { samples: 10_000, ..RefitConfig::new(1, 9) };
        let out = rebuild(&cb, &grids, &cfg).unwrap();
        let mut r = rng(9);
        let f = sample_features(&grids, 10_000, &mut r).unwrap();
        let mean = f.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!((out.vector(0)[0] - mean).abs() < 1e-12);
        assert_eq!(out.hit_counts(), &[0]);
    }

    #[test]
    fn rebuild_fixes_collapsed_codebook() {
        // 16 well-separated blobs; the old codebook only ever selects two codes.
        let mut r = rng(10);
        let grids: Vec<FeatureGrid> = (0..40)
            .map(|_| {
                let v: Vec<f64> = (0..16)
                    .flat_map(|b| {
                        let (x, y) = ((b % 4) as f64 * 5.0, (b / 4) as f64 * 5.0);
                        [x + r.random_range(-0.3..0.3), y + r.random_range(-0.3..0.3)]
                    })
                    .collect();
                FeatureGrid::new(4, 4, 2, v).unwrap()
            })
            .collect();
        let mut old = vec![-50.0; 128];
        old[0..4].copy_from_slice(&[5.0, 5.0, 10.0, 10.0]);
        let cb = Codebook::new(64, 2, old).unwrap();
        let before: Vec<_> = grids.iter().map(|g| cb.lookup(g).unwrap().0).collect();
        assert!(usage(&before, 64).unwrap() < 0.05);

        let cfg = RefitConfig { samples: 5000, ..RefitConfig::new(16, 3) };
        let new = rebuild(&cb, &grids, &cfg).unwrap();
        let after: Vec<_> = grids.iter().map(|g| new.lookup(g).unwrap().0).collect();
        assert_eq!(usage(&after, 16).unwrap(), 1.0);
        assert_eq!(rebuild(&cb, &grids, &cfg).unwrap(), new);
    }

    proptest! {
        #[test]
        fn centers_in_bounding_box(seed in 0u64..1000, k in 1usize..6) {
            let f = clustered(&[[0.0, 0.0], [4.0, -2.0]], 30, 1.5, seed);
            let s = afkmc2_seed(&f, k, 20, &mut rng(seed)).unwrap();
            let r = kmeans(&f, &s, 20, 1e-9).unwrap();
            for dim in 0..2 {
                let lo = (0..f.rows()).map(|i| f.row(i)[dim]).fold(f64::INFINITY, f64::min);
                let hi = (0..f.rows()).map(|i| f.row(i)[dim]).fold(f64::NEG_INFINITY, f64::max);
                for c in 0..k {
                    let v = r.centers.row(c)[dim];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
            prop_assert!(r.potentials.last().unwrap() <= &(potential(&f, &s) + 1e-9));
        }
    }
}
