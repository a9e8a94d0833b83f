//! The `vqdd` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vqdd_core::autoencoder::{finetune_decoder, train_vq_autoencoder, ToyAutoencoder, ToyImage, VqTrainConfig};
use vqdd_core::codebook::Codebook;
use vqdd_core::denoiser::{train_denoiser, AdamState, DenoiserConfig, DenoiserModel, OracleDenoiser, TimestepSampler, TrainConfig};
use vqdd_core::diffusion::Denoiser;
use vqdd_core::eval::{nll_bits, quantization_mse, tv_distance_empirical, usage_report};
use vqdd_core::refit::{rebuild, RefitConfig};
use vqdd_core::sampler::{inpaint, sample};
use vqdd_core::toy::{pattern_distribution, ClusterSpec};
use vqdd_core::{FeatureGrid, LatentGrid, Schedule};

use crate::checkpoint::Checkpoint;
use crate::config::{config_flags, load_config, write_metrics, MetricRow, RunHash};
use crate::dataset::Dataset;
use crate::error::{read_file, Error, Result};
use crate::sidecar::{sidecar_path, Sidecar};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal or numerical failure (e.g. training diverged)
  2  usage error: unknown, missing or invalid flag
  3  input file not found
  4  shape mismatch (grid size, K, channels)
  5  corrupt or unreadable input (bad magic, version, checksum, truncation)
  6  output could not be written

Errors are printed to stderr as one line:  error[<kind>] exit=<code>: <message>

Flags may also come from --config FILE, one key=value per line with '#'
comments; flags on the command line win over the file.";

#[derive(Debug, Parser)]
#[command(name = "vqdd", version, about = "Vector-quantized discrete diffusion on toy latent grids", after_help = EXIT_CODES)]
pub struct Cli {
    /// Upper bound on worker threads (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset plus a `.dist` file describing its exact distribution.
    #[command(args_override_self = true)]
    GenToy(GenToy),
    /// Train the patch autoencoder and its codebook.
    #[command(args_override_self = true)]
    TrainVq(TrainVq),
    /// Rebuild the codebook from encoder features, then fine-tune the decoder.
    #[command(args_override_self = true)]
    Refit(Refit),
    /// Train the denoiser on latent grids; streams a CSV loss trace to stdout.
    #[command(args_override_self = true)]
    TrainDdm(TrainDdm),
    /// Draw latent grids from a trained denoiser.
    #[command(args_override_self = true)]
    Sample(SampleCmd),
    /// Complete partially known latent grids.
    #[command(args_override_self = true)]
    Inpaint(InpaintCmd),
    /// Compute metrics and write them as CSV.
    #[command(args_override_self = true)]
    Eval(Eval),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    /// Latent grids from the eight-grid pattern distribution.
    Patterns,
    /// Images whose patches are noisy copies of random prototypes.
    Clusters,
}

#[derive(Debug, Args)]
pub struct GenToy {
    #[arg(long, value_enum)]
    pub kind: ToyKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Grid rows (patterns, default 2) or image height in pixels (clusters, default 16).
    #[arg(long)]
    pub h: Option<usize>,
    /// Grid columns (patterns, default 2) or image width in pixels (clusters, default 16).
    #[arg(long)]
    pub w: Option<usize>,
    /// Categories (patterns, default 4) or prototypes (clusters, default 64).
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Items to draw (default 10000 grids or 400 images).
    #[arg(long)]
    pub count: Option<usize>,
    /// Top/bottom coupling strength for patterns.
    #[arg(long, default_value_t = vqdd_core::toy::DEFAULT_COUPLING)]
    pub coupling: f64,
    #[arg(long, default_value_t = vqdd_core::autoencoder::DEFAULT_PATCH)]
    pub patch: usize,
    /// Half-width of the uniform pixel noise for clusters.
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct TrainVq {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long = "K", default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = vqdd_core::codebook::DEFAULT_COMMITMENT)]
    pub beta_commit: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = vqdd_core::autoencoder::DEFAULT_PATCH)]
    pub patch: usize,
}

#[derive(Debug, Args)]
pub struct Refit {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of feature vectors sampled for clustering.
    #[arg(long = "P", default_value_t = RefitConfig::DEFAULT_SAMPLES)]
    pub p: usize,
    /// Size of the rebuilt codebook (default: keep the current size).
    #[arg(long = "K-target")]
    pub k_target: Option<usize>,
    /// Markov chain length for seeding.
    #[arg(long, default_value_t = RefitConfig::DEFAULT_CHAIN_LEN)]
    pub mc_len: usize,
    #[arg(long, default_value_t = 100)]
    pub kmeans_iters: usize,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Decoder fine-tuning steps after the rebuild.
    #[arg(long, default_value_t = 500)]
    pub finetune_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct TrainDdm {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long = "T", default_value_t = vqdd_core::schedule::DEFAULT_STEPS)]
    pub t: usize,
    #[arg(long, default_value_t = vqdd_core::schedule::DEFAULT_OFFSET)]
    pub s: f64,
    #[arg(long, default_value_t = vqdd_core::schedule::DEFAULT_BETA_CAP)]
    pub beta_cap: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub time_dim: usize,
    /// Widths of the two hidden layers.
    #[arg(long, value_delimiter = ',', default_values_t = [256, 256])]
    pub hidden: Vec<usize>,
    /// Print every n-th step of the loss trace.
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InpaintCmd {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Latent dataset; every grid is completed.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Completions per input grid.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    /// Variational bound in bits per position on a latent dataset.
    Nll,
    /// Codebook usage and quantization error on an image dataset.
    Usage,
    /// Total variation between model samples and a known distribution.
    Tv,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Latent dataset for nll, image dataset for usage.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub metrics: Vec<Metric>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Distribution file for tv (default: the data file's `.dist`).
    #[arg(long)]
    pub dist: Option<PathBuf>,
    /// Model samples drawn for tv.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Sweeps over the data for nll.
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn finite_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(usage(format!("--{name} must be a positive number, got {v}")));
    }
    Ok(())
}

/// Independent generator for item `i` of a run; results do not depend on
/// the thread count.
fn stream_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

fn read_input(path: &Path, hash: &mut RunHash, key: &str) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    hash.input(key, &bytes);
    Ok(bytes)
}

fn echo_hash(out: &mut dyn Write, hash: &RunHash) -> Result<()> {
    say(out, format_args!("config_hash={}", hash.hex()))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|source| Error::Write { path: "<stdout>".into(), source })
}

/// Inserts config-file flags right after the subcommand name, so that later
/// command-line flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let entries = load_config(&path)?;
    let cmd = Cli::command();
    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s.clone())))
    else {
        return Ok(args);
    };
    let flags = config_flags(&entries, |key| {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(key))
            .map(|a| !matches!(a.get_action(), ArgAction::SetTrue | ArgAction::SetFalse | ArgAction::Count))
    });
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// progress lines to `out`.
pub fn run(args: Vec<OsString>, out: &mut dyn Write) -> Result<()> {
    let args = expand_config(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(|source| Error::Write { path: "<stdout>".into(), source })?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(usage(first.trim_start_matches("error: ")));
        }
    };
    if let Some(n) = cli.threads {
        positive("threads", n)?;
        // A pool may already exist when called repeatedly in one process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialised");
        }
    }
    match &cli.command {
        Command::GenToy(c) => gen_toy(c, out),
        Command::TrainVq(c) => train_vq(c, out),
        Command::Refit(c) => refit(c, out),
        Command::TrainDdm(c) => train_ddm(c, out),
        Command::Sample(c) => sample_cmd(c, out),
        Command::Inpaint(c) => inpaint_cmd(c, out),
        Command::Eval(c) => eval(c, out),
    }
}

fn gen_toy(c: &GenToy, out: &mut dyn Write) -> Result<()> {
    let patterns = c.kind == ToyKind::Patterns;
    let (h, w) = (c.h.unwrap_or(if patterns { 2 } else { 16 }), c.w.unwrap_or(if patterns { 2 } else { 16 }));
    let k = c.k.unwrap_or(if patterns { 4 } else { 64 });
    let count = c.count.unwrap_or(if patterns { 10_000 } else { 400 });
    positive("h", h)?;
    positive("w", w)?;
    positive("count", count)?;
    positive("channels", c.channels)?;
    positive("patch", c.patch)?;
    if patterns {
        if h < 2 || k < 4 {
            return Err(usage("patterns need --h >= 2 and --K >= 4"));
        }
        if !(0.0..=1.0).contains(&c.coupling) {
            return Err(usage("--coupling must lie in [0, 1]"));
        }
    } else {
        positive("K", k)?;
        if h % c.patch != 0 || w % c.patch != 0 {
            return Err(usage(format!("{h}x{w} images do not divide into {}-pixel patches", c.patch)));
        }
        if !(0.0..=0.1).contains(&c.noise) {
            return Err(usage("--noise must lie in [0, 0.1]"));
        }
    }

    let mut hash = RunHash::new("gen-toy");
    hash.set("kind", c.kind).set("seed", c.seed).set("h", h).set("w", w).set("K", k).set("count", count);
    if patterns {
        hash.set("coupling", c.coupling);
    } else {
        hash.set("patch", c.patch).set("noise", c.noise).set("channels", c.channels);
    }
    echo_hash(out, &hash)?;

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let (ds, side) = if patterns {
        let dist = pattern_distribution(h, w, k, c.coupling)?;
        let grids = (0..count).map(|_| dist.sample(&mut rng)).collect();
        (Dataset::Latents(grids), Sidecar::Patterns { coupling: c.coupling, dist })
    } else {
        let spec = ClusterSpec::random(k, c.channels, c.patch, c.noise, &mut rng)?;
        let imgs = spec.images(h, w, count, &mut rng)?;
        (Dataset::Images(imgs), Sidecar::Clusters { spec, h, w })
    };
    ds.save(&c.out)?;
    let side_path = sidecar_path(&c.out);
    side.save(&side_path)?;
    say(out, format_args!("wrote {} {} items to {}", count, ds.kind(), c.out.display()))?;
    say(out, format_args!("wrote distribution to {}", side_path.display()))
}

fn encode_all(ae: &ToyAutoencoder, imgs: &[ToyImage]) -> Result<Vec<FeatureGrid>> {
    imgs.par_iter().map(|i| Ok(ae.encode(i)?)).collect()
}

fn train_vq(c: &TrainVq, out: &mut dyn Write) -> Result<()> {
    positive("K", c.k)?;
    positive("d", c.d)?;
    positive("patch", c.patch)?;
    finite_positive("lr", c.lr)?;
    if !(c.beta_commit.is_finite() && c.beta_commit >= 0.0) {
        return Err(usage("--beta-commit must be non-negative"));
    }
    let mut hash = RunHash::new("train-vq");
    hash.set("K", c.k).set("d", c.d).set("beta_commit", c.beta_commit).set("steps", c.steps);
    hash.set("lr", c.lr).set("seed", c.seed).set("patch", c.patch);
    let bytes = read_input(&c.data, &mut hash, "data")?;
    echo_hash(out, &hash)?;
    let imgs = Dataset::from_bytes(&bytes)?.into_images()?;
    let ch = imgs[0].c();
    if imgs[0].h() % c.patch != 0 || imgs[0].w() % c.patch != 0 {
        return Err(Error::Shape(format!("{}x{} images do not divide into {}-pixel patches", imgs[0].h(), imgs[0].w(), c.patch)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut ae = ToyAutoencoder::init(ch, c.patch, c.d, &mut rng)?;
    let scale = 1.0 / c.k as f64;
    let init: Vec<f64> = (0..c.k * c.d).map(|_| rng.random_range(-scale..scale)).collect();
    let mut cb = Codebook::new(c.k, c.d, init)?;
    let cfg = VqTrainConfig { beta: c.beta_commit, ..VqTrainConfig::new(c.steps, c.lr) };
    let trace = train_vq_autoencoder(&imgs, &mut ae, &mut cb, &cfg, &mut rng)?;
    cb.warn_duplicates();
    let rep = usage_report(&imgs, &ae, &cb)?;
    if let Some(last) = trace.last() {
        say(out, format_args!("final_loss={last:?}"))?;
    }
    say(out, format_args!("usage={:?}", rep.usage))?;
    say(out, format_args!("quantization_mse={:?}", quantization_mse(&imgs, &ae, &cb)?))?;
    let cp = Checkpoint {
        codebook: Some(cb),
        autoencoder: Some(ae),
        rng_seed: Some(c.seed),
        config_hash: Some(hash.digest()),
        ..Default::default()
    };
    cp.save(&c.out_ckpt)
}

fn refit(c: &Refit, out: &mut dyn Write) -> Result<()> {
    positive("P", c.p)?;
    positive("mc-len", c.mc_len)?;
    positive("kmeans-iters", c.kmeans_iters)?;
    finite_positive("lr", c.lr)?;
    if let Some(k) = c.k_target {
        positive("K-target", k)?;
        if c.p < 10 * k {
            return Err(usage(format!("--P must be at least 10 x --K-target ({})", 10 * k)));
        }
    }
    let mut hash = RunHash::new("refit");
    hash.set("P", c.p).set("K_target", c.k_target).set("mc_len", c.mc_len).set("kmeans_iters", c.kmeans_iters);
    hash.set("seed", c.seed).set("finetune_steps", c.finetune_steps).set("lr", c.lr);
    let ckpt_bytes = read_input(&c.ckpt, &mut hash, "ckpt")?;
    let data_bytes = read_input(&c.data, &mut hash, "data")?;
    echo_hash(out, &hash)?;
    let mut cp = Checkpoint::from_bytes(&ckpt_bytes)?;
    let imgs = Dataset::from_bytes(&data_bytes)?.into_images()?;
    let mut ae = cp.require_autoencoder()?.clone();
    let cb = cp.require_codebook()?.clone();
    let k_target = c.k_target.unwrap_or(cb.k());
    if c.p < 10 * k_target {
        return Err(usage(format!("--P must be at least 10 x K ({})", 10 * k_target)));
    }

    let before = usage_report(&imgs, &ae, &cb)?;
    let mse_before = quantization_mse(&imgs, &ae, &cb)?;
    say(out, format_args!("usage_before={:?}", before.usage))?;
    say(out, format_args!("mse_before={mse_before:?}"))?;

    let feats = encode_all(&ae, &imgs)?;
    let cfg = RefitConfig {
        samples: c.p,
        chain_len: c.mc_len,
        kmeans_iters: c.kmeans_iters,
        ..RefitConfig::new(k_target, c.seed)
    };
    let new_cb = rebuild(&cb, &feats, &cfg)?;
    new_cb.warn_duplicates();
    if c.finetune_steps > 0 {
        let mut rng = stream_rng(c.seed, 1);
        finetune_decoder(&imgs, &mut ae, &new_cb, c.finetune_steps, c.lr, &mut rng)?;
    }
    let after = usage_report(&imgs, &ae, &new_cb)?;
    let mse_after = quantization_mse(&imgs, &ae, &new_cb)?;
    say(out, format_args!("usage_after={:?}", after.usage))?;
    say(out, format_args!("mse_after={mse_after:?}"))?;

    cp.codebook = Some(new_cb);
    cp.autoencoder = Some(ae);
    cp.rng_seed = Some(c.seed);
    cp.config_hash = Some(hash.digest());
    cp.save(&c.out_ckpt)
}

fn train_ddm(c: &TrainDdm, out: &mut dyn Write) -> Result<()> {
    positive("T", c.t)?;
    positive("batch", c.batch)?;
    positive("embed-dim", c.embed_dim)?;
    positive("log-every", c.log_every)?;
    finite_positive("lr", c.lr)?;
    if c.hidden.len() != 2 || c.hidden.contains(&0) {
        return Err(usage("--hidden takes two positive widths, e.g. 256,256"));
    }
    if c.time_dim == 0 || !c.time_dim.is_multiple_of(2) {
        return Err(usage("--time-dim must be a positive even number"));
    }
    if !(c.beta_cap > 0.0 && c.beta_cap < 1.0) || !(c.s.is_finite() && c.s >= 0.0) {
        return Err(usage("need 0 < --beta-cap < 1 and --s >= 0"));
    }
    let mut hash = RunHash::new("train-ddm");
    hash.set("T", c.t).set("s", c.s).set("beta_cap", c.beta_cap).set("steps", c.steps).set("batch", c.batch);
    hash.set("lr", c.lr).set("seed", c.seed).set("embed_dim", c.embed_dim).set("time_dim", c.time_dim);
    hash.set("hidden", &c.hidden);
    let bytes = read_input(&c.latents, &mut hash, "latents")?;
    echo_hash(out, &hash)?;
    let grids = Dataset::from_bytes(&bytes)?.into_latents()?;
    let g = &grids[0];

    let sched = Schedule::cosine(c.t, c.s, c.beta_cap)?;
    let config = DenoiserConfig {
        embed_dim: c.embed_dim,
        time_dim: c.time_dim,
        hidden: [c.hidden[0], c.hidden[1]],
        ..DenoiserConfig::reference(g.k(), g.h(), g.w())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut model = DenoiserModel::init(config, &mut rng)?;
    let mut adam = AdamState::new(model.params().len(), c.lr);
    let mut ts = TimestepSampler::new(c.t);
    let cfg = TrainConfig::new(c.steps, c.batch);

    say(out, format_args!("step,loss,raw_loss,mean_t,skipped"))?;
    let mut write_err = None;
    train_denoiser(&grids, &mut model, &sched, &mut ts, &mut adam, &cfg, &mut rng, |r| {
        if (r.step + 1) % c.log_every == 0 || r.step + 1 == c.steps {
            let line = format!("{},{:?},{:?},{:?},{}", r.step, r.loss, r.raw_loss, r.mean_t, r.skipped as u8);
            if let Err(e) = say(out, format_args!("{line}")) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let cp = Checkpoint {
        schedule: Some(sched),
        denoiser: Some(model),
        adam: Some(adam),
        rng_seed: Some(c.seed),
        config_hash: Some(hash.digest()),
        ..Default::default()
    };
    cp.save(&c.out_ckpt)
}

fn model_parts(cp: &Checkpoint) -> Result<(&Schedule, &DenoiserModel)> {
    Ok((cp.require_schedule()?, cp.require_denoiser()?))
}

fn draw_samples<D: Denoiser + Sync>(d: &D, sched: &Schedule, shape: (usize, usize, usize), n: usize, seed: u64) -> Result<Vec<LatentGrid>> {
    let (h, w, k) = shape;
    (0..n)
        .into_par_iter()
        .map(|i| Ok(sample(d, sched, h, w, k, &mut stream_rng(seed, i))?))
        .collect()
}

fn sample_cmd(c: &SampleCmd, out: &mut dyn Write) -> Result<()> {
    positive("count", c.count)?;
    let mut hash = RunHash::new("sample");
    hash.set("count", c.count).set("seed", c.seed);
    let bytes = read_input(&c.ckpt, &mut hash, "ckpt")?;
    echo_hash(out, &hash)?;
    let cp = Checkpoint::from_bytes(&bytes)?;
    let (sched, model) = model_parts(&cp)?;
    let cfg = model.config();
    let grids = draw_samples(model, sched, (cfg.h, cfg.w, cfg.k), c.count, c.seed)?;
    Dataset::Latents(grids).save(&c.out)?;
    say(out, format_args!("wrote {} samples to {}", c.count, c.out.display()))
}

fn inpaint_cmd(c: &InpaintCmd, out: &mut dyn Write) -> Result<()> {
    positive("count", c.count)?;
    let mut hash = RunHash::new("inpaint");
    hash.set("count", c.count).set("seed", c.seed);
    let ckpt = read_input(&c.ckpt, &mut hash, "ckpt")?;
    let input = read_input(&c.input, &mut hash, "input")?;
    let mask_bytes = read_input(&c.mask, &mut hash, "mask")?;
    echo_hash(out, &hash)?;
    let cp = Checkpoint::from_bytes(&ckpt)?;
    let (sched, model) = model_parts(&cp)?;
    let grids = Dataset::from_bytes(&input)?.into_latents()?;
    let mask = crate::mask::parse_mask(std::str::from_utf8(&mask_bytes).map_err(|_| Error::Format("mask is not UTF-8".into()))?)?;
    let cfg = model.config();
    if let Some(g) = grids.iter().find(|g| (g.h(), g.w(), g.k()) != (cfg.h, cfg.w, cfg.k)) {
        return Err(Error::Shape(format!(
            "input grid {}x{} K={} does not fit a {}x{} K={} model",
            g.h(), g.w(), g.k(), cfg.h, cfg.w, cfg.k
        )));
    }
    if (mask.h(), mask.w()) != (cfg.h, cfg.w) {
        return Err(Error::Shape(format!("{}x{} mask for {}x{} grids", mask.h(), mask.w(), cfg.h, cfg.w)));
    }
    let n = grids.len() * c.count;
    let done = (0..n)
        .into_par_iter()
        .map(|i| Ok(inpaint(model, sched, &grids[i / c.count], &mask, &mut stream_rng(c.seed, i))?))
        .collect::<Result<Vec<_>>>()?;
    Dataset::Latents(done).save(&c.out)?;
    say(out, format_args!("wrote {n} completions to {}", c.out.display()))
}

fn eval(c: &Eval, out: &mut dyn Write) -> Result<()> {
    positive("passes", c.passes)?;
    positive("samples", c.samples)?;
    let mut metrics = c.metrics.clone();
    metrics.sort();
    metrics.dedup();
    let needs_data = metrics.iter().any(|m| matches!(m, Metric::Nll | Metric::Usage));
    if needs_data && c.data.is_none() {
        return Err(usage("--data is required for nll and usage"));
    }
    let dist_path = match (&c.dist, &c.data) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(d)) => Some(sidecar_path(d)),
        (None, None) => None,
    };
    if metrics.contains(&Metric::Tv) && dist_path.is_none() {
        return Err(usage("--dist (or --data with a .dist file beside it) is required for tv"));
    }

    let mut hash = RunHash::new("eval");
    hash.set("metrics", &metrics).set("seed", c.seed).set("samples", c.samples).set("passes", c.passes);
    let ckpt = read_input(&c.ckpt, &mut hash, "ckpt")?;
    let data = match &c.data {
        Some(p) if needs_data => Some(read_input(p, &mut hash, "data")?),
        _ => None,
    };
    // With nll, a distribution file found beside the data adds the oracle's bound.
    let dist = match &dist_path {
        Some(p) if metrics.contains(&Metric::Tv) || c.dist.is_some() || (metrics.contains(&Metric::Nll) && p.exists()) => {
            let bytes = read_input(p, &mut hash, "dist")?;
            Some(Sidecar::from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Format("distribution file is not UTF-8".into()))?)?)
        }
        _ => None,
    };
    echo_hash(out, &hash)?;
    let hex = hash.hex();
    let cp = Checkpoint::from_bytes(&ckpt)?;
    let data = data.map(|b| Dataset::from_bytes(&b)).transpose()?;

    let mut rows = Vec::new();
    let emit = |rows: &mut Vec<MetricRow>, out: &mut dyn Write, name: &str, value: f64, start: Instant| -> Result<()> {
        say(out, format_args!("{name}={value:?}"))?;
        rows.push(MetricRow { metric: name.into(), value, seed: c.seed, config_hash: hex.clone(), wall_seconds: start.elapsed().as_secs_f64() });
        Ok(())
    };
    for m in metrics {
        let start = Instant::now();
        match m {
            Metric::Nll => {
                let (sched, model) = model_parts(&cp)?;
                let grids = data.clone().unwrap().into_latents()?;
                let v = parallel_nll(&grids, model, sched, c.seed, c.passes)?;
                emit(&mut rows, out, "nll_bits", v, start)?;
                if let Some(Sidecar::Patterns { dist, .. }) = &dist {
                    if dist.shape() == (grids[0].h(), grids[0].w(), grids[0].k()) {
                        let start = Instant::now();
                        let oracle = OracleDenoiser::new(dist, sched);
                        let v = parallel_nll(&grids, &oracle, sched, c.seed, c.passes)?;
                        emit(&mut rows, out, "oracle_nll_bits", v, start)?;
                    }
                }
            }
            Metric::Usage => {
                let imgs = data.clone().unwrap().into_images()?;
                let (ae, cb) = (cp.require_autoencoder()?, cp.require_codebook()?);
                let rep = usage_report(&imgs, ae, cb)?;
                emit(&mut rows, out, "usage", rep.usage, start)?;
                emit(&mut rows, out, "quantization_mse", quantization_mse(&imgs, ae, cb)?, start)?;
            }
            Metric::Tv => {
                let (sched, model) = model_parts(&cp)?;
                let Some(Sidecar::Patterns { dist, .. }) = &dist else {
                    return Err(Error::Format("tv needs a patterns distribution file".into()));
                };
                let cfg = model.config();
                let shape = dist.shape();
                if shape != (cfg.h, cfg.w, cfg.k) {
                    return Err(Error::Shape(format!("distribution over {shape:?} grids, model over {:?}", (cfg.h, cfg.w, cfg.k))));
                }
                let samples = draw_samples(model, sched, shape, c.samples, c.seed)?;
                emit(&mut rows, out, "tv", tv_distance_empirical(&samples, dist), start)?;
            }
        }
    }
    write_metrics(&c.out_csv, &rows)
}

/// Per-item bound with its own generator, summed in dataset order.
fn parallel_nll<D: Denoiser + Sync>(grids: &[LatentGrid], d: &D, sched: &Schedule, seed: u64, passes: usize) -> Result<f64> {
    let per: Vec<f64> = grids
        .par_iter()
        .enumerate()
        .map(|(i, g)| Ok(nll_bits(std::slice::from_ref(g), d, sched, &mut stream_rng(seed, i), passes)?))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
