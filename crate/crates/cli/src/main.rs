use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use i2p::checkpoint::{Checkpoint, CheckpointKind};
use i2p::config::{RunConfig, SEED_ENV};
use i2p::data::{FewShotDataset, SOURCE_DOMAIN};
use i2p::images::{emit_grid, load_dataset, save_images};
use i2p::metrics::evaluate;
use i2p::nets::{sample_latents, ArchConfig};
use i2p::runs::{ablate, execute_run};
use i2p::substitution::FrozenConvEncoder;
use i2p::training::{pretrain_source, sample_checkpoint, LogRow, PretrainConfig};
use i2p::{Error, Result};

#[derive(Parser)]
#[command(name = "i2p", version, about = "Few-shot generator adaptation with identity injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source generator on a built-in procedural domain.
    Pretrain(PretrainArgs),
    /// Write procedurally drawn images of a built-in domain as PNG files.
    SynthData(SynthDataArgs),
    /// Adapt a source checkpoint to a directory of few-shot images.
    Adapt(AdaptArgs),
    /// Sample images from a checkpoint into a grid.
    Generate(GenerateArgs),
    /// Compare a generated image set with a real one.
    Evaluate(EvaluateArgs),
    /// Sweep one configuration key, one run directory per value.
    Ablate(AblateArgs),
    /// Print every configuration key with its default.
    Config,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value = SOURCE_DOMAIN)]
    domain: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    r1_gamma: f64,
    /// Architecture preset: `default` (32x32) or `micro` (4x4, for smoke tests).
    #[arg(long, default_value = "default")]
    arch: String,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    domain: String,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Flags mirroring configuration keys; each overrides the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    loss_ratio_r: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    r1_gamma: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    #[arg(long)]
    style_loss_source: Option<String>,
    #[arg(long)]
    grid_cols: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut flags: Vec<(String, String)> = Vec::new();
        let path_text = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let pairs = [
            ("source", path_text(&self.source)),
            ("data", path_text(&self.data)),
            ("out", path_text(&self.out)),
            ("alpha", self.alpha.clone()),
            ("lambda", self.lambda.clone()),
            ("loss_ratio_r", self.loss_ratio_r.clone()),
            ("learning_rate", self.lr.clone()),
            ("batch_size", self.batch_size.clone()),
            ("iterations", self.iters.clone()),
            ("seed", self.seed.clone()),
            ("r1_gamma", self.r1_gamma.clone()),
            ("checkpoint_every", self.checkpoint_every.clone()),
            ("log_every", self.log_every.clone()),
            ("style_loss_source", self.style_loss_source.clone()),
            ("grid_cols", self.grid_cols.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            flags.push((k.trim().to_string(), v.to_string()));
        }
        let env_seed = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(self.config.as_deref(), env_seed.as_deref(), &flags)
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Continue from a train-state checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Grid PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write every sample as its own PNG into this directory.
    #[arg(long)]
    images_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value = "fid,intra_lpips,feature_cosine")]
    metrics: String,
    #[arg(long, default_value = "frozen-conv-v1")]
    extractor: String,
    /// Images are resized to this side length before feature extraction.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Configuration key to sweep.
    #[arg(long)]
    key: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

fn arch_preset(name: &str) -> Result<ArchConfig> {
    match name {
        "default" => Ok(ArchConfig::default()),
        "micro" => Ok(ArchConfig::micro()),
        other => Err(Error::Config(format!("unknown arch preset `{other}` (default, micro)"))),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required (flag --{key} or config file)")))
}

fn load_inputs(cfg: &RunConfig) -> Result<(Checkpoint, FewShotDataset)> {
    let source = Checkpoint::load(required(&cfg.source, "source")?)?;
    let size = source.manifest.arch.image_size();
    let data = load_dataset(required(&cfg.data, "data")?, size)?;
    Ok((source, data))
}

fn report_row(row: &LogRow) {
    let l = &row.losses;
    log::info!(
        "step {:>5}  d {:.4}  g {:.4}  c {:.4}  s {:.4}  r {:.4}  total {:.4}",
        row.step,
        l.l_adv_d,
        l.l_adv_g,
        l.l_c,
        l.l_s,
        l.l_r,
        l.l_total
    );
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let arch = arch_preset(&a.arch)?;
            let seed = match std::env::var(SEED_ENV) {
                Ok(s) => s
                    .parse()
                    .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?,
                Err(_) => a.seed,
            };
            let cfg = PretrainConfig {
                domain: a.domain,
                iterations: a.iters,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                seed,
                r1_gamma: a.r1_gamma,
            };
            let ck = pretrain_source(&arch, &cfg, |step, d, g| {
                if step % 100 == 0 || step == cfg.iterations {
                    log::info!("step {step:>5}  d {d:.4}  g {g:.4}");
                }
            })?;
            ck.save(&a.out)?;
            log::info!("wrote {}", a.out.display());
        }
        Command::SynthData(a) => {
            let data = FewShotDataset::procedural(&a.domain, a.count, a.seed, a.size)?;
            let paths = save_images(&data.images, &a.out, "img")?;
            log::info!("wrote {} images to {}", paths.len(), a.out.display());
        }
        Command::Adapt(a) => {
            let cfg = a.cfg.resolve()?;
            let out = required(&cfg.out, "out")?.to_path_buf();
            let (source, data) = load_inputs(&cfg)?;
            let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = execute_run(&cfg, &source, &data, &out, resume.as_ref(), report_row)?;
            log::info!(
                "finished {} logged steps; run directory {}",
                outcome.log.len(),
                out.display()
            );
        }
        Command::Generate(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            if ck.manifest.kind == CheckpointKind::TrainState {
                log::warn!("sampling a train-state checkpoint without identity injection");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let z = sample_latents(&mut rng, a.n, ck.manifest.arch.z_dim);
            let x = sample_checkpoint(&ck, &z)?;
            let images: Vec<_> = (0..a.n).map(|i| x.index_outer(i)).collect();
            emit_grid(&images, a.cols.min(a.n).max(1), None, &a.out)?;
            if let Some(dir) = &a.images_dir {
                save_images(&images, dir, "sample")?;
            }
            log::info!("wrote {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let metrics: Vec<String> = a
                .metrics
                .split(',')
                .map(|m| m.trim().to_string())
                .filter(|m| !m.is_empty())
                .collect();
            let extractor = FrozenConvEncoder::new(&a.extractor, 3)?;
            let real = load_dataset(&a.real, a.resolution)?;
            let fake = load_dataset(&a.fake, a.resolution)?;
            let report = evaluate(&real.images, &fake.images, &metrics, &extractor)?;
            let value = serde_json::to_value(&report).expect("report serialises");
            write_json(&a.out, &value)?;
            println!("{}", serde_json::to_string(&value).expect("json"));
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            let out = required(&cfg.out, "out")?.to_path_buf();
            let (source, data) = load_inputs(&cfg)?;
            let runs = ablate(&cfg, &a.key, &a.values, &source, &data, &out, |v, row| {
                if row.step % 50 == 0 {
                    log::info!("[{}={v}] step {} total {:.4}", a.key, row.step, row.losses.l_total);
                }
            })?;
            for (dir, _) in runs {
                println!("{}", dir.display());
            }
        }
        Command::Config => print!("{}", RunConfig::documentation()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
