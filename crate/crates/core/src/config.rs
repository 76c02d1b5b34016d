//! Flat `key = value` run configuration.
//!
//! Resolution order, later wins: built-in defaults, config file, the `I2P_SEED`
//! environment variable, command-line flags. Unknown keys are errors. The resolved
//! configuration is written back in the same format, so `parse(emit(c)) == c`.

use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::training::{AdaptConfig, StyleLossSource};

pub const SEED_ENV: &str = "I2P_SEED";
pub const CONFIG_FILE: &str = "config.txt";

/// Every key with its default (as text) and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("alpha", "0.5", "identity-injection coefficient, in [0, 1]"),
    ("lambda", "1", "weight of the identity-consistency losses, >= 0"),
    ("loss_ratio_r", "0.5", "share of the synthesis loss; content+style get the rest, in [0, 1]"),
    ("learning_rate", "0.002", "Adam step size for every trained collection, > 0"),
    ("batch_size", "4", "latent and raw-image batch size, >= 1"),
    ("iterations", "500", "adaptation steps (5002 reproduces the reference schedule), >= 1"),
    ("seed", "0", "RNG seed for latents, batches and sampling"),
    ("r1_gamma", "0.1", "R1 penalty weight on real images, >= 0"),
    ("checkpoint_every", "100", "steps between train-state checkpoints, >= 1"),
    ("log_every", "1", "steps between loss-log rows, >= 1"),
    ("style_loss_source", "target", "style features compared with raw images: target | source"),
    ("source", "", "source checkpoint path"),
    ("data", "", "few-shot image directory"),
    ("out", "", "output directory"),
    ("metrics", "fid,intra_lpips,feature_cosine", "comma-separated metric names"),
    ("extractor", "frozen-conv-v1", "feature extractor id for metrics"),
    ("grid_cols", "8", "columns of the run's sample grid, >= 1"),
];

pub const METRICS: [&str; 3] = ["fid", "intra_lpips", "feature_cosine"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub adapt: AdaptConfig,
    pub source: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Vec<String>,
    pub extractor: String,
    pub grid_cols: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            adapt: AdaptConfig::default(),
            source: None,
            data: None,
            out: None,
            metrics: Vec::new(),
            extractor: String::new(),
            grid_cols: 0,
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("defaults parse");
        }
        c
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value and re-validates that key's range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.adapt;
        let value = value.trim();
        match key {
            "alpha" => a.alpha = number(key, value)?,
            "lambda" => a.lambda = number(key, value)?,
            "loss_ratio_r" => a.loss_ratio_r = number(key, value)?,
            "learning_rate" => a.learning_rate = number(key, value)?,
            "batch_size" => a.batch_size = number(key, value)?,
            "iterations" => a.iterations = number(key, value)?,
            "seed" => a.seed = number(key, value)?,
            "r1_gamma" => a.r1_gamma = number(key, value)?,
            "checkpoint_every" => a.checkpoint_every = number(key, value)?,
            "log_every" => a.log_every = number(key, value)?,
            "style_loss_source" => a.style_loss_source = StyleLossSource::parse(value)?,
            "source" => self.source = path(value),
            "data" => self.data = path(value),
            "out" => self.out = path(value),
            "metrics" => {
                self.metrics = value
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(String::from)
                    .collect()
            }
            "extractor" => self.extractor = value.to_string(),
            "grid_cols" => self.grid_cols = number(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known: {})",
                    KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
                )))
            }
        }
        self.check_key(key)
    }

    fn check_key(&self, key: &str) -> Result<()> {
        let a = &self.adapt;
        let ok = match key {
            "alpha" => (0.0..=1.0).contains(&a.alpha),
            "lambda" => a.lambda >= 0.0 && a.lambda.is_finite(),
            "loss_ratio_r" => (0.0..=1.0).contains(&a.loss_ratio_r),
            "learning_rate" => a.learning_rate > 0.0 && a.learning_rate.is_finite(),
            "batch_size" => a.batch_size >= 1,
            "iterations" => a.iterations >= 1,
            "r1_gamma" => a.r1_gamma >= 0.0 && a.r1_gamma.is_finite(),
            "checkpoint_every" => a.checkpoint_every >= 1,
            "log_every" => a.log_every >= 1,
            "grid_cols" => self.grid_cols >= 1,
            "metrics" => {
                for m in &self.metrics {
                    ensure!(
                        METRICS.contains(&m.as_str()),
                        Config,
                        "`metrics`: unknown metric `{m}` (known: {})",
                        METRICS.join(", ")
                    );
                }
                true
            }
            _ => true,
        };
        ensure!(ok, Config, "`{key}` out of range: {}", self.get(key).unwrap_or_default());
        Ok(())
    }

    /// Textual value of a key, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.adapt;
        Some(match key {
            "alpha" => a.alpha.to_string(),
            "lambda" => a.lambda.to_string(),
            "loss_ratio_r" => a.loss_ratio_r.to_string(),
            "learning_rate" => a.learning_rate.to_string(),
            "batch_size" => a.batch_size.to_string(),
            "iterations" => a.iterations.to_string(),
            "seed" => a.seed.to_string(),
            "r1_gamma" => a.r1_gamma.to_string(),
            "checkpoint_every" => a.checkpoint_every.to_string(),
            "log_every" => a.log_every.to_string(),
            "style_loss_source" => a.style_loss_source.as_str().to_string(),
            "source" => path_text(&self.source),
            "data" => path_text(&self.data),
            "out" => path_text(&self.out),
            "metrics" => self.metrics.join(","),
            "extractor" => self.extractor.clone(),
            "grid_cols" => self.grid_cols.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key in declaration order, one `key = value` line each.
    pub fn emit(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Defaults, then `file`, then `env_seed`, then `flags`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            c.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
        }
        if let Some(s) = env_seed {
            c.set("seed", s)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in flags {
            c.set(k, v)?;
        }
        c.adapt.validate()?;
        Ok(c)
    }

    /// Writes the resolved configuration to `<dir>/config.txt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.emit()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// `key = default  # description` for every key.
    pub fn documentation() -> String {
        KEYS.iter()
            .map(|(k, v, d)| format!("{k} = {v}  # {d}\n"))
            .collect()
    }
}
