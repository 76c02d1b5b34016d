//! Run directories: one adaptation run with its provenance, and one-key sweeps.
//!
//! A finished run directory holds
//!
//! ```text
//! config.txt                resolved configuration
//! loss.csv                  per-step losses
//! diagnostics.csv           injection statistics and feature collinearity
//! checkpoints/state_*.ckpt  resumable train state
//! checkpoints/target.ckpt   adapted generator
//! grid.png                  source samples (top row) over adapted samples (bottom row)
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::data::FewShotDataset;
use crate::error::{ensure, Error, Result};
use crate::images::emit_grid;
use crate::nets::{generate, sample_latents};
use crate::training::{run_adapter, AdaptOutcome, Adapter, RunPaths, LOSS_CSV_HEADER};

pub const GRID_FILE: &str = "grid.png";
/// Offset mixed into the run seed for the grid's latents, so they differ from the
/// training draws.
const GRID_SEED_SALT: u64 = 0x6772_6964;

/// Runs (or resumes) one adaptation into `out` and writes every run artifact.
pub fn execute_run(
    cfg: &RunConfig,
    source: &Checkpoint,
    data: &FewShotDataset,
    out: &Path,
    resume: Option<&Checkpoint>,
    progress: impl FnMut(&crate::training::LogRow),
) -> Result<AdaptOutcome> {
    cfg.save(out)?;
    let adapter = match resume {
        Some(state) => Adapter::resume(source, state, cfg.adapt.clone())?,
        None => Adapter::new(source, cfg.adapt.clone())?,
    };
    let (adapter, outcome) = run_adapter(adapter, data, Some(out), progress)?;

    let arch = adapter.arch().clone();
    let cols = cfg.grid_cols;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.adapt.seed ^ GRID_SEED_SALT);
    let z = sample_latents(&mut rng, cols, arch.z_dim);
    let src = generate(&adapter.source.bundle, &arch, &z)?;
    let tgt = adapter.sample_target(&z);
    let cells: Vec<_> = (0..cols)
        .map(|i| src.index_outer(i))
        .chain((0..cols).map(|i| tgt.index_outer(i)))
        .collect();
    let labels = (0..cols).map(|i| format!("z{i}")).collect();
    emit_grid(&cells, cols, Some(labels), &out.join(GRID_FILE))?;
    verify_run_dir(out)?;
    Ok(outcome)
}

/// Checks that `dir` contains every artifact of a finished run.
pub fn verify_run_dir(dir: &Path) -> Result<()> {
    let paths = RunPaths::new(dir);
    let required = [
        dir.join(CONFIG_FILE),
        paths.loss_csv(),
        paths.diagnostics_csv(),
        paths.target_checkpoint(),
        dir.join(GRID_FILE),
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    ensure!(missing.is_empty(), Data, "run directory incomplete, missing: {}", missing.join(", "));
    let states = std::fs::read_dir(paths.checkpoint_dir())
        .map_err(|e| Error::io(paths.checkpoint_dir(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("state_"))
        .count();
    ensure!(states >= 1, Data, "{}: no train-state checkpoint", dir.display());
    let csv = std::fs::read_to_string(paths.loss_csv()).map_err(|e| Error::io(paths.loss_csv(), e))?;
    ensure!(
        csv.lines().next() == Some(LOSS_CSV_HEADER),
        Data,
        "{}: unexpected loss-log header",
        paths.loss_csv().display()
    );
    let config = std::fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    RunConfig::parse(&config)?;
    Ok(())
}

/// Directory name for one sweep value.
pub fn sweep_dir_name(key: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{key}={clean}")
}

/// Runs one adaptation per value of `key`, each in `<out_root>/<key>=<value>`.
/// All values are validated before the first run starts.
pub fn ablate(
    base: &RunConfig,
    key: &str,
    values: &[String],
    source: &Checkpoint,
    data: &FewShotDataset,
    out_root: &Path,
    mut progress: impl FnMut(&str, &crate::training::LogRow),
) -> Result<Vec<(PathBuf, AdaptOutcome)>> {
    ensure!(!values.is_empty(), Config, "ablate needs at least one value");
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v)?;
            c.adapt.validate()?;
            let dir = out_root.join(sweep_dir_name(key, v));
            c.out = Some(dir.clone());
            Ok((v.as_str(), dir, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for (v, dir, c) in configs {
        log::info!("ablate: {key} = {v} -> {}", dir.display());
        let outcome = execute_run(&c, source, data, &dir, None, |row| progress(v, row))?;
        runs.push((dir, outcome));
    }
    Ok(runs)
}
