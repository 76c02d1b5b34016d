//! Source pretraining, the adaptation loop and a plain fine-tuning baseline.
//!
//! One adaptation step, in order:
//!
//! 1. draw `z`, then a raw batch `x_R` (uniform, with replacement);
//! 2. `w_S = F_S(z)`, `w_T = F_T(z)`, `w'_T = inject(w_T, w_S, α)`,
//!    `x_S = G_S(w_S)`, `x_T = G_T(w'_T)`;
//! 3. discriminator update on `(x_R, detached x_T)`, with R1 on `x_R`;
//! 4. generator update of `F_T`, target synthesis and decoupler on
//!    `L_adv_G + λ·(identity consistency)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind, RngState};
use crate::consistency::{
    consistency_var, d_loss_var, g_loss_var, r1_penalty_var, smooth_l1_var, synthesis_loss_var,
    LossReport, LossWeights,
};
use crate::data::{FewShotDataset, ShapesDomain};
use crate::error::{ensure, Error, Result};
use crate::injection::{inject_layers, max_stats_deviation, InjectionConfig};
use crate::nets::{
    check_images, discriminator_forward, mapping_forward, sample_latents, synthesis_forward, ArchConfig,
    StyleLatentStack,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ModelBundle, ParamCollection};
use crate::substitution::{check_collinearity, substitution_vars, FrozenConvEncoder};
use crate::tensor::Tensor;

/// Pretraining aborts once either adversarial loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// Which style features the style-consistency loss compares with the raw batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleLossSource {
    /// Style of target-generated images.
    #[default]
    Target,
    /// Style of source-generated images.
    Source,
}

impl StyleLossSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(StyleLossSource::Target),
            "source" => Ok(StyleLossSource::Source),
            other => Err(Error::Config(format!(
                "style_loss_source must be `target` or `source`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StyleLossSource::Target => "target",
            StyleLossSource::Source => "source",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub loss_ratio_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub r1_gamma: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub style_loss_source: StyleLossSource,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.5,
            lambda: 1.0,
            loss_ratio_r: 0.5,
            learning_rate: 2e-3,
            batch_size: 4,
            iterations: 500,
            seed: 0,
            r1_gamma: 0.1,
            checkpoint_every: 100,
            log_every: 1,
            style_loss_source: StyleLossSource::Target,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        InjectionConfig::new(self.alpha)?;
        self.weights()?;
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.iterations >= 1, Config, "iterations must be >= 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be > 0, got {}",
            self.learning_rate
        );
        ensure!(
            self.r1_gamma >= 0.0 && self.r1_gamma.is_finite(),
            Config,
            "r1_gamma must be >= 0, got {}",
            self.r1_gamma
        );
        ensure!(self.checkpoint_every >= 1, Config, "checkpoint_every must be >= 1");
        ensure!(self.log_every >= 1, Config, "log_every must be >= 1");
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda, self.loss_ratio_r)
    }

    /// True when two configs describe the same optimisation trajectory
    /// (run length and output cadence may differ).
    fn same_trajectory(&self, other: &AdaptConfig) -> bool {
        let strip = |c: &AdaptConfig| AdaptConfig {
            iterations: 0,
            checkpoint_every: 0,
            log_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// One logged step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossReport,
    /// L2 norm of the total-objective gradient on the target mapping network.
    pub grad_norm_f: f64,
    /// Largest per-row |mean(w'_T) − mean(w_S)| over all layers.
    pub inj_mean_dev: f64,
    /// Largest per-row |std(w'_T) − std(w_S)| over all layers.
    pub inj_std_dev: f64,
    /// Largest |cos(S, C)| over the three decoupled batches.
    pub max_cos_sc: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_adv_d,l_adv_g,l_c,l_s,l_r,l_total,grad_norm_F";
pub const DIAGNOSTICS_CSV_HEADER: &str = "step,inj_mean_dev,inj_std_dev,max_cos_sc";
const ROW_WIDTH: usize = 11;

impl LogRow {
    pub fn loss_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.l_adv_d, l.l_adv_g, l.l_c, l.l_s, l.l_r, l.l_total, self.grad_norm_f
        )
    }

    pub fn diagnostics_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.inj_mean_dev, self.inj_std_dev, self.max_cos_sc
        )
    }

    fn to_vec(self) -> [f64; ROW_WIDTH] {
        let l = self.losses;
        [
            self.step as f64,
            l.l_adv_d,
            l.l_adv_g,
            l.l_c,
            l.l_s,
            l.l_r,
            l.l_total,
            self.grad_norm_f,
            self.inj_mean_dev,
            self.inj_std_dev,
            self.max_cos_sc,
        ]
    }

    fn from_slice(v: &[f64]) -> LogRow {
        LogRow {
            step: v[0] as u64,
            losses: LossReport {
                l_adv_d: v[1],
                l_adv_g: v[2],
                l_c: v[3],
                l_s: v[4],
                l_r: v[5],
                l_total: v[6],
            },
            grad_norm_f: v[7],
            inj_mean_dev: v[8],
            inj_std_dev: v[9],
            max_cos_sc: v[10],
        }
    }
}

fn history_tensor(rows: &[LogRow]) -> Tensor {
    let data = rows.iter().flat_map(|r| r.to_vec()).collect();
    Tensor::new(vec![rows.len(), ROW_WIDTH], data).expect("row width is fixed")
}

fn history_rows(t: &Tensor) -> Result<Vec<LogRow>> {
    ensure!(
        t.shape().len() == 2 && t.shape()[1] == ROW_WIDTH,
        Config,
        "history tensor has shape {:?}",
        t.shape()
    );
    Ok(t.data().chunks(ROW_WIDTH).map(LogRow::from_slice).collect())
}

fn grads_by_name(bound: &Bound<'_>, grads: &[Var<'_>]) -> BTreeMap<String, Tensor> {
    bound
        .names()
        .into_iter()
        .zip(grads)
        .map(|(n, g)| (n, (*g.value()).clone()))
        .collect()
}

fn squared_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|v| v * v).sum()
}

/// One discriminator update on real vs (already detached) fake images. Returns the
/// adversarial part of the loss, without the R1 term.
pub fn discriminator_update(
    disc: &mut ParamCollection,
    opt: &mut Adam,
    arch: &ArchConfig,
    x_real: &Tensor,
    x_fake: &Tensor,
    r1_gamma: f64,
) -> Result<f64> {
    let g = Graph::new();
    let p = disc.bind(&g, true);
    let real = g.leaf(Rc::new(x_real.clone()), r1_gamma > 0.0);
    let fake = g.constant(x_fake.clone());
    let adv = d_loss_var(
        discriminator_forward(&p, arch, real),
        discriminator_forward(&p, arch, fake),
    );
    let objective = if r1_gamma > 0.0 {
        adv.add(r1_penalty_var(&g, &p, arch, real, r1_gamma))
    } else {
        adv
    };
    let grads = g.grad(objective, &p.vars());
    let loss = adv.value().item();
    ensure!(
        objective.value().item().is_finite(),
        Numerical,
        "non-finite discriminator loss {}",
        objective.value().item()
    );
    opt.update(disc, &grads_by_name(&p, &grads))?;
    Ok(loss)
}

// ---------------------------------------------------------------------------
// plain adversarial fine-tuning (also used for source pretraining)

/// Generator + discriminator trained with the adversarial loss only.
#[derive(Clone, Debug)]
pub struct FineTuneState {
    pub arch: ArchConfig,
    pub bundle: ModelBundle,
    pub opt_mapping: Adam,
    pub opt_synthesis: Adam,
    pub opt_discriminator: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl FineTuneState {
    pub fn new(arch: &ArchConfig, mut bundle: ModelBundle, lr: f64, seed: u64) -> Self {
        bundle.mapping.trainable = true;
        bundle.synthesis.trainable = true;
        bundle.discriminator.trainable = true;
        bundle.decoupler.trainable = false;
        let cfg = AdamConfig::gan(lr);
        FineTuneState {
            arch: arch.clone(),
            opt_mapping: Adam::new(cfg, &bundle.mapping),
            opt_synthesis: Adam::new(cfg, &bundle.synthesis),
            opt_discriminator: Adam::new(cfg, &bundle.discriminator),
            bundle,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    /// One D-then-G step. `real` draws the real batch from the shared RNG after the
    /// latent batch has been drawn. Returns `(l_adv_d, l_adv_g)`.
    pub fn step(
        &mut self,
        batch_size: usize,
        r1_gamma: f64,
        real: impl FnOnce(&mut ChaCha8Rng) -> Tensor,
    ) -> Result<(f64, f64)> {
        let arch = &self.arch;
        let z = sample_latents(&mut self.rng, batch_size, arch.z_dim);
        let x_real = real(&mut self.rng);
        check_images(arch, &x_real)?;

        let x_fake = {
            let g = Graph::new();
            let m = self.bundle.mapping.bind(&g, false);
            let s = self.bundle.synthesis.bind(&g, false);
            let ws = mapping_forward(&m, arch, g.constant(z.clone()));
            (*synthesis_forward(&s, arch, &ws).value()).clone()
        };
        let l_d = discriminator_update(
            &mut self.bundle.discriminator,
            &mut self.opt_discriminator,
            arch,
            &x_real,
            &x_fake,
            r1_gamma,
        )?;

        let g = Graph::new();
        let m = self.bundle.mapping.bind(&g, true);
        let s = self.bundle.synthesis.bind(&g, true);
        let d = self.bundle.discriminator.bind(&g, false);
        let ws = mapping_forward(&m, arch, g.constant(z));
        let x = synthesis_forward(&s, arch, &ws);
        let loss = g_loss_var(discriminator_forward(&d, arch, x));
        let l_g = loss.value().item();
        ensure!(l_g.is_finite(), Numerical, "step {}: non-finite generator loss", self.step + 1);
        let mut vars = m.vars();
        vars.extend(s.vars());
        let grads = g.grad(loss, &vars);
        let (gm, gs) = grads.split_at(m.vars().len());
        self.opt_mapping
            .update(&mut self.bundle.mapping, &grads_by_name(&m, gm))?;
        self.opt_synthesis
            .update(&mut self.bundle.synthesis, &grads_by_name(&s, gs))?;
        self.step += 1;
        Ok((l_d, l_g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub domain: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub r1_gamma: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            domain: crate::data::SOURCE_DOMAIN.to_string(),
            iterations: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            r1_gamma: 0.1,
        }
    }
}

/// Trains a fresh generator on a built-in procedural domain with the adversarial loss
/// only. `progress` sees `(step, l_adv_d, l_adv_g)` after every step.
pub fn pretrain_source(
    arch: &ArchConfig,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(u64, f64, f64),
) -> Result<Checkpoint> {
    arch.validate()?;
    let domain = ShapesDomain::by_id(&cfg.domain)?;
    ensure!(cfg.iterations >= 1, Config, "iterations must be >= 1");
    ensure!(cfg.batch_size >= 1, Config, "batch_size must be >= 1");
    ensure!(cfg.learning_rate > 0.0, Config, "learning_rate must be > 0");
    let bundle = ModelBundle::init(arch, cfg.seed)?;
    let mut state = FineTuneState::new(arch, bundle, cfg.learning_rate, cfg.seed);
    let size = arch.image_size();
    for _ in 0..cfg.iterations {
        let (l_d, l_g) = state.step(cfg.batch_size, cfg.r1_gamma, |rng| {
            domain.sample_batch(rng, cfg.batch_size, size)
        })?;
        if !(l_d.abs() <= DIVERGENCE_LIMIT && l_g.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::Numerical(format!(
                "pretraining diverged at step {}: l_adv_d = {l_d}, l_adv_g = {l_g}",
                state.step
            )));
        }
        progress(state.step, l_d, l_g);
    }
    let mut bundle = state.bundle;
    bundle.set_all_trainable(false);
    let mut ck = Checkpoint::from_bundle(CheckpointKind::Source, arch, cfg.seed, state.step, &bundle);
    ck.manifest.notes.insert("domain".into(), cfg.domain.clone());
    Ok(ck)
}

// ---------------------------------------------------------------------------
// adaptation

/// The frozen half of the setup.
pub struct SourceModels {
    pub arch: ArchConfig,
    pub bundle: ModelBundle,
    pub encoder: FrozenConvEncoder,
}

impl SourceModels {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut bundle = ck.bundle()?;
        bundle.set_all_trainable(false);
        Ok(SourceModels {
            arch: ck.manifest.arch.clone(),
            encoder: FrozenConvEncoder::for_arch(&ck.manifest.arch)?,
            bundle,
        })
    }
}

/// Everything that changes during adaptation.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub target: ModelBundle,
    pub optimizers: BTreeMap<String, Adam>,
    pub rng: ChaCha8Rng,
    pub history: Vec<LogRow>,
}

/// Generator-side objective built on one graph.
struct GeneratorObjective<'g> {
    total: Var<'g>,
    consistency: Var<'g>,
    l_adv_g: Var<'g>,
    l_c: Var<'g>,
    l_s: Var<'g>,
    l_r: Var<'g>,
    w_s: Vec<Var<'g>>,
    w_inj: Vec<Var<'g>>,
    cos_sc: [(Var<'g>, Var<'g>); 3],
    trainable: Vec<(&'static str, Bound<'g>)>,
}

pub struct Adapter {
    pub cfg: AdaptConfig,
    pub weights: LossWeights,
    pub source: SourceModels,
    pub state: TrainState,
}

const TRAINED: [&str; 4] = ["mapping", "synthesis", "decoupler", "discriminator"];

impl Adapter {
    /// Fresh adaptation state: the target starts as a copy of the source bundle.
    pub fn new(source_ckpt: &Checkpoint, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let source = SourceModels::from_checkpoint(source_ckpt)?;
        let mut target = source.bundle.clone_model();
        target.set_all_trainable(true);
        let adam = AdamConfig::gan(cfg.learning_rate);
        let optimizers = TRAINED
            .iter()
            .map(|&c| (c.to_string(), Adam::new(adam, target.collection(c).expect("known"))))
            .collect();
        Ok(Adapter {
            weights: cfg.weights()?,
            state: TrainState {
                step: 0,
                target,
                optimizers,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                history: Vec::new(),
            },
            source,
            cfg,
        })
    }

    /// Continues from a train-state checkpoint written by [`Adapter::state_checkpoint`].
    pub fn resume(source_ckpt: &Checkpoint, state_ckpt: &Checkpoint, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &state_ckpt.manifest;
        ensure!(m.kind == CheckpointKind::TrainState, Config, "not a train-state checkpoint");
        state_ckpt.validate_arch(&source_ckpt.manifest.arch)?;
        let stored: AdaptConfig = serde_json::from_str(
            m.notes
                .get("adapt_config")
                .ok_or_else(|| Error::Config("train-state checkpoint lacks its config".into()))?,
        )
        .map_err(|e| Error::Config(format!("stored adapt config: {e}")))?;
        ensure!(
            cfg.same_trajectory(&stored),
            Config,
            "resume config differs from the checkpoint's: {stored:?}"
        );
        let mut adapter = Adapter::new(source_ckpt, cfg)?;
        let mut target = state_ckpt.bundle()?;
        target.set_all_trainable(true);
        let adam = AdamConfig::gan(adapter.cfg.learning_rate);
        for c in TRAINED {
            let opt = state_ckpt.optimizer(c, adam, target.collection(c).expect("known"))?;
            adapter.state.optimizers.insert(c.to_string(), opt);
        }
        adapter.state.target = target;
        adapter.state.step = m.step;
        adapter.state.rng = m
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("train-state checkpoint lacks RNG state".into()))?
            .restore()?;
        adapter.state.history = match state_ckpt.tensors.get("history") {
            Some(t) => history_rows(t)?,
            None => Vec::new(),
        };
        Ok(adapter)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.source.arch
    }

    fn objective<'g>(&self, g: &'g Graph, z: &Tensor, x_r: &Tensor) -> GeneratorObjective<'g> {
        let arch = self.arch();
        let src = &self.source.bundle;
        let tgt = &self.state.target;
        let zv = g.constant(z.clone());

        let w_s = mapping_forward(&src.mapping.bind(g, false), arch, zv);
        let map_t = tgt.mapping.bind(g, true);
        let w_t = mapping_forward(&map_t, arch, zv);
        let w_inj = inject_layers(&w_t, &w_s, self.cfg.alpha);
        let x_s = synthesis_forward(&src.synthesis.bind(g, false), arch, &w_s);
        let syn_t = tgt.synthesis.bind(g, true);
        let x_t = synthesis_forward(&syn_t, arch, &w_inj);

        let disc = tgt.discriminator.bind(g, false);
        let l_adv_g = g_loss_var(discriminator_forward(&disc, arch, x_t));

        let dec = tgt.decoupler.bind(g, true);
        let sub = substitution_vars(g, &self.source.encoder, &dec, x_s, x_t, g.constant(x_r.clone()));
        let l_c = smooth_l1_var(sub.c_s, sub.c_t);
        let style = match self.cfg.style_loss_source {
            StyleLossSource::Target => sub.s_t,
            StyleLossSource::Source => sub.s_s,
        };
        let l_s = smooth_l1_var(style, sub.s_r);
        let l_r = synthesis_loss_var(sub.m_cs_sr, sub.m_ct_sr, sub.m_cs_st);
        let consistency = consistency_var(l_c, l_s, l_r, &self.weights);
        GeneratorObjective {
            total: l_adv_g.add(consistency),
            consistency,
            l_adv_g,
            l_c,
            l_s,
            l_r,
            w_s,
            w_inj,
            cos_sc: [(sub.s_s, sub.c_s), (sub.s_t, sub.c_t), (sub.s_r, sub.c_r)],
            trainable: vec![("mapping", map_t), ("synthesis", syn_t), ("decoupler", dec)],
        }
    }

    fn check_dataset(&self, data: &FewShotDataset) -> Result<()> {
        data.validate()?;
        let s = self.arch().image_size();
        let c = self.arch().image_channels;
        ensure!(
            data.images[0].shape() == [c, s, s],
            InvalidInput,
            "dataset images are {:?}, the model produces [{c}, {s}, {s}]",
            data.images[0].shape()
        );
        Ok(())
    }

    fn injected_images(&self, z: &Tensor) -> Tensor {
        let arch = self.arch();
        let g = Graph::new();
        let zv = g.constant(z.clone());
        let w_s = mapping_forward(&self.source.bundle.mapping.bind(&g, false), arch, zv);
        let w_t = mapping_forward(&self.state.target.mapping.bind(&g, false), arch, zv);
        let w_inj = inject_layers(&w_t, &w_s, self.cfg.alpha);
        let x = synthesis_forward(&self.state.target.synthesis.bind(&g, false), arch, &w_inj);
        (*x.value()).clone()
    }

    /// One alternating D-then-G step.
    pub fn step(&mut self, data: &FewShotDataset) -> Result<LogRow> {
        self.check_dataset(data)?;
        let step = self.state.step + 1;
        let n = self.cfg.batch_size;
        let z_dim = self.arch().z_dim;
        let z = sample_latents(&mut self.state.rng, n, z_dim);
        let x_r = data.sample_batch(&mut self.state.rng, n);

        let x_fake = self.injected_images(&z);
        let arch = self.source.arch.clone();
        let state = &mut self.state;
        let l_adv_d = discriminator_update(
            &mut state.target.discriminator,
            state.optimizers.get_mut("discriminator").expect("known"),
            &arch,
            &x_r,
            &x_fake,
            self.cfg.r1_gamma,
        )
        .map_err(|e| Error::Numerical(format!("step {step}: discriminator update failed: {e}")))?;

        let g = Graph::new();
        let obj = self.objective(&g, &z, &x_r);
        let losses = LossReport {
            l_adv_d,
            l_adv_g: obj.l_adv_g.value().item(),
            l_c: obj.l_c.value().item(),
            l_s: obj.l_s.value().item(),
            l_r: obj.l_r.value().item(),
            l_total: obj.total.value().item(),
        };
        if !losses.all_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: non-finite loss; alpha = {}, lambda = {}, losses = {losses:?}",
                self.cfg.alpha, self.cfg.lambda
            )));
        }
        let mut max_cos_sc: f64 = 0.0;
        for (name, (s, c)) in ["source", "target", "raw"].iter().zip(&obj.cos_sc) {
            let ctx = format!("step {step}, {name} batch");
            max_cos_sc = max_cos_sc.max(check_collinearity(&s.value(), &c.value(), &ctx)?);
        }
        let stack = |ws: &[Var]| StyleLatentStack {
            layers: ws.iter().map(|w| (*w.value()).clone()).collect(),
        };
        let (inj_mean_dev, inj_std_dev) = max_stats_deviation(&stack(&obj.w_inj), &stack(&obj.w_s))?;

        let vars: Vec<Var> = obj.trainable.iter().flat_map(|(_, b)| b.vars()).collect();
        let grads = g.grad(obj.total, &vars);
        let mut offset = 0;
        let mut grad_norm_f = 0.0;
        let mut updates = Vec::new();
        for (name, bound) in &obj.trainable {
            let k = bound.names().len();
            let named = grads_by_name(bound, &grads[offset..offset + k]);
            offset += k;
            if *name == "mapping" {
                grad_norm_f = squared_norm(&named).sqrt();
            }
            updates.push((*name, named));
        }
        drop(obj);
        drop(g);
        for (name, named) in updates {
            let coll = self.state.target.collection_mut(name).expect("known");
            self.state
                .optimizers
                .get_mut(name)
                .expect("known")
                .update(coll, &named)?;
        }

        self.state.step = step;
        let row = LogRow {
            step,
            losses,
            grad_norm_f,
            inj_mean_dev,
            inj_std_dev,
            max_cos_sc,
        };
        if step % self.cfg.log_every == 0 || step == self.cfg.iterations {
            self.state.history.push(row);
        }
        Ok(row)
    }

    /// Norm of the gradient of λ·(identity consistency) alone on the target mapping
    /// network, on a fresh batch drawn from a copy of the RNG (state is untouched).
    pub fn consistency_grad_norm(&self, data: &FewShotDataset) -> Result<f64> {
        self.check_dataset(data)?;
        let mut rng = self.state.rng.clone();
        let z = sample_latents(&mut rng, self.cfg.batch_size, self.arch().z_dim);
        let x_r = data.sample_batch(&mut rng, self.cfg.batch_size);
        let g = Graph::new();
        let obj = self.objective(&g, &z, &x_r);
        let mapping = &obj.trainable[0].1;
        let grads = g.grad(obj.consistency, &mapping.vars());
        Ok(squared_norm(&grads_by_name(mapping, &grads)).sqrt())
    }

    /// Images from the adapted generator, with injection applied.
    pub fn sample_target(&self, z: &Tensor) -> Tensor {
        self.injected_images(z)
    }

    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_bundle(
            CheckpointKind::TrainState,
            self.arch(),
            self.cfg.seed,
            self.state.step,
            &self.state.target,
        );
        for (name, opt) in &self.state.optimizers {
            ck.put_optimizer(name, opt);
        }
        ck.manifest.rng = Some(RngState::capture(&self.state.rng));
        ck.manifest.notes.insert(
            "adapt_config".into(),
            serde_json::to_string(&self.cfg).expect("config serialises"),
        );
        ck.tensors
            .insert("history".into(), history_tensor(&self.state.history));
        ck
    }

    /// The adapted generator for sampling. Stores the source mapping network and α
    /// alongside so samplers can reproduce the injected path.
    pub fn target_checkpoint(&self) -> Checkpoint {
        let mut bundle = self.state.target.clone_model();
        bundle.set_all_trainable(false);
        let mut ck = Checkpoint::from_bundle(
            CheckpointKind::Target,
            self.arch(),
            self.cfg.seed,
            self.state.step,
            &bundle,
        );
        for (name, t) in self.source.bundle.mapping.iter() {
            ck.tensors.insert(format!("source_mapping.{name}"), t.clone());
        }
        ck.manifest
            .notes
            .insert("alpha".into(), self.cfg.alpha.to_string());
        ck
    }
}

/// Samples `z` through a target checkpoint, reproducing the injected path when the
/// checkpoint carries a source mapping network.
pub fn sample_checkpoint(ck: &Checkpoint, z: &Tensor) -> Result<Tensor> {
    let arch = &ck.manifest.arch;
    let bundle = ck.bundle()?;
    let mut source_mapping = ParamCollection::new(false);
    for (key, t) in &ck.tensors {
        if let Some(name) = key.strip_prefix("source_mapping.") {
            source_mapping.insert(name, t.clone());
        }
    }
    let alpha = match ck.manifest.notes.get("alpha") {
        Some(a) if !source_mapping.is_empty() => a
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad alpha in checkpoint: {e}")))?,
        _ => 0.0,
    };
    ensure!(
        z.shape().len() == 2 && z.shape()[1] == arch.z_dim,
        Config,
        "latent batch must be [N, {}], got {:?}",
        arch.z_dim,
        z.shape()
    );
    let g = Graph::new();
    let zv = g.constant(z.clone());
    let w_t = mapping_forward(&bundle.mapping.bind(&g, false), arch, zv);
    let ws = if alpha > 0.0 {
        let w_s = mapping_forward(&source_mapping.bind(&g, false), arch, zv);
        inject_layers(&w_t, &w_s, alpha)
    } else {
        w_t
    };
    Ok((*synthesis_forward(&bundle.synthesis.bind(&g, false), arch, &ws).value()).clone())
}

pub struct AdaptOutcome {
    pub target: Checkpoint,
    pub log: Vec<LogRow>,
}

/// File layout of an adaptation output directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }
    pub fn diagnostics_csv(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn state_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("state_{step:06}.ckpt"))
    }
    pub fn target_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("target.ckpt")
    }
}

struct CsvLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str, rows: impl Iterator<Item = String>) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = CsvLog { path, w: BufWriter::new(f) };
        log.line(header)?;
        for r in rows {
            log.line(&r)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `adapter` up to `cfg.iterations`, writing logs and checkpoints under `out`
/// when given. `progress` sees every step's row.
pub fn run_adapter(
    mut adapter: Adapter,
    data: &FewShotDataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<(Adapter, AdaptOutcome)> {
    let paths = out.map(RunPaths::new);
    let mut logs = match &paths {
        Some(p) => {
            std::fs::create_dir_all(p.checkpoint_dir()).map_err(|e| Error::io(&p.checkpoint_dir(), e))?;
            let h = &adapter.state.history;
            Some((
                CsvLog::create(p.loss_csv(), LOSS_CSV_HEADER, h.iter().map(LogRow::loss_csv))?,
                CsvLog::create(
                    p.diagnostics_csv(),
                    DIAGNOSTICS_CSV_HEADER,
                    h.iter().map(LogRow::diagnostics_csv),
                )?,
            ))
        }
        None => None,
    };
    while adapter.state.step < adapter.cfg.iterations {
        let row = adapter.step(data)?;
        let logged = adapter.state.history.last() == Some(&row);
        if let (Some((loss, diag)), true) = (logs.as_mut(), logged) {
            loss.line(&row.loss_csv())?;
            diag.line(&row.diagnostics_csv())?;
        }
        if let Some(p) = &paths {
            if row.step % adapter.cfg.checkpoint_every == 0 || row.step == adapter.cfg.iterations {
                let path = p.state_checkpoint(row.step);
                adapter.state_checkpoint().save(&path)?;
            }
        }
        progress(&row);
    }
    let target = adapter.target_checkpoint();
    if let Some(p) = &paths {
        target.save(&p.target_checkpoint())?;
    }
    let outcome = AdaptOutcome {
        target,
        log: adapter.state.history.clone(),
    };
    Ok((adapter, outcome))
}

/// Adapts a source checkpoint to `data` from scratch.
pub fn adapt(
    source_ckpt: &Checkpoint,
    data: &FewShotDataset,
    cfg: &AdaptConfig,
    out: Option<&Path>,
) -> Result<AdaptOutcome> {
    let adapter = Adapter::new(source_ckpt, cfg.clone())?;
    adapter.check_dataset(data)?;
    Ok(run_adapter(adapter, data, out, |_| {})?.1)
}
