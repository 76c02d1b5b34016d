//! Toy-scale generator (mapping network + AdaIN-modulated synthesis network) and
//! discriminator.
//!
//! Every network exists in two forms: a graph-level forward that takes bound parameters
//! and [`Var`]s (used by training and gradient checks), and a plain tensor wrapper that
//! validates shapes and returns a [`Result`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::params::{Bound, Init, ModelBundle, ParamCollection};
use crate::tensor::{ConvGeom, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
/// Variance floor used by every instance-normalisation in the crate (std floor 1e-8).
pub const STD_EPS: f64 = 1e-8;

const SAME: ConvGeom = ConvGeom { stride: 1, pad: 1 };
const DOWN: ConvGeom = ConvGeom { stride: 2, pad: 1 };
const POINTWISE: ConvGeom = ConvGeom { stride: 1, pad: 0 };

/// Architecture hyperparameters shared by checkpoints and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Side length of the learned constant input.
    pub const_size: usize,
    /// Output channels of each synthesis block; its length is the number of W+ layers.
    pub synth_channels: Vec<usize>,
    /// Whether each synthesis block starts with a ×2 nearest upsample.
    pub synth_upsample: Vec<bool>,
    pub image_channels: usize,
    /// Output channels of each stride-2 discriminator block.
    pub disc_channels: Vec<usize>,
    pub decoupler_channels: usize,
    pub feature_dim: usize,
    pub encoder: String,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 3,
            const_size: 4,
            synth_channels: vec![32, 32, 16, 16],
            synth_upsample: vec![false, true, true, true],
            image_channels: 3,
            disc_channels: vec![16, 32, 64, 64],
            decoupler_channels: 32,
            feature_dim: 64,
            encoder: "frozen-conv-v1".to_string(),
        }
    }
}

impl ArchConfig {
    /// A 4×4-image configuration small enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        ArchConfig {
            z_dim: 6,
            w_dim: 5,
            mapping_layers: 2,
            const_size: 2,
            synth_channels: vec![3, 2],
            synth_upsample: vec![false, true],
            image_channels: 3,
            disc_channels: vec![3, 2],
            decoupler_channels: 4,
            feature_dim: 6,
            encoder: "frozen-conv-micro".to_string(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.synth_channels.len()
    }

    pub fn image_size(&self) -> usize {
        self.const_size << self.synth_upsample.iter().filter(|&&u| u).count()
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.image_size();
        [batch, self.image_channels, s, s]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.z_dim >= 1 && self.w_dim >= 2, Config, "latent dims must be positive (w_dim >= 2)");
        ensure!(self.mapping_layers >= 1, Config, "mapping needs at least one layer");
        ensure!(!self.synth_channels.is_empty(), Config, "synthesis needs at least one block");
        ensure!(
            self.synth_channels.len() == self.synth_upsample.len(),
            Config,
            "synth_channels and synth_upsample lengths differ"
        );
        ensure!(!self.disc_channels.is_empty(), Config, "discriminator needs at least one block");
        ensure!(self.feature_dim >= 2, Config, "feature_dim must be at least 2");
        Ok(())
    }

    /// Spatial size of the discriminator's last feature map.
    fn disc_final_size(&self) -> usize {
        self.disc_channels
            .iter()
            .fold(self.image_size(), |s, _| DOWN.out_size(s, 3))
    }
}

/// A batch of noise vectors, `[N, z_dim]`.
pub fn sample_latents(rng: &mut ChaCha8Rng, n: usize, z_dim: usize) -> Tensor {
    let data = (0..n * z_dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(vec![n, z_dim], data)
}

/// Per-layer latent codes for a batch: `layers[i]` is `[N, w_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLatentStack {
    pub layers: Vec<Tensor>,
}

impl StyleLatentStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[1])
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Tensor::all_finite)
    }
}

// ---------------------------------------------------------------------------
// initialisation

pub fn init_mapping(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamCollection {
    let mut init = Init::new(rng);
    let mut p = ParamCollection::new(true);
    let mut fan_in = arch.z_dim;
    for i in 0..arch.mapping_layers {
        p.insert(format!("fc{i}.weight"), init.normal(&[fan_in, arch.w_dim], INIT_STD));
        p.insert(format!("fc{i}.bias"), Tensor::zeros(&[arch.w_dim]));
        fan_in = arch.w_dim;
    }
    for i in 0..arch.num_layers() {
        p.insert(format!("head{i}.weight"), init.normal(&[arch.w_dim, arch.w_dim], INIT_STD));
        p.insert(format!("head{i}.bias"), Tensor::zeros(&[arch.w_dim]));
    }
    p
}

pub fn init_synthesis(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamCollection {
    let mut init = Init::new(rng);
    let mut p = ParamCollection::new(true);
    let c0 = arch.synth_channels[0];
    p.insert("const", init.normal(&[c0, arch.const_size, arch.const_size], INIT_STD));
    let mut cin = c0;
    for (i, &c) in arch.synth_channels.iter().enumerate() {
        p.insert(format!("block{i}.conv.weight"), init.normal(&[c, cin, 3, 3], INIT_STD));
        p.insert(format!("block{i}.conv.bias"), Tensor::zeros(&[c]));
        p.insert(format!("block{i}.scale.weight"), init.normal(&[arch.w_dim, c], INIT_STD));
        p.insert(format!("block{i}.scale.bias"), Tensor::zeros(&[c]));
        p.insert(format!("block{i}.shift.weight"), init.normal(&[arch.w_dim, c], INIT_STD));
        p.insert(format!("block{i}.shift.bias"), Tensor::zeros(&[c]));
        cin = c;
    }
    p.insert("to_rgb.weight", init.normal(&[arch.image_channels, cin, 1, 1], INIT_STD));
    p.insert("to_rgb.bias", Tensor::zeros(&[arch.image_channels]));
    p
}

pub fn init_discriminator(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamCollection {
    let mut init = Init::new(rng);
    let mut p = ParamCollection::new(true);
    let mut cin = arch.image_channels;
    for (i, &c) in arch.disc_channels.iter().enumerate() {
        p.insert(format!("block{i}.weight"), init.normal(&[c, cin, 3, 3], INIT_STD));
        p.insert(format!("block{i}.bias"), Tensor::zeros(&[c]));
        cin = c;
    }
    let s = arch.disc_final_size();
    p.insert("head.weight", init.normal(&[cin * s * s, 1], INIT_STD));
    p.insert("head.bias", Tensor::zeros(&[1]));
    p
}

impl ModelBundle {
    /// Fresh bundle with every collection trainable, drawn from `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<ModelBundle> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelBundle {
            mapping: init_mapping(arch, &mut rng),
            synthesis: init_synthesis(arch, &mut rng),
            discriminator: init_discriminator(arch, &mut rng),
            decoupler: crate::substitution::init_decoupler(arch, &mut rng)?,
        })
    }
}

// ---------------------------------------------------------------------------
// graph-level forwards

pub fn mapping_forward<'g>(p: &Bound<'g>, arch: &ArchConfig, z: Var<'g>) -> Vec<Var<'g>> {
    let mut h = z;
    for i in 0..arch.mapping_layers {
        h = h
            .linear(p.get(&format!("fc{i}.weight")), p.get(&format!("fc{i}.bias")))
            .leaky_relu(LRELU_SLOPE);
    }
    (0..arch.num_layers())
        .map(|i| h.linear(p.get(&format!("head{i}.weight")), p.get(&format!("head{i}.bias"))))
        .collect()
}

/// Instance-normalises each `(n, c)` plane of an NCHW tensor, then applies
/// `(1 + scale) * x + shift` with per-sample `[N, C]` modulation.
pub fn adain_feature_map<'g>(x: Var<'g>, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
    let shape = x.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let rows = x.reshape(&[n * c, hw]);
    let centered = rows.sub(rows.row_mean().row_broadcast(hw));
    let std = centered
        .square()
        .row_mean()
        .floor_at(STD_EPS * STD_EPS)
        .sqrt();
    let normed = centered.mul(std.recip().row_broadcast(hw));
    let gain = scale.add_scalar(1.0).reshape(&[n * c]).row_broadcast(hw);
    let bias = shift.reshape(&[n * c]).row_broadcast(hw);
    normed.mul(gain).add(bias).reshape(&shape)
}

pub fn synthesis_forward<'g>(p: &Bound<'g>, arch: &ArchConfig, ws: &[Var<'g>]) -> Var<'g> {
    let graph: &'g Graph = ws[0].graph();
    let n = ws[0].shape()[0];
    let cst = p.get("const");
    let cshape = cst.shape();
    let ones = graph.constant(Tensor::full(&[n, 1], 1.0));
    let flat = cst.reshape(&[1, cshape.iter().product()]);
    let mut x = ones
        .matmul(flat)
        .reshape(&[n, cshape[0], cshape[1], cshape[2]]);
    for (i, w) in ws.iter().enumerate() {
        if arch.synth_upsample[i] {
            x = x.upsample2();
        }
        x = x
            .conv2d(p.get(&format!("block{i}.conv.weight")), SAME)
            .add_bias(p.get(&format!("block{i}.conv.bias")))
            .leaky_relu(LRELU_SLOPE);
        let scale = w.linear(
            p.get(&format!("block{i}.scale.weight")),
            p.get(&format!("block{i}.scale.bias")),
        );
        let shift = w.linear(
            p.get(&format!("block{i}.shift.weight")),
            p.get(&format!("block{i}.shift.bias")),
        );
        x = adain_feature_map(x, scale, shift);
    }
    x.conv2d(p.get("to_rgb.weight"), POINTWISE)
        .add_bias(p.get("to_rgb.bias"))
        .tanh()
}

/// Pre-sigmoid logits, shape `[N]`.
pub fn discriminator_forward<'g>(p: &Bound<'g>, arch: &ArchConfig, x: Var<'g>) -> Var<'g> {
    let n = x.shape()[0];
    let mut h = x;
    for i in 0..arch.disc_channels.len() {
        h = h
            .conv2d(p.get(&format!("block{i}.weight")), DOWN)
            .add_bias(p.get(&format!("block{i}.bias")))
            .leaky_relu(LRELU_SLOPE);
    }
    let feat: usize = h.shape()[1..].iter().product();
    h.reshape(&[n, feat])
        .linear(p.get("head.weight"), p.get("head.bias"))
        .reshape(&[n])
}

// ---------------------------------------------------------------------------
// checked tensor wrappers

pub fn map_latent(params: &ParamCollection, arch: &ArchConfig, z: &Tensor) -> Result<StyleLatentStack> {
    ensure!(
        z.shape().len() == 2 && z.shape()[1] == arch.z_dim,
        Config,
        "latent batch must be [N, {}], got {:?}",
        arch.z_dim,
        z.shape()
    );
    ensure!(z.all_finite(), InvalidInput, "latent code has non-finite entries");
    let g = Graph::new();
    let p = params.bind(&g, false);
    let ws = mapping_forward(&p, arch, g.constant(z.clone()));
    Ok(StyleLatentStack {
        layers: ws.iter().map(|w| (*w.value()).clone()).collect(),
    })
}

pub fn check_stack(arch: &ArchConfig, w: &StyleLatentStack) -> Result<()> {
    ensure!(
        w.num_layers() == arch.num_layers(),
        Config,
        "expected {} latent layers, got {}",
        arch.num_layers(),
        w.num_layers()
    );
    let n = w.batch();
    for (i, l) in w.layers.iter().enumerate() {
        ensure!(
            l.shape() == [n, arch.w_dim],
            Config,
            "latent layer {i} has shape {:?}, expected [{n}, {}]",
            l.shape(),
            arch.w_dim
        );
    }
    Ok(())
}

pub fn synthesize(params: &ParamCollection, arch: &ArchConfig, w: &StyleLatentStack) -> Result<Tensor> {
    check_stack(arch, w)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let ws: Vec<Var> = w.layers.iter().map(|l| g.constant(l.clone())).collect();
    Ok((*synthesis_forward(&p, arch, &ws).value()).clone())
}

pub fn check_images(arch: &ArchConfig, x: &Tensor) -> Result<()> {
    let s = arch.image_size();
    ensure!(
        x.shape().len() == 4 && x.shape()[1..] == [arch.image_channels, s, s],
        InvalidInput,
        "image batch must be [N, {}, {s}, {s}], got {:?}",
        arch.image_channels,
        x.shape()
    );
    Ok(())
}

pub fn discriminate(params: &ParamCollection, arch: &ArchConfig, x: &Tensor) -> Result<Tensor> {
    check_images(arch, x)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    Ok((*discriminator_forward(&p, arch, g.constant(x.clone())).value()).clone())
}

/// Convenience: `synthesize(map_latent(z))`.
pub fn generate(bundle: &ModelBundle, arch: &ArchConfig, z: &Tensor) -> Result<Tensor> {
    let w = map_latent(&bundle.mapping, arch, z)?;
    synthesize(&bundle.synthesis, arch, &w)
}
