//! Identity-consistency losses, the adversarial losses and the total objective.
//!
//! * content loss: smooth-L1 between content features of source- and target-generated
//!   images paired by latent index;
//! * style loss: smooth-L1 between style features of target-generated images and raw
//!   training images;
//! * synthesis loss: `Σ (1 − cos)` over the three pairs of remodulated features;
//! * adversarial: non-saturating logistic loss, optional R1 penalty on real images.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nets::{discriminator_forward, ArchConfig};
use crate::params::{Bound, ParamCollection};
use crate::tensor::{softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub w_r: f64,
    pub w_cs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            w_r: 0.5,
            w_cs: 0.5,
        }
    }
}

impl LossWeights {
    /// Weights from λ and the synthesis share `w_r`; the content/style share is `1 − w_r`.
    pub fn new(lambda: f64, w_r: f64) -> Result<Self> {
        let w = LossWeights {
            lambda,
            w_r,
            w_cs: 1.0 - w_r,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be >= 0, got {}", self.lambda);
        ensure!((0.0..=1.0).contains(&self.w_r), Config, "loss_ratio_r must lie in [0, 1], got {}", self.w_r);
        ensure!((0.0..=1.0).contains(&self.w_cs), Config, "content/style share must lie in [0, 1]");
        ensure!((self.w_r + self.w_cs - 1.0).abs() < 1e-9, Config, "loss shares must sum to 1");
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.l_adv_d, self.l_adv_g, self.l_c, self.l_s, self.l_r, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// graph-level

pub fn smooth_l1_var<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    a.sub(b).huber().mean()
}

/// Cosine similarity of paired rows, `[N]`.
pub fn cosine_rows<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let dot = a.mul(b).row_sum();
    let na = a.square().row_sum().sqrt();
    let nb = b.square().row_sum().sqrt();
    dot.div(na.mul(nb))
}

pub fn synthesis_loss_var<'g>(m1: Var<'g>, m2: Var<'g>, m3: Var<'g>) -> Var<'g> {
    let term = |a: Var<'g>, b: Var<'g>| cosine_rows(a, b).neg().add_scalar(1.0).mean();
    term(m1, m2).add(term(m1, m3)).add(term(m2, m3))
}

pub fn d_loss_var<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Var<'g> {
    real_logits
        .neg()
        .softplus()
        .mean()
        .add(fake_logits.softplus().mean())
}

pub fn g_loss_var<'g>(fake_logits: Var<'g>) -> Var<'g> {
    fake_logits.neg().softplus().mean()
}

/// `(γ/2)·mean_n ‖∂D(x_n)/∂x_n‖²`. `x_real` must be tracked so its gradient exists;
/// the result stays differentiable in the discriminator parameters.
pub fn r1_penalty_var<'g>(
    graph: &'g Graph,
    disc: &Bound<'g>,
    arch: &ArchConfig,
    x_real: Var<'g>,
    gamma: f64,
) -> Var<'g> {
    let n = x_real.shape()[0] as f64;
    let logits = discriminator_forward(disc, arch, x_real);
    let gx = graph.grad(logits.sum(), &[x_real])[0];
    gx.square().sum().scale(0.5 * gamma / n)
}

pub fn total_loss_var<'g>(
    l_adv_g: Var<'g>,
    l_c: Var<'g>,
    l_s: Var<'g>,
    l_r: Var<'g>,
    w: &LossWeights,
) -> Var<'g> {
    l_adv_g.add(consistency_var(l_c, l_s, l_r, w))
}

/// The λ-weighted identity-consistency part of the objective.
pub fn consistency_var<'g>(l_c: Var<'g>, l_s: Var<'g>, l_r: Var<'g>, w: &LossWeights) -> Var<'g> {
    let cs = 2.0 * w.w_cs;
    l_c.scale(cs)
        .add(l_s.scale(cs))
        .add(l_r.scale(2.0 * w.w_r))
        .scale(w.lambda)
}

// ---------------------------------------------------------------------------
// tensor-level

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        InvalidInput,
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    ensure!(!a.is_empty(), InvalidInput, "{what}: empty input");
    Ok(())
}

pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "smooth_l1")?;
    let g = Graph::new();
    Ok(smooth_l1_var(g.constant(a.clone()), g.constant(b.clone())).value().item())
}

/// Content consistency between source- and target-generated content features.
pub fn content_loss(c_s: &Tensor, c_t: &Tensor) -> Result<f64> {
    same_shape(c_s, c_t, "content_loss")?;
    smooth_l1(c_s, c_t)
}

/// Style consistency between target-generated and raw-sample style features.
pub fn style_loss(s_t: &Tensor, s_r: &Tensor) -> Result<f64> {
    same_shape(s_t, s_r, "style_loss")?;
    smooth_l1(s_t, s_r)
}

fn check_rows_nonzero(m: &Tensor, what: &str) -> Result<()> {
    ensure!(m.shape().len() == 2, InvalidInput, "{what}: expected [N, D], got {:?}", m.shape());
    let d = m.shape()[1];
    for (i, row) in m.data().chunks(d).enumerate() {
        ensure!(
            row.iter().any(|&v| v != 0.0),
            InvalidInput,
            "{what}: row {i} has zero norm, cosine undefined"
        );
    }
    Ok(())
}

pub fn synthesis_loss(m1: &Tensor, m2: &Tensor, m3: &Tensor) -> Result<f64> {
    same_shape(m1, m2, "synthesis_loss")?;
    same_shape(m1, m3, "synthesis_loss")?;
    for (m, name) in [(m1, "M1"), (m2, "M2"), (m3, "M3")] {
        check_rows_nonzero(m, name)?;
    }
    let g = Graph::new();
    let v = synthesis_loss_var(
        g.constant(m1.clone()),
        g.constant(m2.clone()),
        g.constant(m3.clone()),
    );
    Ok(v.value().item())
}

/// `(loss_D, loss_G)` from precomputed logits, without R1.
pub fn adversarial_from_logits(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    ensure!(!real.is_empty() && !fake.is_empty(), InvalidInput, "empty logit batch");
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let ld = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    let lg = mean(fake, &|x| softplus(-x));
    Ok((ld, lg))
}

/// `(loss_D, loss_G)` for image batches; `r1_gamma > 0` adds the R1 penalty to loss_D.
pub fn adversarial_losses(
    disc: &ParamCollection,
    arch: &ArchConfig,
    x_real: &Tensor,
    x_fake: &Tensor,
    r1_gamma: f64,
) -> Result<(f64, f64)> {
    crate::nets::check_images(arch, x_real)?;
    crate::nets::check_images(arch, x_fake)?;
    let g = Graph::new();
    let p = disc.bind(&g, false);
    let real = g.param(x_real.clone());
    let fake = g.constant(x_fake.clone());
    let rl = discriminator_forward(&p, arch, real);
    let fl = discriminator_forward(&p, arch, fake);
    let mut ld = d_loss_var(rl, fl);
    if r1_gamma > 0.0 {
        ld = ld.add(r1_penalty_var(&g, &p, arch, real, r1_gamma));
    }
    Ok((ld.value().item(), g_loss_var(fl).value().item()))
}

pub fn total_loss(l_adv_g: f64, l_c: f64, l_s: f64, l_r: f64, w: &LossWeights) -> f64 {
    let cs = 2.0 * w.w_cs;
    l_adv_g + w.lambda * (cs * l_c + cs * l_s + 2.0 * w.w_r * l_r)
}
