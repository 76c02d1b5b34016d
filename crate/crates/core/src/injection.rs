//! Latent statistics, AdaIN alignment and the α-blended identity injection applied to
//! every W+ layer: `w'_T = (1 − α)·w_T + α·adain(w_T, w_S)`.
//!
//! Mean and std are taken per latent vector over its `d_w` entries, with population
//! variance and the std floored at [`STD_EPS`]. The tensor-level functions run the same
//! graph code as training, so they are bit-identical to what the training step computes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nets::{StyleLatentStack, STD_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub alpha: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig { alpha: 0.5 }
    }
}

impl InjectionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&alpha),
            Config,
            "alpha must lie in [0, 1], got {alpha}"
        );
        Ok(InjectionConfig { alpha })
    }
}

/// Row-wise `(mean [R], std [R])` of an `[R, D]` matrix.
pub fn row_stats<'g>(x: Var<'g>) -> (Var<'g>, Var<'g>) {
    let d = x.shape()[1];
    let mean = x.row_mean();
    let var = x.sub(mean.row_broadcast(d)).square().row_mean();
    (mean, var.floor_at(STD_EPS * STD_EPS).sqrt())
}

/// Row-wise AdaIN: re-standardise each content row, then give it the style row's
/// mean and std.
pub fn adain_rows<'g>(content: Var<'g>, style: Var<'g>) -> Var<'g> {
    let d = content.shape()[1];
    let (mc, sc) = row_stats(content);
    let (ms, ss) = row_stats(style);
    content
        .sub(mc.row_broadcast(d))
        .mul(sc.recip().row_broadcast(d))
        .mul(ss.row_broadcast(d))
        .add(ms.row_broadcast(d))
}

/// Identity injection over all layers of a stack.
pub fn inject_layers<'g>(target: &[Var<'g>], source: &[Var<'g>], alpha: f64) -> Vec<Var<'g>> {
    target
        .iter()
        .zip(source)
        .map(|(&wt, &ws)| wt.scale(1.0 - alpha).add(adain_rows(wt, ws).scale(alpha)))
        .collect()
}

fn as_row(v: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, v.len()], v.to_vec())
}

pub fn stats(v: &[f64]) -> Result<ChannelStats> {
    ensure!(v.len() >= 2, InvalidInput, "stats needs at least 2 entries, got {}", v.len());
    let g = Graph::new();
    let (m, s) = row_stats(g.constant(as_row(v)));
    Ok(ChannelStats {
        mean: m.value().item(),
        std: s.value().item(),
    })
}

pub fn adain(content: &[f64], style: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        content.len() == style.len(),
        InvalidInput,
        "adain length mismatch: {} vs {}",
        content.len(),
        style.len()
    );
    ensure!(content.len() >= 2, InvalidInput, "adain needs at least 2 entries");
    let g = Graph::new();
    let out = adain_rows(g.constant(as_row(content)), g.constant(as_row(style)));
    Ok(out.value().data().to_vec())
}

pub fn inject(
    target: &StyleLatentStack,
    source: &StyleLatentStack,
    cfg: InjectionConfig,
) -> Result<StyleLatentStack> {
    ensure!(
        (0.0..=1.0).contains(&cfg.alpha),
        InvalidInput,
        "alpha must lie in [0, 1], got {}",
        cfg.alpha
    );
    ensure!(
        target.num_layers() == source.num_layers(),
        InvalidInput,
        "layer count mismatch: {} vs {}",
        target.num_layers(),
        source.num_layers()
    );
    for (a, b) in target.layers.iter().zip(&source.layers) {
        ensure!(
            a.shape() == b.shape() && a.shape().len() == 2,
            InvalidInput,
            "latent layer shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        ensure!(a.shape()[1] >= 2, InvalidInput, "latent width must be at least 2");
    }
    let g = Graph::new();
    let wt: Vec<Var> = target.layers.iter().map(|t| g.constant(t.clone())).collect();
    let ws: Vec<Var> = source.layers.iter().map(|t| g.constant(t.clone())).collect();
    Ok(StyleLatentStack {
        layers: inject_layers(&wt, &ws, cfg.alpha)
            .iter()
            .map(|v| (*v.value()).clone())
            .collect(),
    })
}

/// Largest per-row |Δmean| and |Δstd| between two equally shaped stacks.
pub fn max_stats_deviation(a: &StyleLatentStack, b: &StyleLatentStack) -> Result<(f64, f64)> {
    let mut dm: f64 = 0.0;
    let mut ds: f64 = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        let d = la.shape()[1];
        for (ra, rb) in la.data().chunks(d).zip(lb.data().chunks(d)) {
            let (sa, sb) = (stats(ra)?, stats(rb)?);
            dm = dm.max((sa.mean - sb.mean).abs());
            ds = ds.max((sa.std - sb.std).abs());
        }
    }
    Ok((dm, ds))
}
