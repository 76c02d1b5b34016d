//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only ever evaluates the forward value of the probe, so it is independent
//! of the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Result of one gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
}

/// Relative error with a small absolute floor so exactly-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `d probe / d inputs` against central differences on up to `max_per_input`
/// randomly chosen entries of every input.
pub fn check<F>(inputs: &[Tensor], max_per_input: usize, seed: u64, probe: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let y = probe(&graph, &vars);
    let grads: Vec<Tensor> = graph
        .grad(y, &vars)
        .iter()
        .map(|g| (*g.value()).clone())
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        // params, not constants: probes may take inner gradients themselves
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        probe(&g, &vs).value().item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_analytic: 0.0,
    };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let picks = sample(&mut rng, input.len(), max_per_input.min(input.len()));
        for idx in picks.iter() {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&work);
            work[k].data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&work);
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads[k].data()[idx];
            out.checked += 1;
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic, numeric));
            out.max_abs_analytic = out.max_abs_analytic.max(analytic.abs());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeom;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_ops() {
        let x = rand_tensor(&[3, 4], 1);
        let y = rand_tensor(&[3, 4], 2).map(|v| v.abs() + 0.5);
        let r = check(&[x, y], 12, 0, |_, v| {
            v[0].tanh()
                .mul(v[1].sqrt())
                .add(v[0].softplus())
                .sub(v[0].sigmoid().div(v[1]))
                .add(v[0].scale(3.0).huber())
                .sum()
        });
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn matmul_and_rows() {
        let a = rand_tensor(&[3, 5], 3);
        let b = rand_tensor(&[5, 4], 4);
        let bias = rand_tensor(&[4], 5);
        let r = check(&[a, b, bias], 20, 1, |_, v| {
            let y = v[0].linear(v[1], v[2]);
            let m = y.row_mean().row_broadcast(4);
            y.sub(m).row_normalize(1e-12).mul(y).sum()
        });
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn conv_stack() {
        let x = rand_tensor(&[2, 2, 4, 4], 6);
        let w1 = rand_tensor(&[3, 2, 3, 3], 7);
        let b1 = rand_tensor(&[3], 8);
        let w2 = rand_tensor(&[2, 3, 3, 3], 9);
        let r = check(&[x, w1, b1, w2], 30, 2, |_, v| {
            let h = v[0]
                .conv2d(v[1], ConvGeom { stride: 1, pad: 1 })
                .add_bias(v[2])
                .tanh()
                .upsample2();
            h.conv2d(v[3], ConvGeom { stride: 2, pad: 1 }).square().sum()
        });
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn second_order_through_conv() {
        // probe = || d(sum tanh(conv(x, w))) / dx ||², differentiated w.r.t. w and x
        let x = rand_tensor(&[1, 2, 4, 4], 10);
        let w = rand_tensor(&[2, 2, 3, 3], 11).map(|v| v * 0.3);
        let r = check(&[x, w], 30, 3, |g, v| {
            let y = v[0].conv2d(v[1], ConvGeom { stride: 2, pad: 1 }).tanh().sum();
            let gx = g.grad(y, &[v[0]])[0];
            gx.square().sum()
        });
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}
