//! Helpers and independent oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use i2p::autodiff::Var;
use i2p::checkpoint::Checkpoint;
use i2p::consistency::{
    consistency_var, d_loss_var, g_loss_var, r1_penalty_var, smooth_l1_var, synthesis_loss_var, LossWeights,
};
use i2p::data::{FewShotDataset, TARGET_DOMAIN};
use i2p::gradcheck::{check, GradCheck};
use i2p::injection::{adain_rows, inject_layers};
use i2p::metrics::{lpips_distance, lpips_features, GaussianSummary};
use i2p::nets::{discriminator_forward, mapping_forward, synthesis_forward, ArchConfig};
use i2p::params::{Bound, ModelBundle, ParamCollection};
use i2p::substitution::{decouple_var, modulate_var, substitution_vars, FeatureEncoder, FrozenConvEncoder};
use i2p::training::{pretrain_source, AdaptConfig, Adapter, FineTuneState, PretrainConfig};
use i2p::Tensor;

/// Relative-error bound for every finite-difference comparison.
pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The collection's shapes filled with uniform values in `[-scale, scale]`, so that
/// activations sit well away from the leaky-ReLU kink.
fn randomized(coll: &ParamCollection, scale: f64, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tensor>) {
    coll.iter()
        .map(|(k, t)| (k.clone(), rand_tensor(t.shape(), scale, rng)))
        .unzip()
}

fn bound<'g>(names: &[String], vars: &[Var<'g>]) -> Bound<'g> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// `Σ c ⊙ v` with a fixed random `c`, a probe that sees every output entry.
fn weighted<'g>(v: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.mul_const(Rc::new(rand_tensor(&v.shape(), 1.0, &mut rng))).sum()
}

pub struct GradCase {
    pub name: &'static str,
    pub result: GradCheck,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.result.checked > 0 && self.result.max_abs_analytic > 0.0 && self.result.max_rel_err < GRAD_TOL
    }
}

const PER_INPUT: usize = 200;

/// Finite-difference checks of every differentiable operator on the micro config.
pub fn gradient_suite() -> Vec<GradCase> {
    let arch = ArchConfig::micro();
    let bundle = ModelBundle::init(&arch, 0).unwrap();
    let encoder = FrozenConvEncoder::for_arch(&arch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 2;
    let s = arch.image_size();
    let img = |rng: &mut ChaCha8Rng| rand_tensor(&[n, 3, s, s], 0.9, rng);
    let mut cases = Vec::new();
    let mut push = |name: &'static str, result: GradCheck| cases.push(GradCase { name, result });

    // mapping network: parameters and latent
    {
        let (names, mut inputs) = randomized(&bundle.mapping, 0.5, &mut rng);
        inputs.push(rand_tensor(&[n, arch.z_dim], 1.0, &mut rng));
        let k = names.len();
        let a = arch.clone();
        push(
            "mapping network",
            check(&inputs, PER_INPUT, 1, move |_, v| {
                let ws = mapping_forward(&bound(&names, &v[..k]), &a, v[k]);
                ws.iter()
                    .enumerate()
                    .fold(None, |acc: Option<Var>, (i, w)| {
                        let t = weighted(*w, 10 + i as u64);
                        Some(acc.map_or(t, |a| a.add(t)))
                    })
                    .unwrap()
            }),
        );
    }

    // synthesis network: parameters and every latent layer
    {
        let (names, mut inputs) = randomized(&bundle.synthesis, 0.5, &mut rng);
        for _ in 0..arch.num_layers() {
            inputs.push(rand_tensor(&[n, arch.w_dim], 1.0, &mut rng));
        }
        let k = names.len();
        let a = arch.clone();
        push(
            "synthesis network",
            check(&inputs, PER_INPUT, 2, move |_, v| {
                weighted(synthesis_forward(&bound(&names, &v[..k]), &a, &v[k..]), 20)
            }),
        );
    }

    // discriminator: parameters and pixels
    {
        let (names, mut inputs) = randomized(&bundle.discriminator, 0.5, &mut rng);
        inputs.push(img(&mut rng));
        let k = names.len();
        let a = arch.clone();
        push(
            "discriminator",
            check(&inputs, PER_INPUT, 3, move |_, v| {
                weighted(discriminator_forward(&bound(&names, &v[..k]), &a, v[k]), 30)
            }),
        );
    }

    // identity injection
    {
        let inputs = vec![
            rand_tensor(&[3, arch.w_dim], 1.0, &mut rng),
            rand_tensor(&[3, arch.w_dim], 1.0, &mut rng),
        ];
        push(
            "identity injection",
            check(&inputs, PER_INPUT, 4, |_, v| weighted(inject_layers(&[v[0]], &[v[1]], 0.3)[0], 40)),
        );
        push(
            "adain",
            check(&inputs, PER_INPUT, 5, |_, v| weighted(adain_rows(v[0], v[1]), 41)),
        );
    }

    // encoder (frozen, but pixel gradients feed the generator)
    {
        let enc = encoder.clone();
        push(
            "encoder (pixels)",
            check(&[img(&mut rng)], PER_INPUT, 6, move |g, v| {
                let taps = enc.taps(g, v[0]);
                taps.iter()
                    .enumerate()
                    .map(|(i, t)| weighted(*t, 60 + i as u64))
                    .reduce(|a, b| a.add(b))
                    .unwrap()
            }),
        );
    }

    // decoupler: parameters and feature map
    {
        let f_shape = encoder.output_shape(s);
        let (names, mut inputs) = randomized(&bundle.decoupler, 0.5, &mut rng);
        inputs.push(rand_tensor(&[n, f_shape[0], f_shape[1], f_shape[2]], 1.0, &mut rng));
        let k = names.len();
        push(
            "decoupler",
            check(&inputs, PER_INPUT, 7, move |_, v| {
                let (st, ct) = decouple_var(&bound(&names, &v[..k]), v[k]);
                weighted(st, 70).add(weighted(ct, 71))
            }),
        );
    }

    // reconstruction modulator
    {
        let inputs = vec![
            rand_tensor(&[3, arch.feature_dim], 1.0, &mut rng),
            rand_tensor(&[3, arch.feature_dim], 1.0, &mut rng),
        ];
        push(
            "modulator",
            check(&inputs, PER_INPUT, 8, |_, v| weighted(modulate_var(v[0], v[1]), 80)),
        );
    }

    // losses on their direct inputs
    {
        let pair = vec![rand_tensor(&[3, 6], 2.0, &mut rng), rand_tensor(&[3, 6], 2.0, &mut rng)];
        push("smooth-L1 loss", check(&pair, PER_INPUT, 9, |_, v| smooth_l1_var(v[0], v[1])));
        let triple = vec![
            rand_tensor(&[3, 6], 1.0, &mut rng),
            rand_tensor(&[3, 6], 1.0, &mut rng),
            rand_tensor(&[3, 6], 1.0, &mut rng),
        ];
        push(
            "synthesis loss",
            check(&triple, PER_INPUT, 10, |_, v| synthesis_loss_var(v[0], v[1], v[2])),
        );
        let logits = vec![rand_tensor(&[4], 3.0, &mut rng), rand_tensor(&[4], 3.0, &mut rng)];
        push(
            "discriminator loss",
            check(&logits, PER_INPUT, 11, |_, v| d_loss_var(v[0], v[1])),
        );
        push("generator loss", check(&logits[..1], PER_INPUT, 12, |_, v| g_loss_var(v[0])));
    }

    // R1 penalty (double backward) on discriminator parameters and real pixels
    {
        let (names, mut inputs) = randomized(&bundle.discriminator, 0.5, &mut rng);
        inputs.push(img(&mut rng));
        let k = names.len();
        let a = arch.clone();
        push(
            "R1 penalty",
            check(&inputs, PER_INPUT, 13, move |g, v| {
                r1_penalty_var(g, &bound(&names, &v[..k]), &a, v[k], 0.7)
            }),
        );
    }

    // identity-consistency losses end to end from pixels, through encoder and decoupler
    {
        let (names, mut inputs) = randomized(&bundle.decoupler, 0.5, &mut rng);
        for _ in 0..3 {
            inputs.push(img(&mut rng));
        }
        let k = names.len();
        let enc = encoder.clone();
        let w = LossWeights::new(1.3, 0.4).unwrap();
        push(
            "identity consistency (from pixels)",
            check(&inputs, PER_INPUT, 14, move |g, v| {
                let sub = substitution_vars(g, &enc, &bound(&names, &v[..k]), v[k], v[k + 1], v[k + 2]);
                let l_c = smooth_l1_var(sub.c_s, sub.c_t);
                let l_s = smooth_l1_var(sub.s_t, sub.s_r);
                let l_r = synthesis_loss_var(sub.m_cs_sr, sub.m_ct_sr, sub.m_cs_st);
                consistency_var(l_c, l_s, l_r, &w)
            }),
        );
    }

    // the whole generator objective, on the target mapping parameters
    {
        let (map_names, map_inputs) = randomized(&bundle.mapping, 0.5, &mut rng);
        let src = ModelBundle::init(&arch, 1).unwrap();
        let (syn_names, syn_vals) = randomized(&src.synthesis, 0.5, &mut rng);
        let (dec_names, dec_vals) = randomized(&src.decoupler, 0.5, &mut rng);
        let (dis_names, dis_vals) = randomized(&src.discriminator, 0.5, &mut rng);
        let (src_map_names, src_map_vals) = randomized(&src.mapping, 0.5, &mut rng);
        let z = rand_tensor(&[n, arch.z_dim], 1.0, &mut rng);
        let x_r = img(&mut rng);
        let k = map_names.len();
        let a = arch.clone();
        let enc = encoder.clone();
        let w = LossWeights::default();
        push(
            "generator objective (target mapping, end to end)",
            check(&map_inputs, PER_INPUT, 15, move |g, v| {
                let consts = |names: &[String], vals: &[Tensor]| {
                    let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
                    bound(names, &vars)
                };
                let zv = g.constant(z.clone());
                let w_s = mapping_forward(&consts(&src_map_names, &src_map_vals), &a, zv);
                let w_t = mapping_forward(&bound(&map_names, &v[..k]), &a, zv);
                let syn = consts(&syn_names, &syn_vals);
                let x_s = synthesis_forward(&syn, &a, &w_s);
                let x_t = synthesis_forward(&syn, &a, &inject_layers(&w_t, &w_s, 0.5));
                let adv = g_loss_var(discriminator_forward(&consts(&dis_names, &dis_vals), &a, x_t));
                let dec = consts(&dec_names, &dec_vals);
                let sub = substitution_vars(g, &enc, &dec, x_s, x_t, g.constant(x_r.clone()));
                let l_c = smooth_l1_var(sub.c_s, sub.c_t);
                let l_s = smooth_l1_var(sub.s_t, sub.s_r);
                let l_r = synthesis_loss_var(sub.m_cs_sr, sub.m_ct_sr, sub.m_cs_st);
                adv.add(consistency_var(l_c, l_s, l_r, &w))
            }),
        );
    }
    cases
}

// ---------------------------------------------------------------------------
// FID oracle

/// Square root of a matrix with positive real spectrum by the Denman–Beavers
/// iteration (no eigendecomposition).
pub fn denman_beavers_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = m.clone();
    let mut z = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        z = nz;
        if delta < 1e-15 * y.norm() {
            break;
        }
    }
    y
}

/// Textbook FID: `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`.
pub fn fid_oracle(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    let cross = denman_beavers_sqrt(&(&a.sigma * &b.sigma));
    (&a.mu - &b.mu).norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace()
}

/// A full-rank summary from `n` random `d`-dimensional samples.
pub fn random_summary(d: usize, n: usize, rng: &mut ChaCha8Rng) -> GaussianSummary {
    let shift: f64 = rng.random_range(-1.0..1.0);
    let x = rand_tensor(&[n, d], rng.random_range(0.5..2.0), rng).map(|v| v + shift);
    i2p::metrics::summarize(&x).unwrap()
}

pub fn shifted(a: &GaussianSummary, by: &DVector<f64>) -> GaussianSummary {
    GaussianSummary {
        mu: &a.mu + by,
        ..a.clone()
    }
}

// ---------------------------------------------------------------------------
// Intra-LPIPS oracle

/// Intra-LPIPS by enumerating every assignment of generated images to centers and
/// keeping the one with the smallest total distance (lowest index wins ties), then
/// averaging same-cluster pairs found by scanning all pairs.
pub fn intra_lpips_brute_force(generated: &[Tensor], centers: &[Tensor], encoder: &dyn FeatureEncoder) -> Option<f64> {
    let all: Vec<Tensor> = generated.iter().chain(centers).cloned().collect();
    let feats = lpips_features(&all, encoder).unwrap();
    let (g, c) = feats.split_at(generated.len());
    let dist = |i: usize, j: usize| lpips_distance(&g[i], &c[j], None);
    let (n, k) = (generated.len(), centers.len());
    let mut best: Option<(Vec<usize>, f64)> = None;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut rest = code;
        let mut assign = vec![0; n];
        for a in assign.iter_mut().rev() {
            *a = rest % k;
            rest /= k;
        }
        let cost: f64 = (0..n).map(|i| dist(i, assign[i])).sum();
        if best.as_ref().is_none_or(|(_, b)| cost < *b) {
            best = Some((assign, cost));
        }
    }
    let (assign, _) = best.unwrap();
    let mut means = Vec::new();
    for cluster in 0..k {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                if assign[i] == cluster && assign[j] == cluster {
                    sum += lpips_distance(&g[i], &g[j], None);
                    count += 1;
                }
            }
        }
        if count > 0 {
            means.push(sum / count as f64);
        }
    }
    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
}

/// Six generated images in two loose groups and two centers, at 8×8.
pub fn intra_lpips_fixture(seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = vec![rand_tensor(&[3, 8, 8], 0.9, &mut rng), rand_tensor(&[3, 8, 8], 0.9, &mut rng)];
    let generated = (0..6)
        .map(|i| {
            let noise = rand_tensor(&[3, 8, 8], 0.4, &mut rng);
            centers[i % 2].zip_map(&noise, |a, b| (a + b).clamp(-1.0, 1.0))
        })
        .collect();
    (generated, centers)
}

// ---------------------------------------------------------------------------
// training fixtures

pub fn micro_source(iterations: u64) -> Checkpoint {
    pretrain_source(
        &ArchConfig::micro(),
        &PretrainConfig {
            iterations,
            batch_size: 2,
            ..PretrainConfig::default()
        },
        |_, _, _| {},
    )
    .unwrap()
}

pub fn micro_data() -> FewShotDataset {
    FewShotDataset::procedural(TARGET_DOMAIN, 6, 3, ArchConfig::micro().image_size()).unwrap()
}

pub fn bitwise_equal(a: &ParamCollection, b: &ParamCollection) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((ka, ta), (kb, tb))| {
            ka == kb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Steps an α=0, λ=0 adapter and the plain fine-tuning baseline side by side and
/// returns the first step whose parameters differ in any bit (`None` if none do).
pub fn reduction_mismatch(source: &Checkpoint, data: &FewShotDataset, steps: u64, seed: u64) -> Option<u64> {
    let cfg = AdaptConfig {
        alpha: 0.0,
        lambda: 0.0,
        iterations: steps,
        seed,
        ..AdaptConfig::default()
    };
    let mut adapter = Adapter::new(source, cfg.clone()).unwrap();
    let mut baseline = FineTuneState::new(&source.manifest.arch, source.bundle().unwrap(), cfg.learning_rate, seed);
    let decoupler0 = adapter.state.target.decoupler.clone();
    for step in 1..=steps {
        adapter.step(data).unwrap();
        baseline
            .step(cfg.batch_size, cfg.r1_gamma, |rng| data.sample_batch(rng, cfg.batch_size))
            .unwrap();
        let t = &adapter.state.target;
        let b = &baseline.bundle;
        if !(bitwise_equal(&t.mapping, &b.mapping)
            && bitwise_equal(&t.synthesis, &b.synthesis)
            && bitwise_equal(&t.discriminator, &b.discriminator)
            && bitwise_equal(&t.decoupler, &decoupler0))
        {
            return Some(step);
        }
    }
    None
}
