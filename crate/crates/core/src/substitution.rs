//! Frozen semantic encoder, style/content decoupler and reconstruction modulator.
//!
//! The encoder stands in for a large pretrained image encoder: a randomly initialised
//! conv net with a fixed seed whose parameters never receive gradients. Anything
//! implementing [`FeatureEncoder`] can replace it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::injection::{adain, adain_rows};
use crate::nets::{ArchConfig, INIT_STD, LRELU_SLOPE};
use crate::params::{Bound, Init, ModelBundle, ParamCollection};
use crate::tensor::{ConvGeom, Tensor};

/// Norm floor for L2-normalising decoupled features.
pub const NORM_EPS: f64 = 1e-12;
/// |cos(S, C)| above this logs a warning.
pub const COLLINEAR_WARN: f64 = 0.99;
/// |cos(S, C)| at or above this aborts training.
pub const COLLINEAR_FAIL: f64 = 0.999;

/// A frozen image encoder exposing intermediate feature maps ("taps").
pub trait FeatureEncoder {
    fn id(&self) -> &str;

    /// Feature maps after each block, shallowest first. The last one is the semantic
    /// feature map handed to the decoupler.
    fn taps<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Vec<Var<'g>>;

    /// Shape `[C, H, W]` of the last tap for a square input of side `image_size`.
    fn output_shape(&self, image_size: usize) -> [usize; 3];

    /// Optional per-layer, per-channel weights for perceptual distances.
    fn layer_weights(&self) -> Option<&[Vec<f64>]> {
        None
    }

    /// Fingerprint of the frozen parameters.
    fn checksum(&self) -> u64;

    fn encode_var<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Var<'g> {
        *self.taps(graph, x).last().expect("encoder has at least one tap")
    }

    /// Tensor-level forward returning every tap.
    fn tap_tensors(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        ensure!(x.shape().len() == 4, InvalidInput, "encoder input must be NCHW, got {:?}", x.shape());
        let g = Graph::new();
        Ok(self
            .taps(&g, g.constant(x.clone()))
            .iter()
            .map(|v| (*v.value()).clone())
            .collect())
    }

    /// Concatenated spatial means of all taps, `[N, Σ C_l]`.
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let taps = self.tap_tensors(x)?;
        let n = x.shape()[0];
        let width: usize = taps.iter().map(|t| t.shape()[1]).sum();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for t in &taps {
                let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
                let sample = &t.data()[i * c * hw..(i + 1) * c * hw];
                out.extend(sample.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64));
            }
        }
        Tensor::new(vec![n, width], out)
    }
}

#[derive(Clone, Debug)]
struct EncoderSpec {
    channels: &'static [usize],
    strides: &'static [usize],
    seed: u64,
}

fn encoder_spec(id: &str) -> Result<EncoderSpec> {
    match id {
        "frozen-conv-v1" => Ok(EncoderSpec {
            channels: &[16, 32, 32],
            strides: &[2, 2, 1],
            seed: 0x5EED_E1C0,
        }),
        "frozen-conv-micro" => Ok(EncoderSpec {
            channels: &[3, 4],
            strides: &[2, 1],
            seed: 0x5EED_0001,
        }),
        other => Err(Error::Config(format!(
            "unknown encoder `{other}` (known: frozen-conv-v1, frozen-conv-micro)"
        ))),
    }
}

/// Randomly initialised conv encoder (He-normal weights, fixed seed), frozen.
#[derive(Clone, Debug)]
pub struct FrozenConvEncoder {
    id: String,
    spec: EncoderSpec,
    params: ParamCollection,
}

impl FrozenConvEncoder {
    pub fn new(id: &str, in_channels: usize) -> Result<Self> {
        let spec = encoder_spec(id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut init = Init::new(&mut rng);
        let mut params = ParamCollection::new(false);
        let mut cin = in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("block{i}.weight"), init.normal(&[c, cin, 3, 3], std));
            params.insert(format!("block{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        Ok(FrozenConvEncoder {
            id: id.to_string(),
            spec,
            params,
        })
    }

    pub fn for_arch(arch: &ArchConfig) -> Result<Self> {
        FrozenConvEncoder::new(&arch.encoder, arch.image_channels)
    }

    pub fn params(&self) -> &ParamCollection {
        &self.params
    }
}

impl FeatureEncoder for FrozenConvEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn taps<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Vec<Var<'g>> {
        // bound untracked: the encoder never receives gradients, inputs still do
        let p = self.params.bind(graph, false);
        let mut h = x;
        let mut taps = Vec::with_capacity(self.spec.channels.len());
        for (i, &s) in self.spec.strides.iter().enumerate() {
            h = h
                .conv2d(p.get(&format!("block{i}.weight")), ConvGeom { stride: s, pad: 1 })
                .add_bias(p.get(&format!("block{i}.bias")))
                .leaky_relu(LRELU_SLOPE);
            taps.push(h);
        }
        taps
    }

    fn output_shape(&self, image_size: usize) -> [usize; 3] {
        let s = self
            .spec
            .strides
            .iter()
            .fold(image_size, |s, &st| ConvGeom { stride: st, pad: 1 }.out_size(s, 3));
        [*self.spec.channels.last().expect("non-empty"), s, s]
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// Decoupler weights: two stride-2 convs, then parallel style and content heads.
pub fn init_decoupler(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<ParamCollection> {
    let enc = FrozenConvEncoder::for_arch(arch)?;
    let [ce, h, _] = enc.output_shape(arch.image_size());
    let dc = arch.decoupler_channels;
    let down = ConvGeom { stride: 2, pad: 1 };
    let s = down.out_size(down.out_size(h, 3), 3);
    let flat = dc * s * s;
    let mut init = Init::new(rng);
    let mut p = ParamCollection::new(true);
    p.insert("conv0.weight", init.normal(&[dc, ce, 3, 3], INIT_STD));
    p.insert("conv0.bias", Tensor::zeros(&[dc]));
    p.insert("conv1.weight", init.normal(&[dc, dc, 3, 3], INIT_STD));
    p.insert("conv1.bias", Tensor::zeros(&[dc]));
    for head in ["style", "content"] {
        p.insert(format!("{head}.weight"), init.normal(&[flat, arch.feature_dim], INIT_STD));
        p.insert(format!("{head}.bias"), Tensor::zeros(&[arch.feature_dim]));
    }
    Ok(p)
}

/// `(style [N, d_f], content [N, d_f])`, both rows unit-norm.
pub fn decouple_var<'g>(p: &Bound<'g>, f: Var<'g>) -> (Var<'g>, Var<'g>) {
    let down = ConvGeom { stride: 2, pad: 1 };
    let n = f.shape()[0];
    let h = f
        .conv2d(p.get("conv0.weight"), down)
        .add_bias(p.get("conv0.bias"))
        .leaky_relu(LRELU_SLOPE)
        .conv2d(p.get("conv1.weight"), down)
        .add_bias(p.get("conv1.bias"));
    let flat: usize = h.shape()[1..].iter().product();
    let h = h.reshape(&[n, flat]);
    let style = h
        .linear(p.get("style.weight"), p.get("style.bias"))
        .row_normalize(NORM_EPS);
    let content = h
        .linear(p.get("content.weight"), p.get("content.bias"))
        .row_normalize(NORM_EPS);
    (style, content)
}

/// Reconstruction modulator: AdaIN of content rows onto style rows.
pub fn modulate_var<'g>(content: Var<'g>, style: Var<'g>) -> Var<'g> {
    adain_rows(content, style)
}

/// Single-vector modulator; literally [`adain`].
pub fn modulate(content: &[f64], style: &[f64]) -> Result<Vec<f64>> {
    adain(content, style)
}

pub fn encode(encoder: &dyn FeatureEncoder, x: &Tensor) -> Result<Tensor> {
    Ok(encoder.tap_tensors(x)?.pop().expect("at least one tap"))
}

pub fn decouple(params: &ParamCollection, f: &Tensor) -> Result<(Tensor, Tensor)> {
    ensure!(f.shape().len() == 4, InvalidInput, "feature map must be NCHW, got {:?}", f.shape());
    ensure!(f.all_finite(), InvalidInput, "feature map has non-finite entries");
    let expected = params.get("conv0.weight").map(|w| w.shape()[1]);
    ensure!(
        expected == Some(f.shape()[1]),
        InvalidInput,
        "feature map has {} channels, decoupler expects {:?}",
        f.shape()[1],
        expected
    );
    let g = Graph::new();
    let p = params.bind(&g, false);
    let (s, c) = decouple_var(&p, g.constant(f.clone()));
    Ok(((*s.value()).clone(), (*c.value()).clone()))
}

/// Decoupled and remodulated features for source-generated (`S`), target-generated
/// (`T`) and raw training (`R`) batches.
pub struct SubstitutionVars<'g> {
    pub s_s: Var<'g>,
    pub c_s: Var<'g>,
    pub s_t: Var<'g>,
    pub c_t: Var<'g>,
    pub s_r: Var<'g>,
    pub c_r: Var<'g>,
    pub m_cs_sr: Var<'g>,
    pub m_ct_sr: Var<'g>,
    pub m_cs_st: Var<'g>,
}

pub fn substitution_vars<'g>(
    graph: &'g Graph,
    encoder: &dyn FeatureEncoder,
    decoupler: &Bound<'g>,
    x_s: Var<'g>,
    x_t: Var<'g>,
    x_r: Var<'g>,
) -> SubstitutionVars<'g> {
    let (s_s, c_s) = decouple_var(decoupler, encoder.encode_var(graph, x_s));
    let (s_t, c_t) = decouple_var(decoupler, encoder.encode_var(graph, x_t));
    let (s_r, c_r) = decouple_var(decoupler, encoder.encode_var(graph, x_r));
    SubstitutionVars {
        s_s,
        c_s,
        s_t,
        c_t,
        s_r,
        c_r,
        m_cs_sr: modulate_var(c_s, s_r),
        m_ct_sr: modulate_var(c_t, s_r),
        m_cs_st: modulate_var(c_s, s_t),
    }
}

/// Tensor-valued counterpart of [`SubstitutionVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubstitutionFeatures {
    pub s_s: Tensor,
    pub c_s: Tensor,
    pub s_t: Tensor,
    pub c_t: Tensor,
    pub s_r: Tensor,
    pub c_r: Tensor,
    pub m_cs_sr: Tensor,
    pub m_ct_sr: Tensor,
    pub m_cs_st: Tensor,
}

pub fn substitution_pass(
    x_s: &Tensor,
    x_t: &Tensor,
    x_r: &Tensor,
    encoder: &dyn FeatureEncoder,
    bundle: &ModelBundle,
) -> Result<SubstitutionFeatures> {
    ensure!(
        x_s.shape() == x_t.shape() && x_t.shape() == x_r.shape(),
        InvalidInput,
        "substitution batches must match: {:?}, {:?}, {:?}",
        x_s.shape(),
        x_t.shape(),
        x_r.shape()
    );
    ensure!(x_s.shape().len() == 4, InvalidInput, "expected NCHW image batches");
    let g = Graph::new();
    let p = bundle.decoupler.bind(&g, false);
    let v = substitution_vars(
        &g,
        encoder,
        &p,
        g.constant(x_s.clone()),
        g.constant(x_t.clone()),
        g.constant(x_r.clone()),
    );
    let t = |v: Var| (*v.value()).clone();
    Ok(SubstitutionFeatures {
        s_s: t(v.s_s),
        c_s: t(v.c_s),
        s_t: t(v.s_t),
        c_t: t(v.c_t),
        s_r: t(v.s_r),
        c_r: t(v.c_r),
        m_cs_sr: t(v.m_cs_sr),
        m_ct_sr: t(v.m_ct_sr),
        m_cs_st: t(v.m_cs_st),
    })
}

/// Largest |cos| between paired rows of two `[N, D]` matrices.
pub fn max_abs_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.shape()[1];
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            (dot / (nx * ny)).abs()
        })
        .fold(0.0, f64::max)
}

/// Applies the non-collinearity contract to one batch of decoupled features.
pub fn check_collinearity(style: &Tensor, content: &Tensor, context: &str) -> Result<f64> {
    let c = max_abs_cosine(style, content);
    if c >= COLLINEAR_FAIL {
        return Err(Error::Numerical(format!(
            "{context}: style and content features collapsed (|cos| = {c:.6})"
        )));
    }
    if c >= COLLINEAR_WARN {
        log::warn!("{context}: style/content features nearly collinear (|cos| = {c:.6})");
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::stats;
    use rand_distr::{Distribution, Uniform};

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-1.0, 1.0).unwrap();
        Tensor::new(vec![n, 3, 32, 32], (0..n * 3 * 1024).map(|_| u.sample(&mut rng)).collect()).unwrap()
    }

    fn setup() -> (ArchConfig, ModelBundle, FrozenConvEncoder) {
        let arch = ArchConfig::default();
        let b = ModelBundle::init(&arch, 0).unwrap();
        let e = FrozenConvEncoder::for_arch(&arch).unwrap();
        (arch, b, e)
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (_, _, e) = setup();
        let x = random_images(2, 1);
        let f1 = encode(&e, &x).unwrap();
        assert_eq!(f1.shape(), &[2, 32, 8, 8]);
        assert_eq!(e.output_shape(32), [32, 8, 8]);
        assert_eq!(f1, encode(&e, &x).unwrap());
        assert!(encode(&e, &Tensor::zeros(&[3, 32, 32])).is_err());
        assert!(FrozenConvEncoder::new("clip-vit", 3).is_err());
    }

    #[test]
    fn decoupled_features_are_unit_and_independent() {
        let (_, b, e) = setup();
        let x = random_images(100, 2);
        let f = encode(&e, &x).unwrap();
        let (s, c) = decouple(&b.decoupler, &f).unwrap();
        assert_eq!(s.shape(), &[100, 64]);
        for row in s.data().chunks(64).chain(c.data().chunks(64)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert!(max_abs_cosine(&s, &c) < 0.99);
        assert_eq!((s.clone(), c.clone()), decouple(&b.decoupler, &f).unwrap());
    }

    #[test]
    fn zero_feature_map_stays_finite() {
        let (_, b, _) = setup();
        let f = Tensor::zeros(&[1, 32, 8, 8]);
        let (s, c) = decouple(&b.decoupler, &f).unwrap();
        assert!(s.data().iter().chain(c.data()).all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn modulate_properties() {
        let c: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0).collect();
        let s: Vec<f64> = (0..64).map(|i| ((i * 5 % 11) as f64 - 3.0) / 7.0).collect();
        let same = modulate(&c, &c).unwrap();
        assert!(same.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-6));
        let m = modulate(&c, &s).unwrap();
        let (ms, ss) = (stats(&m).unwrap(), stats(&s).unwrap());
        assert!((ms.mean - ss.mean).abs() < 1e-5 && (ms.std - ss.std).abs() < 1e-5);
        let shifted: Vec<f64> = c.iter().map(|v| v + 3.0).collect();
        let m2 = modulate(&shifted, &s).unwrap();
        assert!(m.iter().zip(&m2).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(m, adain(&c, &s).unwrap());
        assert!(modulate(&c, &s[..10]).is_err());
    }

    #[test]
    fn substitution_pass_identical_inputs() {
        let (_, b, e) = setup();
        let x = random_images(2, 3);
        let f = substitution_pass(&x, &x, &x, &e, &b).unwrap();
        assert!(f.m_cs_sr.max_abs_diff(&f.m_ct_sr) < 1e-6);
        assert!(f.m_cs_sr.max_abs_diff(&f.m_cs_st) < 1e-6);
        assert_eq!(f, substitution_pass(&x, &x, &x, &e, &b).unwrap());
    }

    #[test]
    fn substitution_synth_feature_takes_target_style_stats() {
        let (_, b, e) = setup();
        let (xs, xt, xr) = (random_images(3, 4), random_images(3, 5), random_images(3, 6));
        let f = substitution_pass(&xs, &xt, &xr, &e, &b).unwrap();
        for (m, s) in f.m_cs_st.data().chunks(64).zip(f.s_t.data().chunks(64)) {
            let (a, t) = (stats(m).unwrap(), stats(s).unwrap());
            assert!((a.mean - t.mean).abs() < 1e-5 && (a.std - t.std).abs() < 1e-5);
        }
        let short = random_images(2, 7);
        assert!(substitution_pass(&xs, &xt, &short, &e, &b).is_err());
    }

    #[test]
    fn collinearity_thresholds() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1.0, 1e-4]).unwrap();
        assert!(check_collinearity(&a, &b, "test").is_err());
        let c = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(check_collinearity(&a, &c, "test").unwrap() < 1e-12);
    }
}
