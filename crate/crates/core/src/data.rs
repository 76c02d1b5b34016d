//! Procedural image domains and the few-shot dataset container.
//!
//! The built-in "two-tone shapes" domain draws one filled shape (disc, square or
//! diamond) in one colour over a background of another. The shape's kind, position and
//! size play the role of identity; the colour pair is the domain style. The hue-shifted
//! variant keeps the geometry distribution and rotates both hues.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const SOURCE_DOMAIN: &str = "two-tone-shapes";
pub const TARGET_DOMAIN: &str = "two-tone-shapes-hue";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapesDomain {
    /// Added to both hues, in turns (1.0 = full circle).
    pub hue_shift: f64,
}

impl ShapesDomain {
    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            SOURCE_DOMAIN => Ok(ShapesDomain { hue_shift: 0.0 }),
            TARGET_DOMAIN => Ok(ShapesDomain { hue_shift: 0.33 }),
            other => Err(Error::Config(format!(
                "unknown domain `{other}` (known: {SOURCE_DOMAIN}, {TARGET_DOMAIN})"
            ))),
        }
    }

    /// One `[3, size, size]` image in `[-1, 1]`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, size: usize) -> Tensor {
        let kind = rng.random_range(0..3u8);
        let s = size as f64;
        let cx = rng.random_range(0.3..0.7) * s;
        let cy = rng.random_range(0.3..0.7) * s;
        let r = rng.random_range(0.15..0.3) * s;
        let bg = hsv_to_rgb(
            0.6 + self.hue_shift + rng.random_range(-0.04..0.04),
            0.5,
            0.3 + rng.random_range(0.0..0.1),
        );
        let fg = hsv_to_rgb(
            0.08 + self.hue_shift + rng.random_range(-0.04..0.04),
            0.85,
            0.9,
        );
        let mut data = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match kind {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    _ => dx.abs() + dy.abs() <= r * 1.2,
                };
                let c = if inside { fg } else { bg };
                for ch in 0..3 {
                    data[(ch * size + y) * size + x] = 2.0 * c[ch] - 1.0;
                }
            }
        }
        Tensor::from_parts(vec![3, size, size], data)
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
        let items: Vec<Tensor> = (0..n).map(|_| self.sample(rng, size)).collect();
        Tensor::stack(&items).expect("equal shapes")
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// The handful of target-domain images adaptation sees.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub images: Vec<Tensor>,
    pub sources: Vec<String>,
}

impl FewShotDataset {
    pub fn new(images: Vec<Tensor>, sources: Vec<String>) -> Result<Self> {
        let d = FewShotDataset { images, sources };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.images.is_empty(), InvalidInput, "dataset is empty");
        ensure!(
            self.images.len() <= 1000,
            InvalidInput,
            "few-shot dataset too large ({} images, max 1000)",
            self.images.len()
        );
        ensure!(self.images.len() == self.sources.len(), InvalidInput, "one source label per image");
        let shape = self.images[0].shape();
        ensure!(shape.len() == 3, InvalidInput, "images must be CHW, got {:?}", shape);
        for (img, src) in self.images.iter().zip(&self.sources) {
            ensure!(img.shape() == shape, InvalidInput, "{src}: shape {:?} differs from {:?}", img.shape(), shape);
            ensure!(
                img.data().iter().all(|v| (-1.0..=1.0).contains(v)),
                InvalidInput,
                "{src}: pixel values outside [-1, 1]"
            );
        }
        Ok(())
    }

    /// `n` procedurally drawn images from a built-in domain.
    pub fn procedural(domain_id: &str, n: usize, seed: u64, size: usize) -> Result<Self> {
        let domain = ShapesDomain::by_id(domain_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n).map(|_| domain.sample(&mut rng, size)).collect();
        let sources = (0..n).map(|i| format!("{domain_id}#{i}")).collect();
        FewShotDataset::new(images, sources)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn as_batch(&self) -> Tensor {
        Tensor::stack(&self.images).expect("validated shapes")
    }

    /// Uniform draw with replacement.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let picks: Vec<Tensor> = (0..n)
            .map(|_| self.images[rng.random_range(0..self.images.len())].clone())
            .collect();
        Tensor::stack(&picks).expect("validated shapes")
    }
}
