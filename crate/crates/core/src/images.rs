//! Image files: few-shot dataset loading and lossless grid emission.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::data::FewShotDataset;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// `2·(v/255) − 1`.
pub fn normalize_u8(v: u8) -> f64 {
    2.0 * (v as f64 / 255.0) - 1.0
}

/// Inverse of [`normalize_u8`], clamped and rounded.
pub fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = normalize_u8(px[c]);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    ensure!(
        t.shape().len() == 3 && t.shape()[0] == 3,
        InvalidInput,
        "expected a [3, H, W] image, got {:?}",
        t.shape()
    );
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|c| quantize(d[(c * h + y) * w + x])))
    }))
}

fn center_square(img: RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == h {
        return img;
    }
    let s = w.min(h);
    image::imageops::crop_imm(&img, (w - s) / 2, (h - s) / 2, s, s).to_image()
}

/// Decodes every regular, non-hidden file of `dir` in lexicographic order,
/// center-crops to a square, resizes to `resolution` and scales to `[-1, 1]`.
pub fn load_dataset(dir: &Path, resolution: usize) -> Result<FewShotDataset> {
    ensure!(resolution >= 1, Config, "resolution must be >= 1");
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    ensure!(!files.is_empty(), InvalidInput, "{}: no image files", dir.display());

    let mut images = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for path in &files {
        match image::open(path) {
            Ok(img) => {
                let sq = center_square(img.to_rgb8());
                let r = resolution as u32;
                let sized = if sq.width() == r {
                    sq
                } else {
                    image::imageops::resize(&sq, r, r, FilterType::Triangle)
                };
                images.push(rgb_to_tensor(&sized));
            }
            Err(e) => failures.push(format!("  {}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!(
            "{} undecodable file(s) in {}:\n{}",
            failures.len(),
            dir.display(),
            failures.join("\n")
        )));
    }
    let sources = files.iter().map(|p| p.display().to_string()).collect();
    FewShotDataset::new(images, sources).map_err(|e| Error::Data(e.to_string()))
}

/// Images laid out row-major in a fixed number of columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub images: Vec<Tensor>,
    pub cols: usize,
    pub labels: Option<Vec<String>>,
}

impl ImageGrid {
    pub fn new(images: Vec<Tensor>, cols: usize, labels: Option<Vec<String>>) -> Result<Self> {
        ensure!(!images.is_empty(), InvalidInput, "grid needs at least one image");
        ensure!(cols >= 1, InvalidInput, "grid needs at least one column");
        let shape = images[0].shape();
        ensure!(
            images.iter().all(|i| i.shape() == shape),
            InvalidInput,
            "grid cells must share one resolution"
        );
        if let Some(l) = &labels {
            ensure!(l.len() == cols, InvalidInput, "{} labels for {cols} columns", l.len());
        }
        Ok(ImageGrid { images, cols, labels })
    }

    pub fn rows(&self) -> usize {
        self.images.len().div_ceil(self.cols)
    }

    pub fn to_rgb(&self) -> Result<RgbImage> {
        let (h, w) = (self.images[0].shape()[1], self.images[0].shape()[2]);
        let mut canvas = RgbImage::new((w * self.cols) as u32, (h * self.rows()) as u32);
        for (i, img) in self.images.iter().enumerate() {
            let cell = tensor_to_rgb(img)?;
            let (r, c) = (i / self.cols, i % self.cols);
            image::imageops::replace(&mut canvas, &cell, (c * w) as i64, (r * h) as i64);
        }
        Ok(canvas)
    }

    /// Writes a PNG and, when labelled, a `<name>.labels.txt` sidecar with one label
    /// per column.
    pub fn save(&self, path: &Path) -> Result<()> {
        let canvas = self.to_rgb()?;
        canvas
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::io(path, std::io::Error::other(other)),
            })?;
        if let Some(labels) = &self.labels {
            let side = label_path(path);
            std::fs::write(&side, labels.join("\n") + "\n").map_err(|e| Error::io(&side, e))?;
        }
        Ok(())
    }
}

pub fn label_path(grid: &Path) -> PathBuf {
    let mut name = grid.file_stem().unwrap_or_default().to_os_string();
    name.push(".labels.txt");
    grid.with_file_name(name)
}

pub fn emit_grid(images: &[Tensor], cols: usize, labels: Option<Vec<String>>, path: &Path) -> Result<()> {
    ImageGrid::new(images.to_vec(), cols, labels)?.save(path)
}

/// Splits a grid PNG back into `[3, cell, cell]` tensors, row-major.
pub fn read_grid(path: &Path, cell: usize) -> Result<Vec<Tensor>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let c = cell as u32;
    ensure!(
        c > 0 && img.width() % c == 0 && img.height() % c == 0,
        Data,
        "{}: {}x{} is not a grid of {cell}px cells",
        path.display(),
        img.width(),
        img.height()
    );
    let mut out = Vec::new();
    for r in 0..img.height() / c {
        for k in 0..img.width() / c {
            out.push(rgb_to_tensor(&image::imageops::crop_imm(&img, k * c, r * c, c, c).to_image()));
        }
    }
    Ok(out)
}

/// Writes each image as `<prefix>_<index>.png`.
pub fn save_images(images: &[Tensor], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let path = dir.join(format!("{prefix}_{i:04}.png"));
            tensor_to_rgb(t)?
                .save_with_format(&path, ImageFormat::Png)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            Ok(path)
        })
        .collect()
}
