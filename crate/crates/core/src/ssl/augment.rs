//! Grayscale augmentations for the contrastive tasks: random resized crop,
//! horizontal flip, brightness/contrast jitter and Gaussian blur.
//!
//! Quarter-turn rotations are deliberately absent: they would alias the
//! labels of the rotation task when tasks share a backbone.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, `[min, max]`.
    pub crop_area: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_area: (0.6, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.5),
        }
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn random_resized_crop(img: &Grid<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Grid<f32> {
    let (rows, cols) = img.shape();
    let area = uniform(rng, cfg.crop_area) * (rows * cols) as f64;
    let aspect = uniform(rng, (cfg.crop_aspect.0.ln(), cfg.crop_aspect.1.ln())).exp();
    let h = ((area / aspect).sqrt().round() as usize).clamp(1, rows);
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, cols);
    let r0 = rng.random_range(0..=rows - h);
    let c0 = rng.random_range(0..=cols - w);
    let crop = Grid::from_fn(h, w, |r, c| img.get(r0 + r, c0 + c));
    resize_bilinear(&crop, rows, cols)
}

pub fn hflip(img: &Grid<f32>) -> Grid<f32> {
    Grid::from_fn(img.rows(), img.cols(), |r, c| img.get(r, img.cols() - 1 - c))
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Grid<f32>, sigma: f64) -> Grid<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (rows, cols) = img.shape();
    let pass = |src: &Grid<f32>, horizontal: bool| {
        Grid::from_fn(rows, cols, |r, c| {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let d = i as isize - radius;
                let v = if horizontal {
                    src.get(r, (c as isize + d).clamp(0, cols as isize - 1) as usize)
                } else {
                    src.get((r as isize + d).clamp(0, rows as isize - 1) as usize, c)
                };
                acc += k * f64::from(v);
            }
            acc as f32
        })
    };
    pass(&pass(img, true), false)
}

pub fn augment_image(img: &Grid<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Grid<f32> {
    let mut out = random_resized_crop(img, cfg, rng);
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        out = hflip(&out);
    }
    let shift = uniform(rng, (-cfg.brightness, cfg.brightness)) as f32;
    let gain = uniform(rng, (1.0 - cfg.contrast, 1.0 + cfg.contrast)) as f32;
    let mean = out.data().iter().sum::<f32>() / out.data().len() as f32;
    out = out.map(|v| (mean + (v - mean) * gain + shift).clamp(0.0, 1.0));
    if rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        out = gaussian_blur(&out, uniform(rng, cfg.blur_sigma));
    }
    out
}

/// Augment every single-channel image of an `[N, 1, H, W]` batch.
pub fn augment_batch(images: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("augmentation needs [N, 1, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(images.len());
    for chunk in images.data().chunks(plane) {
        let img = Grid::from_vec(s[2], s[3], chunk.to_vec())?;
        data.extend(augment_image(&img, cfg, rng).into_data());
    }
    Tensor::from_vec(s, data)
}

/// Two independent augmentations of the same batch.
pub fn two_views(images: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    Ok((augment_batch(images, cfg, rng)?, augment_batch(images, cfg, rng)?))
}
