//! Synthetic chest phantoms with a known location for the label signal.
//!
//! Every image shows two elliptical "lung" fields on a brighter torso. The
//! ground-truth lung mask is the union of the ellipses. Depending on the
//! mode, the label is carried by Gaussian opacities inside the lungs, by a
//! 6x6 intensity tag in the top-left corner (always outside the lungs), or
//! by both. Every random draw comes from a per-sample stream split by
//! purpose, so the anatomy, texture and noise of sample `i` do not depend on
//! its label.

use std::collections::BTreeMap;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{ClassLabel, ClassMode, Dataset, ImageSample};
use crate::attention::LungMask;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const TAG_ROWS: Range<usize> = 1..7;
pub const TAG_COLS: Range<usize> = 1..7;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomMode {
    SignalInLung,
    SignalOutLung,
    Mixed,
}

impl PhantomMode {
    fn in_lung(self) -> bool {
        matches!(self, PhantomMode::SignalInLung | PhantomMode::Mixed)
    }

    fn out_lung(self) -> bool {
        matches!(self, PhantomMode::SignalOutLung | PhantomMode::Mixed)
    }
}

impl FromStr for PhantomMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "signal_in_lung" | "in_lung" | "signalinlung" => Ok(PhantomMode::SignalInLung),
            "signal_out_lung" | "out_lung" | "signaloutlung" => Ok(PhantomMode::SignalOutLung),
            "mixed" => Ok(PhantomMode::Mixed),
            other => Err(Error::Config(format!("unknown phantom mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub n_samples: usize,
    pub side: usize,
    pub mode: PhantomMode,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Four-class phantoms give Indeterminate and Atypical the same
    /// generative signal, so they cannot be told apart.
    pub class_mode: ClassMode,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_samples: 400,
            side: 64,
            mode: PhantomMode::SignalInLung,
            noise_sigma: 8.0,
            seed: 0,
            class_mode: ClassMode::TwoClass,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 40 {
            return Err(Error::Config(format!("phantom needs >= 40 samples, got {}", self.n_samples)));
        }
        if self.side < 32 {
            return Err(Error::Config(format!("phantom side {} below 32", self.side)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn level(&self, r: f64, c: f64) -> f64 {
        ((r - self.cy) / self.ry).powi(2) + ((c - self.cx) / self.rx).powi(2)
    }
}

/// One generated image with everything needed to check it.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub sample: ImageSample,
    pub mask: LungMask,
    /// Centers of the label-carrying opacities.
    pub blob_centers: Vec<(usize, usize)>,
}

fn jitter(rng: &mut Rng, center: f64, spread: f64) -> f64 {
    center + rng.random_range(-spread..=spread)
}

struct Canvas {
    side: usize,
    values: Vec<f64>,
}

impl Canvas {
    fn add_blob(&mut self, mask: &LungMask, center: (f64, f64), sigma: f64, amp: f64) {
        let reach = (3.0 * sigma).ceil() as isize;
        let (cr, cc) = (center.0 as isize, center.1 as isize);
        for r in (cr - reach).max(0)..=(cr + reach).min(self.side as isize - 1) {
            for c in (cc - reach).max(0)..=(cc + reach).min(self.side as isize - 1) {
                let (r, c) = (r as usize, c as usize);
                if !mask.get(r, c) {
                    continue;
                }
                let d2 = (r as f64 + 0.5 - center.0).powi(2) + (c as f64 + 0.5 - center.1).powi(2);
                self.values[r * self.side + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

fn place_in(lung: &Ellipse, mask: &LungMask, rng: &mut Rng) -> Result<(f64, f64)> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let r = rng.random_range(lung.cy - lung.ry..lung.cy + lung.ry);
        let c = rng.random_range(lung.cx - lung.rx..lung.cx + lung.rx);
        if r < 0.0 || c < 0.0 {
            continue;
        }
        let (ri, ci) = (r as usize, c as usize);
        if ri < mask.rows() && ci < mask.cols() && mask.get(ri, ci) && lung.level(r, c) <= 0.6 {
            return Ok((r, c));
        }
    }
    Err(Error::Generation(format!(
        "no blob position found in {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn tag_intensity(label: ClassLabel) -> f64 {
    match label {
        ClassLabel::Negative => 40.0,
        ClassLabel::Typical => 220.0,
        ClassLabel::Indeterminate | ClassLabel::Atypical => 130.0,
    }
}

/// Render sample `index` with the given label.
pub fn render_sample(config: &PhantomConfig, index: usize, label: ClassLabel) -> Result<PhantomSample> {
    let side = config.side;
    let s = side as f64;
    let sample_seed = derive_seed(config.seed, &format!("phantom.sample.{index}"));
    let mut anatomy = rng_from_seed(derive_seed(sample_seed, "anatomy"));
    let mut content = rng_from_seed(derive_seed(sample_seed, "content"));
    let mut signal = rng_from_seed(derive_seed(sample_seed, "signal"));
    let mut noise_rng = rng_from_seed(derive_seed(sample_seed, "noise"));

    let mut lungs = [0.31, 0.69].map(|cx| Ellipse {
        cy: 0.0,
        cx,
        ry: 0.0,
        rx: 0.0,
    });
    for lung in &mut lungs {
        lung.cy = s * jitter(&mut anatomy, 0.54, 0.03);
        lung.cx = s * jitter(&mut anatomy, lung.cx, 0.02);
        lung.ry = s * jitter(&mut anatomy, 0.27, 0.02);
        lung.rx = s * jitter(&mut anatomy, 0.13, 0.01);
    }
    let mask: LungMask = Grid::from_fn(side, side, |r, c| {
        lungs
            .iter()
            .any(|l| l.level(r as f64 + 0.5, c as f64 + 0.5) <= 1.0)
    });
    if TAG_ROWS.clone().any(|r| TAG_COLS.clone().any(|c| mask.get(r, c))) {
        return Err(Error::Generation("corner tag overlaps a lung".into()));
    }

    let mut canvas = Canvas {
        side,
        values: (0..side * side)
            .map(|i| {
                let r = (i / side) as f64;
                if mask.data()[i] {
                    55.0
                } else {
                    120.0 + 20.0 * r / s
                }
            })
            .collect(),
    };

    // label-independent lung texture
    for _ in 0..4 {
        let lung = lungs[content.random_range(0..2)];
        let center = place_in(&lung, &mask, &mut content)?;
        let sigma = content.random_range(2.0..4.0);
        canvas.add_blob(&mask, center, sigma, 12.0);
    }
    if config.mode == PhantomMode::SignalOutLung {
        // opacities that look like signal but are drawn independently of the label
        for _ in 0..content.random_range(0..=3) {
            let lung = lungs[content.random_range(0..2)];
            let center = place_in(&lung, &mask, &mut content)?;
            let sigma = content.random_range(2.0..3.5);
            let amp = content.random_range(60.0..90.0);
            canvas.add_blob(&mask, center, sigma, amp);
        }
    }

    let mut blob_centers = Vec::new();
    if config.mode.in_lung() {
        let which: Vec<usize> = match label {
            ClassLabel::Negative => Vec::new(),
            ClassLabel::Typical => vec![0, 1, signal.random_range(0..2)],
            ClassLabel::Indeterminate | ClassLabel::Atypical => {
                let side = signal.random_range(0..2);
                vec![side, side]
            }
        };
        for li in which {
            let center = place_in(&lungs[li], &mask, &mut signal)?;
            let sigma = signal.random_range(2.0..3.5);
            let amp = signal.random_range(60.0..90.0);
            canvas.add_blob(&mask, center, sigma, amp);
            blob_centers.push((center.0 as usize, center.1 as usize));
        }
    }
    if config.mode.out_lung() {
        let v = tag_intensity(label);
        for r in TAG_ROWS {
            for c in TAG_COLS {
                canvas.values[r * side + c] = v;
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let pixels: Vec<u8> = canvas
        .values
        .iter()
        .map(|&v| {
            let n = if config.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(PhantomSample {
        sample: ImageSample::new(
            format!("phantom_{index:05}"),
            Grid::from_vec(side, side, pixels)?,
            Some(label),
        )?,
        mask,
        blob_centers,
    })
}

/// Labels cycle through the active classes, so the classes are balanced.
pub fn phantom_samples(config: &PhantomConfig) -> Result<Vec<PhantomSample>> {
    config.validate()?;
    let classes = config.class_mode.classes();
    (0..config.n_samples)
        .map(|i| render_sample(config, i, classes[i % classes.len()]))
        .collect()
}

pub fn gen_phantom(config: &PhantomConfig) -> Result<(Dataset, BTreeMap<String, LungMask>)> {
    let samples = phantom_samples(config)?;
    let masks = samples
        .iter()
        .map(|p| (p.sample.id.clone(), p.mask.clone()))
        .collect();
    Ok((Dataset::new(samples.into_iter().map(|p| p.sample).collect()), masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: PhantomMode) -> PhantomConfig {
        PhantomConfig {
            n_samples: 40,
            mode,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn in_lung_blobs_are_centered_inside_the_mask() {
        let samples = phantom_samples(&cfg(PhantomMode::SignalInLung)).unwrap();
        for p in &samples {
            match p.sample.label {
                Some(ClassLabel::Typical) => {
                    assert_eq!(p.blob_centers.len(), 3);
                    for &(r, c) in &p.blob_centers {
                        assert!(p.mask.get(r, c));
                    }
                }
                _ => assert!(p.blob_centers.is_empty()),
            }
        }
    }

    #[test]
    fn out_lung_lung_pixels_do_not_depend_on_label() {
        let c = cfg(PhantomMode::SignalOutLung);
        for i in 0..10 {
            let neg = render_sample(&c, i, ClassLabel::Negative).unwrap();
            let typ = render_sample(&c, i, ClassLabel::Typical).unwrap();
            assert_eq!(neg.mask, typ.mask);
            for (idx, &inside) in neg.mask.data().iter().enumerate() {
                if inside {
                    assert_eq!(neg.sample.pixels.data()[idx], typ.sample.pixels.data()[idx]);
                }
            }
            // and the tag differs
            assert_ne!(neg.sample.pixels.get(3, 3), typ.sample.pixels.get(3, 3));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_phantom(&cfg(PhantomMode::Mixed)).unwrap();
        let b = gen_phantom(&cfg(PhantomMode::Mixed)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_balanced() {
        let (ds, masks) = gen_phantom(&cfg(PhantomMode::SignalInLung)).unwrap();
        let typical = ds.labels().iter().filter(|&&l| l == ClassLabel::Typical).count();
        assert_eq!(typical, 20);
        assert_eq!(masks.len(), 40);
    }

    #[test]
    fn too_few_samples_rejected() {
        let c = PhantomConfig { n_samples: 39, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
