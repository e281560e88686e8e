//! Relative patch location: the image is cut into a 3x3 grid of cells, the
//! network sees the centre patch and one neighbour and predicts which of
//! the 8 neighbours it was.
//!
//! Targets enumerate neighbours row-major, skipping the centre:
//! ```text
//! 0 1 2
//! 3 . 4
//! 5 6 7
//! ```

use rand::Rng as _;

use crate::backbone::{Backbone, Mode};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamSet;
use crate::rng::rng_from_seed;
use crate::ssl::{head_linear, head_linear_backward, LossOutput};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelLocConfig {
    /// Pixels removed from each cell so patches never touch.
    pub gap: usize,
    /// Maximum random offset of the neighbour patch, per axis.
    pub jitter: usize,
}

impl Default for RelLocConfig {
    fn default() -> Self {
        Self { gap: 2, jitter: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelLocBatch<T = f32> {
    /// `[N, C, P, P]`
    pub center_patches: Tensor<T>,
    pub neighbor_patches: Tensor<T>,
    pub targets: Vec<u8>,
}

impl RelLocBatch<f32> {
    pub fn cast<U: Scalar>(&self) -> RelLocBatch<U> {
        RelLocBatch {
            center_patches: self.center_patches.cast(),
            neighbor_patches: self.neighbor_patches.cast(),
            targets: self.targets.clone(),
        }
    }
}

const NEIGHBORS: [(usize, usize); 8] = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)];

/// Grid cell `(row, col)` of a neighbour target.
pub fn neighbor_cell(target: u8) -> (usize, usize) {
    NEIGHBORS[target as usize]
}

/// Target of a grid cell; `None` for the centre.
pub fn neighbor_target(cell: (usize, usize)) -> Option<u8> {
    NEIGHBORS.iter().position(|&c| c == cell).map(|i| i as u8)
}

/// `(cell side, patch side)` for a square image.
pub fn patch_geometry(side: usize, gap: usize) -> Result<(usize, usize)> {
    let cell = side / 3;
    if cell <= gap || cell - gap < 4 {
        return Err(Error::Shape(format!(
            "side {side} with gap {gap} leaves patches smaller than 4 pixels"
        )));
    }
    Ok((cell, cell - gap))
}

/// Top-left corner of the patch centred in `cell`, shifted by `offset` and
/// kept inside the image.
pub fn patch_origin(cell: (usize, usize), cell_side: usize, patch: usize, side: usize, offset: (isize, isize)) -> (usize, usize) {
    let place = |idx: usize, off: isize| {
        let base = (idx * cell_side + (cell_side - patch) / 2) as isize + off;
        base.clamp(0, (side - patch) as isize) as usize
    };
    (place(cell.0, offset.0), place(cell.1, offset.1))
}

fn crop(plane: &[f32], side: usize, origin: (usize, usize), patch: usize, out: &mut Vec<f32>) {
    for r in origin.0..origin.0 + patch {
        out.extend_from_slice(&plane[r * side + origin.1..r * side + origin.1 + patch]);
    }
}

pub fn make_relloc_batch(images: &Tensor<f32>, gap: usize, jitter: usize, seed: u64) -> Result<RelLocBatch> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!("relative location needs square images, got {s:?}")));
    }
    let (n, ch, side) = (s[0], s[1], s[2]);
    let (cell, patch) = patch_geometry(side, gap)?;
    let mut rng = rng_from_seed(seed);
    let j = jitter as i64;
    let mut centers = Vec::with_capacity(n * ch * patch * patch);
    let mut neighbors = Vec::with_capacity(n * ch * patch * patch);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let target = rng.random_range(0..8u8);
        let off = (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize);
        let co = patch_origin((1, 1), cell, patch, side, (0, 0));
        let no = patch_origin(neighbor_cell(target), cell, patch, side, off);
        for c in 0..ch {
            let plane = &images.data()[(i * ch + c) * side * side..(i * ch + c + 1) * side * side];
            crop(plane, side, co, patch, &mut centers);
            crop(plane, side, no, patch, &mut neighbors);
        }
        targets.push(target);
    }
    Ok(RelLocBatch {
        center_patches: Tensor::from_vec(&[n, ch, patch, patch], centers)?,
        neighbor_patches: Tensor::from_vec(&[n, ch, patch, patch], neighbors)?,
        targets,
    })
}

/// `[B, K] ++ [B, K] -> [B, 2K]`
fn hconcat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (a.dim(0), a.dim(1));
    let mut data = Vec::with_capacity(2 * n * k);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * k..(i + 1) * k]);
        data.extend_from_slice(&b.data()[i * k..(i + 1) * k]);
    }
    Tensor::from_vec(&[n, 2 * k], data).expect("concatenated shape")
}

/// Inverse of [`hconcat`], stacked along the batch axis: `[2B, K]`.
fn hsplit_stack<T: Scalar>(d: &Tensor<T>) -> Tensor<T> {
    let (n, k2) = (d.dim(0), d.dim(1));
    let k = k2 / 2;
    let mut data = Vec::with_capacity(n * k2);
    for half in 0..2 {
        for i in 0..n {
            data.extend_from_slice(&d.data()[i * k2 + half * k..i * k2 + (half + 1) * k]);
        }
    }
    Tensor::from_vec(&[2 * n, k], data).expect("stacked shape")
}

pub(crate) fn relloc_logits(net: &Backbone, params: &ParamSet<f32>, b: &RelLocBatch<f32>, mode: Mode) -> Result<Tensor<f32>> {
    let both = Tensor::concat_outer(&[&b.center_patches, &b.neighbor_patches])?;
    let enc = net.encode(params, &both, mode)?;
    let n = b.targets.len();
    let feats = hconcat(&enc.embedding.slice_outer(0, n), &enc.embedding.slice_outer(n, 2 * n));
    head_linear(params, "head.relloc", &feats)
}

/// Both patches go through the backbone as one batch; the head sees the
/// concatenated embeddings.
pub fn relloc_loss<T: Scalar>(net: &Backbone, params: &ParamSet<T>, b: &RelLocBatch<T>) -> Result<LossOutput<T>> {
    let n = b.targets.len();
    let both = Tensor::concat_outer(&[&b.center_patches, &b.neighbor_patches])?;
    let enc = net.encode(params, &both, Mode::Train)?;
    let feats = hconcat(&enc.embedding.slice_outer(0, n), &enc.embedding.slice_outer(n, 2 * n));
    let logits = head_linear(params, "head.relloc", &feats)?;
    let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
    let (loss, dlogits) = nn::cross_entropy(&logits, &targets, None)?;
    let mut grads = ParamSet::new();
    let dfeats = head_linear_backward(params, "head.relloc", &feats, &dlogits, &mut grads)?;
    net.encode_backward(params, &enc, &hsplit_stack(&dfeats), &mut grads)?;
    let correct = nn::argmax_rows(&logits).iter().zip(&targets).filter(|(a, b)| a == b).count();
    Ok(LossOutput {
        loss,
        grads,
        running: enc.tape.running_stats(),
        correct,
        total: n,
    })
}
