//! Rotation prediction: each image is rotated by `k * 90` degrees
//! counter-clockwise and the network predicts `k`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationBatch<T = f32> {
    /// `[N, C, S, S]`
    pub images: Tensor<T>,
    /// Quarter turns, `0..4`.
    pub targets: Vec<u8>,
}

impl RotationBatch<f32> {
    pub fn cast<U: Scalar>(&self) -> RotationBatch<U> {
        RotationBatch {
            images: self.images.cast(),
            targets: self.targets.clone(),
        }
    }
}

/// Rotate a square `side x side` plane by `k` quarter turns counter-clockwise.
/// The output pixel `(r, c)` after one turn is the input pixel `(c, side - 1 - r)`.
pub fn rotate_plane<T: Copy>(plane: &[T], side: usize, k: u8) -> Vec<T> {
    let mut cur = plane.to_vec();
    for _ in 0..k % 4 {
        let mut next = cur.clone();
        for r in 0..side {
            for c in 0..side {
                next[r * side + c] = cur[c * side + (side - 1 - r)];
            }
        }
        cur = next;
    }
    cur
}

/// Rotate every plane of an `[N, C, S, S]` tensor; sample `i` by `turns[i]`.
pub fn rotate_batch<T: Scalar>(images: &Tensor<T>, turns: &[u8]) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!("rotation needs square images, got {s:?}")));
    }
    if turns.len() != s[0] {
        return Err(Error::Shape(format!("{} turns for {} images", turns.len(), s[0])));
    }
    let side = s[2];
    let plane = side * side;
    let mut data = Vec::with_capacity(images.len());
    for (i, &k) in turns.iter().enumerate() {
        for ch in 0..s[1] {
            let start = (i * s[1] + ch) * plane;
            data.extend(rotate_plane(&images.data()[start..start + plane], side, k));
        }
    }
    Tensor::from_vec(s, data)
}

/// Draw a uniform quarter-turn count per image and rotate.
pub fn make_rotation_batch(images: &Tensor<f32>, seed: u64) -> Result<RotationBatch> {
    let mut rng = rng_from_seed(seed);
    let targets: Vec<u8> = (0..images.shape().first().copied().unwrap_or(0))
        .map(|_| rng.random_range(0..4u8))
        .collect();
    Ok(RotationBatch {
        images: rotate_batch(images, &targets)?,
        targets,
    })
}
