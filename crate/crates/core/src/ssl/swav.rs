//! Swapped-assignment clustering: embeddings of two views are scored
//! against learnable unit-norm prototypes, an equipartitioned soft
//! assignment is computed per view with Sinkhorn-Knopp, and each view
//! predicts the other view's assignment.

use crate::backbone::{Backbone, Mode};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::ssl::augment::{two_views, AugmentConfig};
use crate::ssl::{project, project_backward, LossOutput};
use crate::tensor::{Scalar, Tensor};

pub const HEAD_PREFIX: &str = "head.swav";
pub const PROTOTYPES: &str = "head.swav.prototypes";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwavConfig {
    pub prototypes: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub temperature: f64,
    pub hidden: usize,
    pub out: usize,
}

impl Default for SwavConfig {
    fn default() -> Self {
        Self {
            prototypes: 32,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            temperature: 0.1,
            hidden: 64,
            out: 32,
        }
    }
}

fn normalize_cols(q: &mut [f64], b: usize, k: usize) {
    for j in 0..k {
        let s: f64 = (0..b).map(|i| q[i * k + j]).sum();
        for i in 0..b {
            q[i * k + j] /= s * k as f64;
        }
    }
}

fn normalize_rows(q: &mut [f64], k: usize, b: usize) {
    for row in q.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s * b as f64);
    }
}

/// Sinkhorn-Knopp on `exp(scores / epsilon)` for a `[B, K]` score matrix.
///
/// Each iteration rescales columns to sum `1/K`, then rows to sum `1/B`,
/// so rows are exact on return. Scores are shifted by their maximum before
/// exponentiation; the result is invariant to adding a constant.
pub fn sinkhorn(scores: &Tensor<f64>, epsilon: f64, iters: usize) -> Result<Tensor<f64>> {
    if scores.shape().len() != 2 || scores.dim(0) == 0 || scores.dim(1) == 0 {
        return Err(Error::Shape(format!("sinkhorn scores {:?}", scores.shape())));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("sinkhorn scores".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("sinkhorn epsilon {epsilon} must be positive")));
    }
    let (b, k) = (scores.dim(0), scores.dim(1));
    let max = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores.data().iter().map(|s| ((s - max) / epsilon).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    for _ in 0..iters {
        normalize_cols(&mut q, b, k);
        normalize_rows(&mut q, k, b);
    }
    Tensor::from_vec(&[b, k], q)
}

/// Per-sample codes: the Sinkhorn plan scaled so each row sums to 1.
pub fn assignment_codes(scores: &Tensor<f64>, epsilon: f64, iters: usize) -> Result<Tensor<f64>> {
    let mut q = sinkhorn(scores, epsilon, iters)?;
    let b = q.dim(0) as f64;
    q.data_mut().iter_mut().for_each(|v| *v *= b);
    Ok(q)
}

fn scores<T: Scalar>(z: &Tensor<T>, prototypes: &Tensor<T>) -> Tensor<T> {
    let (b, d, k) = (z.dim(0), z.dim(1), prototypes.dim(0));
    let mut s = Tensor::zeros(&[b, k]);
    T::gemm(b, d, k, T::one(), z.data(), false, prototypes.data(), true, T::zero(), s.data_mut());
    s
}

/// Symmetrized swapped-prediction cross-entropy with fixed codes.
///
/// `z[v]` are `[B, d]` projections, `codes[v]` the `[B, K]` assignment of
/// view `v`; view 0 predicts `codes[1]` and vice versa. Returns the loss and
/// gradients with respect to both projections and the prototypes.
#[allow(clippy::type_complexity)]
pub fn swapped_prediction_loss<T: Scalar>(
    z: [&Tensor<T>; 2],
    prototypes: &Tensor<T>,
    codes: [&Tensor<f64>; 2],
    temperature: f64,
) -> Result<(f64, [Tensor<T>; 2], Tensor<T>)> {
    let (b, k) = (z[0].dim(0), prototypes.dim(0));
    for v in 0..2 {
        if z[v].dim(1) != prototypes.dim(1) || z[v].dim(0) != b || codes[v].shape() != [b, k] {
            return Err(Error::Shape(format!(
                "swapped prediction: z {:?}, prototypes {:?}, codes {:?}",
                z[v].shape(),
                prototypes.shape(),
                codes[v].shape()
            )));
        }
    }
    let scale = 1.0 / (2.0 * b as f64);
    let mut loss = 0.0;
    let mut dz = [Tensor::zeros(z[0].shape()), Tensor::zeros(z[1].shape())];
    let mut dproto = Tensor::zeros(prototypes.shape());
    for v in 0..2 {
        let target = codes[1 - v];
        let mut s = scores(z[v], prototypes);
        s.scale(T::of(1.0 / temperature));
        if !s.is_finite() {
            return Err(Error::Numeric("swav scores".into()));
        }
        let logp = nn::log_softmax_rows(&s);
        let mut ds = Tensor::zeros(&[b, k]);
        for i in 0..b {
            let q = &target.data()[i * k..(i + 1) * k];
            let lp = &logp.data()[i * k..(i + 1) * k];
            let qsum: f64 = q.iter().sum();
            for j in 0..k {
                loss -= scale * q[j] * lp[j].f64();
                ds.data_mut()[i * k + j] = T::of(scale * (lp[j].f64().exp() * qsum - q[j]) / temperature);
            }
        }
        T::gemm(b, k, z[v].dim(1), T::one(), ds.data(), false, prototypes.data(), false, T::zero(), dz[v].data_mut());
        T::gemm(k, b, z[v].dim(1), T::one(), ds.data(), true, z[v].data(), false, T::one(), dproto.data_mut());
    }
    Ok((loss, dz, dproto))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwavBatch<T> {
    pub views: [Tensor<T>; 2],
    /// Assignments to use instead of running Sinkhorn on the current scores.
    pub codes: Option<[Tensor<f64>; 2]>,
}

pub fn swav_loss<T: Scalar>(net: &Backbone, params: &ParamSet<T>, batch: &SwavBatch<T>, cfg: &SwavConfig) -> Result<LossOutput<T>> {
    let b = batch.views[0].dim(0);
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("swav needs at least 2 images per batch, got {b}")));
    }
    let both = Tensor::concat_outer(&[&batch.views[0], &batch.views[1]])?;
    let enc = net.encode(params, &both, Mode::Train)?;
    let proj = project(params, HEAD_PREFIX, &enc.embedding)?;
    let (z0, z1) = (proj.z.slice_outer(0, b), proj.z.slice_outer(b, 2 * b));
    let protos = params.get(PROTOTYPES)?;
    let codes = match &batch.codes {
        Some(c) => c.clone(),
        None => [
            assignment_codes(&scores(&z0, protos).cast(), cfg.epsilon, cfg.sinkhorn_iters)?,
            assignment_codes(&scores(&z1, protos).cast(), cfg.epsilon, cfg.sinkhorn_iters)?,
        ],
    };
    let (loss, [d0, d1], dproto) = swapped_prediction_loss([&z0, &z1], protos, [&codes[0], &codes[1]], cfg.temperature)?;
    let mut grads = ParamSet::new();
    grads.accumulate(PROTOTYPES, dproto);
    let dz = Tensor::concat_outer(&[&d0, &d1])?;
    let demb = project_backward(params, HEAD_PREFIX, &proj, &dz, &mut grads)?;
    net.encode_backward(params, &enc, &demb, &mut grads)?;
    Ok(LossOutput {
        loss,
        grads,
        running: enc.tape.running_stats(),
        correct: 0,
        total: b,
    })
}

/// Rescale every prototype row to unit L2 norm.
pub fn normalize_prototypes(params: &mut ParamSet<f32>) -> Result<()> {
    let p = params.get_mut(PROTOTYPES).ok_or_else(|| Error::Key(PROTOTYPES.into()))?;
    let d = p.dim(1);
    for row in p.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v = (f64::from(*v) / n) as f32);
    }
    Ok(())
}

/// One training step: two views, loss, optimizer update, prototype
/// renormalization.
#[allow(clippy::too_many_arguments)]
pub fn swav_step(
    net: &Backbone,
    params: &mut ParamSet<f32>,
    optimizer: &mut Optimizer,
    lr: f64,
    images: &Tensor<f32>,
    cfg: &SwavConfig,
    augment: &AugmentConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let (v0, v1) = two_views(images, augment, rng)?;
    let out = swav_loss(net, params, &SwavBatch { views: [v0, v1], codes: None }, cfg)?;
    if !out.loss.is_finite() {
        return Err(Error::Numeric("swav loss".into()));
    }
    optimizer.step(params, &out.grads, lr)?;
    params.extend(out.running);
    normalize_prototypes(params)?;
    Ok(out.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn marginals(q: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let (b, k) = (q.dim(0), q.dim(1));
        let rows = q.data().chunks(k).map(|r| r.iter().sum()).collect();
        let cols = (0..k).map(|j| (0..b).map(|i| q.data()[i * k + j]).sum()).collect();
        (rows, cols)
    }

    #[test]
    fn uniform_scores_give_uniform_plan() {
        let q = sinkhorn(&Tensor::full(&[2, 2], 0.3), 0.05, 3).unwrap();
        assert_eq!(q.data(), &[0.25; 4]);
        let one = sinkhorn(&Tensor::full(&[1, 1], -4.0), 0.05, 3).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn non_finite_scores_rejected() {
        let s = Tensor::from_vec(&[1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(sinkhorn(&s, 0.05, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn column_error_shrinks_with_iterations() {
        let mut rng = rng_from_seed(3);
        let s = Tensor::from_vec(&[8, 16], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = |it| {
            let (_, cols) = marginals(&sinkhorn(&s, 0.05, it).unwrap());
            cols.iter().map(|c| (c - 1.0 / 16.0).abs()).sum::<f64>()
        };
        let errs: Vec<f64> = (1..30).map(err).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{errs:?}");
        }
        let shifted = Tensor::from_vec(&[8, 16], s.data().iter().map(|v| v + 3.0).collect()).unwrap();
        let (a, b) = (sinkhorn(&s, 0.05, 10).unwrap(), sinkhorn(&shifted, 0.05, 10).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn codes_rows_sum_to_one() {
        let s = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let q = assignment_codes(&s, 0.05, 3).unwrap();
        for row in q.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_views_give_equal_terms() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let protos = z.clone();
        let codes = assignment_codes(&scores(&z, &protos), 0.05, 3).unwrap();
        let (_, [d0, d1], _) = swapped_prediction_loss([&z, &z], &protos, [&codes, &codes], 0.1).unwrap();
        assert_eq!(d0, d1);
    }

    #[test]
    fn prototypes_are_renormalized() {
        let mut p = ParamSet::new();
        p.insert(PROTOTYPES, Tensor::from_vec(&[2, 2], vec![3.0f32, 4.0, 0.0, 0.5]).unwrap());
        normalize_prototypes(&mut p).unwrap();
        for row in p.get(PROTOTYPES).unwrap().data().chunks(2) {
            assert!((row.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
