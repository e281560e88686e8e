//! Momentum contrast: a query encoder is trained with InfoNCE against keys
//! produced by a slowly moving copy of itself, with a FIFO queue of past
//! keys serving as negatives.

use std::collections::VecDeque;

use crate::backbone::{Backbone, Mode};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::ssl::augment::{two_views, AugmentConfig};
use crate::ssl::{project, project_backward, LossOutput};
use crate::tensor::{Scalar, Tensor};

pub const HEAD_PREFIX: &str = "head.moco";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MocoConfig {
    pub temperature: f64,
    pub queue_size: usize,
    /// EMA coefficient of the key encoder.
    pub encoder_momentum: f64,
    pub hidden: usize,
    pub out: usize,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            queue_size: 256,
            encoder_momentum: 0.99,
            hidden: 64,
            out: 32,
        }
    }
}

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    keys: VecDeque<Vec<f32>>,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            keys: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.keys.len() == self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.keys.iter().map(Vec::as_slice)
    }

    /// Append every row of `[B, d]`, evicting the oldest entries.
    pub fn push_batch(&mut self, keys: &Tensor<f32>) -> Result<()> {
        if keys.shape().len() != 2 || keys.dim(1) != self.dim {
            return Err(Error::Shape(format!(
                "queue of dimension {} given keys {:?}",
                self.dim,
                keys.shape()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for row in keys.data().chunks(self.dim) {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
            }
            self.keys.push_back(row.to_vec());
        }
        Ok(())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.keys.iter().flatten().map(|&v| T::of(f64::from(v))).collect();
        Tensor::from_vec(&[self.keys.len(), self.dim], data).expect("queue shape")
    }
}

/// `key <- m * key + (1 - m) * query`, tensor by tensor, buffers included.
pub fn ema_update(key: &mut ParamSet<f32>, query: &ParamSet<f32>, momentum: f32) -> Result<()> {
    for (name, k) in key.iter_mut() {
        let q = query.get(name)?;
        if q.shape() != k.shape() {
            return Err(Error::Shape(format!("{name}: key {:?} vs query {:?}", k.shape(), q.shape())));
        }
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = momentum * *kv + (1.0 - momentum) * qv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MocoState {
    pub config: MocoConfig,
    pub key_params: ParamSet<f32>,
    pub queue: KeyQueue,
    batch_size: usize,
    batches_seen: usize,
}

impl MocoState {
    /// The key encoder starts as a copy of the query encoder.
    pub fn new(config: MocoConfig, query_params: &ParamSet<f32>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || config.queue_size == 0 {
            return Err(Error::Config("moco needs a positive batch size and queue size".into()));
        }
        Ok(Self {
            config,
            key_params: query_params.clone(),
            queue: KeyQueue::new(config.queue_size, config.out),
            batch_size,
            batches_seen: 0,
        })
    }

    /// Batches that only fill the queue: `ceil(Kq / B)`.
    pub fn warmup_batches(&self) -> usize {
        self.config.queue_size.div_ceil(self.batch_size)
    }

    pub fn in_warmup(&self) -> bool {
        self.batches_seen < self.warmup_batches()
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Unit-norm keys of `view` under the key encoder.
    pub fn encode_keys(&self, net: &Backbone, view: &Tensor<f32>) -> Result<Tensor<f32>> {
        let enc = net.encode(&self.key_params, view, Mode::Train)?;
        Ok(project(&self.key_params, HEAD_PREFIX, &enc.embedding)?.z)
    }

    pub fn warmup(&mut self, keys: &Tensor<f32>) -> Result<()> {
        self.queue.push_batch(keys)?;
        self.batches_seen += 1;
        Ok(())
    }

    pub fn batch<T: Scalar>(&self, queries: Tensor<T>, keys: &Tensor<f32>) -> Result<MocoBatch<T>> {
        if self.queue.is_empty() {
            return Err(Error::State("moco queue is empty after warm-up".into()));
        }
        Ok(MocoBatch {
            queries,
            keys: keys.cast(),
            queue: self.queue.to_tensor(),
        })
    }

    /// After the optimizer step: move the key encoder, then enqueue.
    pub fn commit(&mut self, query_params: &ParamSet<f32>, keys: &Tensor<f32>) -> Result<()> {
        ema_update(&mut self.key_params, query_params, self.config.encoder_momentum as f32)?;
        self.queue.push_batch(keys)?;
        self.batches_seen += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MocoBatch<T> {
    /// Images of the query view.
    pub queries: Tensor<T>,
    /// `[B, d]` positive keys, treated as constants.
    pub keys: Tensor<T>,
    /// `[Kq, d]` negatives, treated as constants.
    pub queue: Tensor<T>,
}

/// InfoNCE with the positive at logit index 0. Returns the mean loss and
/// its gradient with respect to the queries.
pub fn info_nce<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, queue: &Tensor<T>, temperature: f64) -> Result<(f64, Tensor<T>)> {
    let (b, d) = (q.dim(0), q.dim(1));
    if k.shape() != q.shape() || queue.dim(1) != d {
        return Err(Error::Shape(format!(
            "queries {:?}, keys {:?}, queue {:?}",
            q.shape(),
            k.shape(),
            queue.shape()
        )));
    }
    let kq = queue.dim(0);
    let inv_t = T::of(1.0 / temperature);
    let mut neg = Tensor::zeros(&[b, kq]);
    T::gemm(b, d, kq, inv_t, q.data(), false, queue.data(), true, T::zero(), neg.data_mut());
    let mut logits = Tensor::zeros(&[b, kq + 1]);
    for i in 0..b {
        let qi = &q.data()[i * d..(i + 1) * d];
        let ki = &k.data()[i * d..(i + 1) * d];
        let row = &mut logits.data_mut()[i * (kq + 1)..(i + 1) * (kq + 1)];
        row[0] = qi.iter().zip(ki).map(|(a, b)| *a * *b).sum::<T>() * inv_t;
        row[1..].copy_from_slice(&neg.data()[i * kq..(i + 1) * kq]);
    }
    let (loss, dl) = nn::cross_entropy(&logits, &vec![0; b], None)?;
    let mut dq = Tensor::zeros(&[b, d]);
    let mut dneg = Tensor::zeros(&[b, kq]);
    for i in 0..b {
        let row = &dl.data()[i * (kq + 1)..(i + 1) * (kq + 1)];
        dneg.data_mut()[i * kq..(i + 1) * kq].copy_from_slice(&row[1..]);
        let ki = &k.data()[i * d..(i + 1) * d];
        for (o, kv) in dq.data_mut()[i * d..(i + 1) * d].iter_mut().zip(ki) {
            *o = row[0] * *kv * inv_t;
        }
    }
    T::gemm(b, kq, d, inv_t, dneg.data(), false, queue.data(), false, T::one(), dq.data_mut());
    Ok((loss, dq))
}

pub fn moco_loss<T: Scalar>(net: &Backbone, params: &ParamSet<T>, b: &MocoBatch<T>, temperature: f64) -> Result<LossOutput<T>> {
    let enc = net.encode(params, &b.queries, Mode::Train)?;
    let proj = project(params, HEAD_PREFIX, &enc.embedding)?;
    let (loss, dz) = info_nce(&proj.z, &b.keys, &b.queue, temperature)?;
    let mut grads = ParamSet::new();
    let demb = project_backward(params, HEAD_PREFIX, &proj, &dz, &mut grads)?;
    net.encode_backward(params, &enc, &demb, &mut grads)?;
    Ok(LossOutput {
        loss,
        grads,
        running: enc.tape.running_stats(),
        correct: 0,
        total: b.keys.dim(0),
    })
}

/// One full training step: augment, encode keys, then either fill the
/// queue (warm-up, returns `None`) or take a gradient step followed by the
/// key-encoder update and enqueue.
#[allow(clippy::too_many_arguments)]
pub fn moco_step(
    state: &mut MocoState,
    net: &Backbone,
    params: &mut ParamSet<f32>,
    optimizer: &mut Optimizer,
    lr: f64,
    images: &Tensor<f32>,
    augment: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let (vq, vk) = two_views(images, augment, rng)?;
    let keys = state.encode_keys(net, &vk)?;
    if state.in_warmup() {
        state.warmup(&keys)?;
        return Ok(None);
    }
    let batch = state.batch(vq, &keys)?;
    let out = moco_loss(net, params, &batch, state.config.temperature)?;
    if !out.loss.is_finite() {
        return Err(Error::Numeric("moco loss".into()));
    }
    optimizer.step(params, &out.grads, lr)?;
    params.extend(out.running);
    state.commit(params, &keys)?;
    Ok(Some(out.loss))
}
