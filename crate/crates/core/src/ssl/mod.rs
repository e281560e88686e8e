//! Pretext tasks: rotation prediction, relative patch location, momentum
//! contrast and swapped-assignment clustering.
//!
//! Each task is a self-labelling batch transform plus a differentiable loss
//! over backbone features. Losses are generic over the scalar type so the
//! same code can be checked against finite differences in f64.

pub mod augment;
pub mod moco;
pub mod relloc;
pub mod rotation;
pub mod swav;

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, HeadSpec, Mode};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub use augment::AugmentConfig;
pub use moco::{MocoBatch, MocoConfig, MocoState};
pub use relloc::{RelLocBatch, RelLocConfig};
pub use rotation::RotationBatch;
pub use swav::{SwavBatch, SwavConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    Rotation,
    RelLoc,
    Moco,
    Swav,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Rotation, TaskId::RelLoc, TaskId::Moco, TaskId::Swav];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Rotation => "rotation",
            TaskId::RelLoc => "relloc",
            TaskId::Moco => "moco",
            TaskId::Swav => "swav",
        }
    }

    /// Short label used in reports: RP, RL, M, S.
    pub fn abbrev(self) -> &'static str {
        match self {
            TaskId::Rotation => "RP",
            TaskId::RelLoc => "RL",
            TaskId::Moco => "M",
            TaskId::Swav => "S",
        }
    }

    pub fn head(self, config: &PretextConfig) -> HeadSpec {
        match self {
            TaskId::Rotation => HeadSpec::Rotation,
            TaskId::RelLoc => HeadSpec::RelLoc,
            TaskId::Moco => HeadSpec::Moco {
                hidden: config.moco.hidden,
                out: config.moco.out,
            },
            TaskId::Swav => HeadSpec::Swav {
                hidden: config.swav.hidden,
                out: config.swav.out,
                prototypes: config.swav.prototypes,
            },
        }
    }

    /// Rotation and relative location have a pretext accuracy; the
    /// contrastive tasks only have a loss.
    pub fn has_accuracy(self) -> bool {
        matches!(self, TaskId::Rotation | TaskId::RelLoc)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rotation" | "rp" => Ok(TaskId::Rotation),
            "relloc" | "rl" => Ok(TaskId::RelLoc),
            "moco" | "m" => Ok(TaskId::Moco),
            "swav" | "s" => Ok(TaskId::Swav),
            other => Err(Error::Task(format!("unknown pretext task {other:?}"))),
        }
    }
}

/// Task-internal constants for all four pretext tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretextConfig {
    pub moco: MocoConfig,
    pub swav: SwavConfig,
    pub relloc: RelLocConfig,
    pub augment: AugmentConfig,
}

pub enum PretextBatch<T> {
    Rotation(RotationBatch<T>),
    RelLoc(RelLocBatch<T>),
    Moco(MocoBatch<T>),
    Swav(SwavBatch<T>),
}

impl<T> PretextBatch<T> {
    pub fn task(&self) -> TaskId {
        match self {
            PretextBatch::Rotation(_) => TaskId::Rotation,
            PretextBatch::RelLoc(_) => TaskId::RelLoc,
            PretextBatch::Moco(_) => TaskId::Moco,
            PretextBatch::Swav(_) => TaskId::Swav,
        }
    }
}

/// Loss, parameter gradients and the batch-norm statistics of the pass.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: ParamSet<T>,
    pub running: ParamSet<T>,
    pub correct: usize,
    pub total: usize,
}

pub(crate) fn head_linear<T: Scalar>(params: &ParamSet<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    nn::linear(
        x,
        params.get(&format!("{name}.weight"))?,
        params.get(&format!("{name}.bias"))?,
    )
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub(crate) fn head_linear_backward<T: Scalar>(
    params: &ParamSet<T>,
    name: &str,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let wname = format!("{name}.weight");
    let (dx, dw, db) = nn::linear_backward(x, params.get(&wname)?, dy);
    grads.accumulate(&wname, dw);
    grads.accumulate(&format!("{name}.bias"), db);
    Ok(dx)
}

/// Two-layer MLP projection followed by L2 normalization.
#[derive(Debug, Clone)]
pub(crate) struct Projection<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    pub z: Tensor<T>,
    norms: Vec<T>,
}

pub(crate) fn project<T: Scalar>(params: &ParamSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Projection<T>> {
    let mut hidden = head_linear(params, &format!("{prefix}.fc1"), x)?;
    nn::relu_inplace(&mut hidden);
    let raw = head_linear(params, &format!("{prefix}.fc2"), &hidden)?;
    let (z, norms) = nn::l2_normalize_rows(&raw);
    Ok(Projection {
        input: x.clone(),
        hidden,
        z,
        norms,
    })
}

pub(crate) fn project_backward<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    p: &Projection<T>,
    dz: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let draw = nn::l2_normalize_rows_backward(&p.z, &p.norms, dz);
    let mut dh = head_linear_backward(params, &format!("{prefix}.fc2"), &p.hidden, &draw, grads)?;
    nn::relu_backward(&p.hidden, &mut dh);
    head_linear_backward(params, &format!("{prefix}.fc1"), &p.input, &dh, grads)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> usize {
    nn::argmax_rows(logits)
        .iter()
        .zip(targets)
        .filter(|(a, b)| a == b)
        .count()
}

/// Cross-entropy over a linear head on the embedding of `x`.
fn classify_embedding<T: Scalar>(
    net: &Backbone,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    head: &str,
    targets: &[usize],
) -> Result<LossOutput<T>> {
    let enc = net.encode(params, x, Mode::Train)?;
    let logits = head_linear(params, head, &enc.embedding)?;
    let (loss, dlogits) = nn::cross_entropy(&logits, targets, None)?;
    let mut grads = ParamSet::new();
    let demb = head_linear_backward(params, head, &enc.embedding, &dlogits, &mut grads)?;
    net.encode_backward(params, &enc, &demb, &mut grads)?;
    Ok(LossOutput {
        loss,
        grads,
        running: enc.tape.running_stats(),
        correct: count_correct(&logits, targets),
        total: targets.len(),
    })
}

/// Dispatch to the loss of `task`; the batch must belong to the same task.
pub fn pretext_loss<T: Scalar>(
    task: TaskId,
    net: &Backbone,
    params: &ParamSet<T>,
    batch: &PretextBatch<T>,
    config: &PretextConfig,
) -> Result<LossOutput<T>> {
    if batch.task() != task {
        return Err(Error::Task(format!("{task} loss given a {} batch", batch.task())));
    }
    match batch {
        PretextBatch::Rotation(b) => {
            let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
            classify_embedding(net, params, &b.images, "head.rotation", &targets)
        }
        PretextBatch::RelLoc(b) => relloc::relloc_loss(net, params, b),
        PretextBatch::Moco(b) => moco::moco_loss(net, params, b, config.moco.temperature),
        PretextBatch::Swav(b) => swav::swav_loss(net, params, b, &config.swav),
    }
}

/// Pretext accuracy of an eval-mode model, for tasks that have one.
pub fn pretext_accuracy(
    task: TaskId,
    net: &Backbone,
    params: &ParamSet<f32>,
    batch: &PretextBatch<f32>,
) -> Result<(usize, usize)> {
    let (logits, targets) = match batch {
        PretextBatch::Rotation(b) => {
            let enc = net.encode(params, &b.images, Mode::Eval)?;
            (head_linear(params, "head.rotation", &enc.embedding)?, &b.targets)
        }
        PretextBatch::RelLoc(b) => (relloc::relloc_logits(net, params, b, Mode::Eval)?, &b.targets),
        _ => return Err(Error::Task(format!("{task} has no pretext accuracy"))),
    };
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok((count_correct(&logits, &targets), targets.len()))
}
