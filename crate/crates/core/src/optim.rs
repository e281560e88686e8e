//! SGD with momentum and LARS, applied per tensor.
//!
//! Both share the update `v' = momentum * v + g + wd * p`, `p' = p - lr * v'`;
//! LARS scales `lr` per tensor by a trust ratio.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{is_buffer, ParamSet};

/// Guards the LARS denominator.
pub const LARS_DELTA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Lars,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Lars => "lars",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "lars" => Ok(OptimizerKind::Lars),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coeff: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coeff: 0.001,
        }
    }
}

fn check_lengths(p: &[f32], g: &[f32], v: &[f32]) -> Result<()> {
    if p.len() != g.len() || p.len() != v.len() {
        return Err(Error::Shape(format!(
            "parameter {} / gradient {} / velocity {} lengths differ",
            p.len(),
            g.len(),
            v.len()
        )));
    }
    Ok(())
}

/// One SGD step on a flat tensor, in place.
pub fn sgd_update(p: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    check_lengths(p, g, v)?;
    for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let vel = momentum * f64::from(*vv) + f64::from(*gv) + weight_decay * f64::from(*pv);
        *vv = vel as f32;
        *pv = (f64::from(*pv) - lr * vel) as f32;
    }
    Ok(())
}

fn l2(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Per-tensor LARS multiplier; 1 when either norm vanishes.
pub fn lars_local_lr(p: &[f32], g: &[f32], trust_coeff: f64, weight_decay: f64) -> f64 {
    let (pn, gn) = (l2(p), l2(g));
    if pn > 0.0 && gn > 0.0 {
        trust_coeff * pn / (gn + weight_decay * pn + LARS_DELTA)
    } else {
        1.0
    }
}

pub fn lars_update(
    p: &mut [f32],
    g: &[f32],
    v: &mut [f32],
    lr: f64,
    trust_coeff: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lengths(p, g, v)?;
    let local = lars_local_lr(p, g, trust_coeff, weight_decay);
    sgd_update(p, g, v, lr * local, momentum, weight_decay)
}

/// Optimizer with per-tensor velocity state. Buffers are never updated and
/// tensors without a gradient are left alone.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) -> Result<()> {
        let c = self.config;
        for (name, g) in grads.iter() {
            if is_buffer(name) {
                continue;
            }
            let p = params.get_mut(name).ok_or_else(|| Error::Key(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{name}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match c.kind {
                OptimizerKind::Sgd => sgd_update(p.data_mut(), g.data(), v, lr, c.momentum, c.weight_decay)?,
                OptimizerKind::Lars => {
                    lars_update(p.data_mut(), g.data(), v, lr, c.trust_coeff, c.momentum, c.weight_decay)?
                }
            }
        }
        Ok(())
    }
}
