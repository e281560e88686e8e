//! Small residual convolutional encoder.
//!
//! Topology: a stride-1 3x3 stem, then one stage per entry of
//! `stage_widths`. The first block of every stage halves the resolution.
//! Each block is `conv-bn-relu-conv-bn` plus a shortcut (a 1x1 strided
//! `conv-bn` projection when the shape changes), followed by ReLU. The last
//! stage's maps feed global average pooling, which is what the linear heads
//! and class activation maps consume.

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormCache, BatchNormParams, ConvGeometry};
use crate::params::{Checkpoint, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Scalar, Tensor};

const CONV3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
const CONV3_DOWN: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
const CONV1_DOWN: ConvGeometry = ConvGeometry { kernel: 1, stride: 2, pad: 0 };

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::Config(format!("degenerate backbone {self:?}")));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        Ok(())
    }

    /// Checks that images of `side` pixels give feature maps of at least 4x4.
    pub fn validate_for_side(&self, side: usize) -> Result<()> {
        self.validate()?;
        if side % self.total_stride() != 0 || side / self.total_stride() < 4 {
            return Err(Error::Config(format!(
                "side {side} gives no usable feature maps with total stride {}",
                self.total_stride()
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    pub fn total_stride(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn feature_side(&self, side: usize) -> usize {
        let mut s = side;
        for _ in &self.stage_widths {
            s = CONV3_DOWN.out_len(s);
        }
        s
    }

    pub fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("backbone.in_channels", self.in_channels);
        ckpt.set_meta(
            "backbone.stage_widths",
            self.stage_widths
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        ckpt.set_meta("backbone.blocks_per_stage", self.blocks_per_stage);
    }

    pub fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("meta key {k} missing")))
        };
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad number {s:?} in meta")))
        };
        let cfg = Self {
            in_channels: num(get("backbone.in_channels")?)?,
            stage_widths: get("backbone.stage_widths")?
                .split(',')
                .map(num)
                .collect::<Result<_>>()?,
            blocks_per_stage: num(get("backbone.blocks_per_stage")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut in_ch = self.stage_widths[0];
        for (s, &width) in self.stage_widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                out.push(BlockSpec {
                    prefix: format!("backbone.stage{s}.block{b}"),
                    in_ch,
                    out_ch: width,
                    downsample: stride != 1 || in_ch != width,
                    stride,
                });
                in_ch = width;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BlockSpec {
    prefix: String,
    in_ch: usize,
    out_ch: usize,
    downsample: bool,
    stride: usize,
}

impl BlockSpec {
    fn conv1_geometry(&self) -> ConvGeometry {
        if self.stride == 2 {
            CONV3_DOWN
        } else {
            CONV3
        }
    }

    fn shortcut_geometry(&self) -> ConvGeometry {
        if self.stride == 2 {
            CONV1_DOWN
        } else {
            ConvGeometry { kernel: 1, stride: 1, pad: 0 }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; a deterministic function of the input.
    Eval,
}

#[derive(Debug, Clone)]
struct ConvBn<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    conv1: ConvBn<T>,
    relu1: Tensor<T>,
    conv2: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
    out: Tensor<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTape<T> {
    stem: ConvBn<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    running: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> BackboneTape<T> {
    /// Write the running statistics collected in training mode into `params`.
    pub fn apply_running_stats(&self, params: &mut ParamSet<T>) {
        for (name, t) in &self.running {
            params.insert(name.clone(), t.clone());
        }
    }

    pub fn running_stats(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in &self.running {
            out.insert(name.clone(), t.clone());
        }
        out
    }
}

/// Backbone output plus its pooled embedding, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// `[N, K, h, w]`
    pub maps: Tensor<T>,
    /// `[N, K]`
    pub embedding: Tensor<T>,
    pub tape: BackboneTape<T>,
}

/// Per-sample output of [`forward_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `[K, h, w]` last-stage feature maps.
    pub maps: Tensor<f32>,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<BlockSpec>,
}

fn conv_name(prefix: &str, conv: &str) -> String {
    format!("{prefix}.{conv}.weight")
}

fn bn_names(prefix: &str, bn: &str) -> [String; 4] {
    ["weight", "bias", "running_mean", "running_var"].map(|s| format!("{prefix}.{bn}.{s}"))
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config.blocks();
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `(name, shape)` for every backbone tensor, buffers included.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let w0 = self.config.stage_widths[0];
        out.push((
            conv_name("backbone.stem", "conv"),
            vec![w0, self.config.in_channels, 3, 3],
        ));
        push_bn(&mut out, "backbone.stem", "bn", w0);
        for b in &self.blocks {
            out.push((conv_name(&b.prefix, "conv1"), vec![b.out_ch, b.in_ch, 3, 3]));
            push_bn(&mut out, &b.prefix, "bn1", b.out_ch);
            out.push((conv_name(&b.prefix, "conv2"), vec![b.out_ch, b.out_ch, 3, 3]));
            push_bn(&mut out, &b.prefix, "bn2", b.out_ch);
            if b.downsample {
                out.push((conv_name(&b.prefix, "down_conv"), vec![b.out_ch, b.in_ch, 1, 1]));
                push_bn(&mut out, &b.prefix, "down_bn", b.out_ch);
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Fan-in scaled normal conv weights; batch norm scale 1, shift 0.
    pub fn init(&self, seed: u64) -> ParamSet<f32> {
        let mut params = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".running_var") || is_bn_scale(&name) {
                vec![1.0; n]
            } else if name.ends_with(".running_mean") || name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = rng_from_seed(derive_seed(seed, &name));
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            params.insert(name, Tensor::from_vec(&shape, data).expect("shape from spec"));
        }
        params
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || s[0] == 0 {
            return Err(Error::Shape(format!(
                "backbone expects [N, {}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Returns the last-stage feature maps `[N, K, h, w]`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BackboneTape<T>)> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        let mut running = Vec::new();
        let (mut h, stem) = conv_bn(params, x, "backbone.stem", "conv", "bn", CONV3, train, &mut running)?;
        nn::relu_inplace(&mut h);
        let stem_out = h.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let input = h;
            let (mut r1, conv1) = conv_bn(params, &input, &b.prefix, "conv1", "bn1", b.conv1_geometry(), train, &mut running)?;
            nn::relu_inplace(&mut r1);
            let (mut out, conv2) = conv_bn(params, &r1, &b.prefix, "conv2", "bn2", CONV3, train, &mut running)?;
            let shortcut = if b.downsample {
                let (sc, tape) = conv_bn(params, &input, &b.prefix, "down_conv", "down_bn", b.shortcut_geometry(), train, &mut running)?;
                out.add_assign(&sc);
                Some(tape)
            } else {
                out.add_assign(&input);
                None
            };
            nn::relu_inplace(&mut out);
            blocks.push(BlockTape {
                conv1,
                relu1: r1,
                conv2,
                shortcut,
                out: out.clone(),
            });
            h = out;
        }
        Ok((
            h,
            BackboneTape {
                stem,
                stem_out,
                blocks,
                running,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when requested.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        tape: &BackboneTape<T>,
        d_maps: &Tensor<T>,
        grads: &mut ParamSet<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut d = d_maps.clone();
        for (b, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            nn::relu_backward(&bt.out, &mut d);
            let d_sum = d;
            let mut d_r1 = conv_bn_backward(params, &bt.conv2, &d_sum, &b.prefix, "conv2", "bn2", CONV3, grads, true)?
                .expect("requested");
            nn::relu_backward(&bt.relu1, &mut d_r1);
            let mut d_in = conv_bn_backward(params, &bt.conv1, &d_r1, &b.prefix, "conv1", "bn1", b.conv1_geometry(), grads, true)?
                .expect("requested");
            match &bt.shortcut {
                Some(sc) => {
                    let d_sc = conv_bn_backward(params, sc, &d_sum, &b.prefix, "down_conv", "down_bn", b.shortcut_geometry(), grads, true)?
                        .expect("requested");
                    d_in.add_assign(&d_sc);
                }
                None => d_in.add_assign(&d_sum),
            }
            d = d_in;
        }
        nn::relu_backward(&tape.stem_out, &mut d);
        conv_bn_backward(params, &tape.stem, &d, "backbone.stem", "conv", "bn", CONV3, grads, need_input_grad)
    }
}

impl Backbone {
    /// Feature maps followed by global average pooling.
    pub fn encode<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>, mode: Mode) -> Result<Encoded<T>> {
        let (maps, tape) = self.forward(params, x, mode)?;
        let embedding = nn::global_avg_pool(&maps);
        Ok(Encoded { maps, embedding, tape })
    }

    /// Backpropagate an embedding gradient into `grads`.
    pub fn encode_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        enc: &Encoded<T>,
        d_embedding: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<()> {
        let d_maps = nn::global_avg_pool_backward(d_embedding, (enc.maps.dim(2), enc.maps.dim(3)));
        self.backward(params, &enc.tape, &d_maps, grads, false)?;
        Ok(())
    }
}

fn is_bn_scale(name: &str) -> bool {
    name.ends_with(".weight")
        && name
            .rsplit('.')
            .nth(1)
            .is_some_and(|layer| layer == "bn" || layer.starts_with("bn") || layer.ends_with("_bn"))
}

fn push_bn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, bn: &str, ch: usize) {
    for n in bn_names(prefix, bn) {
        out.push((n, vec![ch]));
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn<T: Scalar>(
    params: &ParamSet<T>,
    x: &Tensor<T>,
    prefix: &str,
    conv: &str,
    bn: &str,
    g: ConvGeometry,
    train: bool,
    running: &mut Vec<(String, Tensor<T>)>,
) -> Result<(Tensor<T>, ConvBn<T>)> {
    let a = nn::conv2d(x, params.get(&conv_name(prefix, conv))?, g)?;
    let [gw, gb, rm, rv] = bn_names(prefix, bn);
    let bnp = BatchNormParams {
        gamma: params.get(&gw)?,
        beta: params.get(&gb)?,
        running_mean: params.get(&rm)?,
        running_var: params.get(&rv)?,
    };
    let (y, cache, updated) = nn::batch_norm(&a, &bnp, train)?;
    if let Some((m, v)) = updated {
        running.push((rm, m));
        running.push((rv, v));
    }
    Ok((
        y,
        ConvBn {
            input: x.clone(),
            bn: cache,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_backward<T: Scalar>(
    params: &ParamSet<T>,
    tape: &ConvBn<T>,
    dy: &Tensor<T>,
    prefix: &str,
    conv: &str,
    bn: &str,
    g: ConvGeometry,
    grads: &mut ParamSet<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let [gw, gb, _, _] = bn_names(prefix, bn);
    let (da, dgamma, dbeta) = nn::batch_norm_backward(&tape.bn, params.get(&gw)?, dy);
    grads.accumulate(&gw, dgamma);
    grads.accumulate(&gb, dbeta);
    let wname = conv_name(prefix, conv);
    let (dx, dw) = nn::conv2d_backward(&tape.input, params.get(&wname)?, g, &da, need_input_grad)?;
    grads.accumulate(&wname, dw);
    Ok(dx)
}

/// A fresh checkpoint holding only backbone tensors.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<Checkpoint> {
    let net = Backbone::new(config.clone())?;
    let mut ckpt = Checkpoint::new(net.init(seed));
    config.write_meta(&mut ckpt);
    ckpt.set_meta("seed", seed);
    Ok(ckpt)
}

/// Inference-mode features for every sample of `batch` (`[N, 1, S, S]`,
/// intensities in `[0, 1]`).
pub fn forward_features(ckpt: &Checkpoint, batch: &Tensor<f32>) -> Result<Vec<FeatureBundle>> {
    let config = BackboneConfig::from_meta(ckpt)?;
    let net = Backbone::new(config)?;
    net.check_input(batch)?;
    let stride = net.config.total_stride();
    if batch.dim(2) % stride != 0 || batch.dim(3) % stride != 0 {
        return Err(Error::Shape(format!(
            "spatial size {}x{} not divisible by total stride {stride}",
            batch.dim(2),
            batch.dim(3)
        )));
    }
    let (maps, _) = net.forward(&ckpt.tensors, batch, Mode::Eval)?;
    let pooled = nn::global_avg_pool(&maps);
    let (k, h, w) = (maps.dim(1), maps.dim(2), maps.dim(3));
    Ok((0..maps.dim(0))
        .map(|i| FeatureBundle {
            maps: maps.slice_outer(i, i + 1).reshape(&[k, h, w]).expect("same volume"),
            embedding: pooled.data()[i * k..(i + 1) * k].to_vec(),
        })
        .collect())
}

/// The task-specific layers that sit on top of the backbone embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSpec {
    None,
    Classification { classes: usize },
    Rotation,
    RelLoc,
    Moco { hidden: usize, out: usize },
    Swav { hidden: usize, out: usize, prototypes: usize },
}

impl HeadSpec {
    /// `(name, shape)` of every head tensor given the embedding width.
    pub fn param_shapes(&self, embed: usize) -> Vec<(String, Vec<usize>)> {
        let lin = |name: &str, out: usize, inp: usize| {
            vec![
                (format!("head.{name}.weight"), vec![out, inp]),
                (format!("head.{name}.bias"), vec![out]),
            ]
        };
        match *self {
            HeadSpec::None => Vec::new(),
            HeadSpec::Classification { classes } => lin("cls", classes, embed),
            HeadSpec::Rotation => lin("rotation", 4, embed),
            HeadSpec::RelLoc => lin("relloc", 8, 2 * embed),
            HeadSpec::Moco { hidden, out } => [lin("moco.fc1", hidden, embed), lin("moco.fc2", out, hidden)].concat(),
            HeadSpec::Swav { hidden, out, prototypes } => {
                let mut v = [lin("swav.fc1", hidden, embed), lin("swav.fc2", out, hidden)].concat();
                v.push(("head.swav.prototypes".into(), vec![prototypes, out]));
                v
            }
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit-norm prototype rows.
    pub fn init(&self, embed: usize, seed: u64) -> ParamSet<f32> {
        let mut params = ParamSet::new();
        for (name, shape) in self.param_shapes(embed) {
            let n: usize = shape.iter().product();
            let mut rng = rng_from_seed(derive_seed(seed, &name));
            let data: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.ends_with(".prototypes") {
                let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
                let mut d: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                for row in d.chunks_mut(shape[1]) {
                    let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                d
            } else {
                let bound = 1.0 / (shape[1] as f32).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::from_vec(&shape, data).expect("shape from spec"));
        }
        params
    }
}

/// Copy every backbone tensor (running statistics included) from `src` and
/// attach freshly initialized head tensors drawn from `seed`.
pub fn transfer_weights(src: &Checkpoint, head: &HeadSpec, seed: u64) -> Result<Checkpoint> {
    let config = BackboneConfig::from_meta(src).map_err(|e| Error::Transfer(e.to_string()))?;
    let net = Backbone::new(config.clone())?;
    let mut tensors = ParamSet::new();
    for (name, shape) in net.param_shapes() {
        let t = src
            .tensors
            .get(&name)
            .map_err(|_| Error::Transfer(format!("source lacks backbone tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Transfer(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        tensors.insert(name, t.clone());
    }
    tensors.extend(head.init(config.embedding_dim(), seed));
    let mut out = Checkpoint::new(tensors);
    config.write_meta(&mut out);
    Ok(out)
}
