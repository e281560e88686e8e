//! Downstream classification: weighted cross-entropy fine-tuning of the
//! backbone plus a linear head on the pooled embedding, and the metrics
//! used to judge it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::backbone::{Backbone, BackboneConfig, HeadSpec, Mode};
use crate::curriculum::{EpochRecord, StepData, StepSpec};
use crate::data::{ClassLabel, ClassMode, Dataset};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::Optimizer;
use crate::params::{Checkpoint, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::ssl::{head_linear, head_linear_backward};
use crate::tensor::{Scalar, Tensor};

pub const HEAD: &str = "head.cls";
const EVAL_CHUNK: usize = 64;

/// Mean of `w[y_i] * -log softmax(logits_i)[y_i]` over the batch.
pub fn weighted_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize], weights: &[f64]) -> Result<f64> {
    Ok(nn::cross_entropy(logits, labels, Some(weights))?.0)
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &y) in preds.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::Shape(format!("class index out of range for {classes} classes")));
            }
            counts[y][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// `None` when the class has no samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.counts[class][class] as f64 / s as f64)
    }
}

/// Mean per-class recall over classes that occur in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("balanced accuracy of no samples".into()));
    }
    let classes = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let cm = ConfusionMatrix::new(preds, labels, classes)?;
    let recalls: Vec<f64> = (0..classes).filter_map(|c| cm.recall(c)).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub per_class_recall: BTreeMap<ClassLabel, f64>,
    pub support: BTreeMap<ClassLabel, usize>,
}

impl MetricsReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], mode: ClassMode) -> Result<Self> {
        let balanced_accuracy = balanced_accuracy(preds, labels)?;
        let cm = ConfusionMatrix::new(preds, labels, mode.num_classes())?;
        let mut per_class_recall = BTreeMap::new();
        let mut support = BTreeMap::new();
        for (i, &c) in mode.classes().iter().enumerate() {
            support.insert(c, cm.support(i) as usize);
            if let Some(r) = cm.recall(i) {
                per_class_recall.insert(c, r);
            }
        }
        Ok(Self {
            balanced_accuracy,
            per_class_recall,
            support,
        })
    }
}

/// A backbone with a linear classification head over its pooled features.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: Backbone,
    ckpt: Checkpoint,
}

impl Classifier {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = BackboneConfig::from_meta(&ckpt)?;
        let w = ckpt.tensors.get(&format!("{HEAD}.weight"))?;
        if w.shape().len() != 2 || w.dim(1) != config.embedding_dim() {
            return Err(Error::Shape(format!(
                "classification head {:?} does not match embedding width {}",
                w.shape(),
                config.embedding_dim()
            )));
        }
        Ok(Self {
            net: Backbone::new(config)?,
            ckpt,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn num_classes(&self) -> usize {
        self.ckpt.tensors.get(&format!("{HEAD}.weight")).map_or(0, |w| w.dim(0))
    }

    /// `[C, K]` head weights.
    pub fn head_weight(&self) -> Result<&Tensor<f32>> {
        self.ckpt.tensors.get(&format!("{HEAD}.weight"))
    }

    /// Inference-mode feature maps `[N, K, h, w]` and logits `[N, C]`.
    pub fn forward_eval(&self, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let enc = self.net.encode(&self.ckpt.tensors, batch, Mode::Eval)?;
        let logits = head_linear(&self.ckpt.tensors, HEAD, &enc.embedding)?;
        Ok((enc.maps, logits))
    }
}

/// Labels (argmax, ties toward the smaller index) and logits for a batch.
pub fn predict(model: &Classifier, images: &Tensor<f32>) -> Result<(Vec<usize>, Tensor<f32>)> {
    let (_, logits) = model.forward_eval(images)?;
    Ok((nn::argmax_rows(&logits), logits))
}

/// Predictions for every sample of `dataset`, in chunks.
pub fn predict_dataset(model: &Classifier, dataset: &Dataset) -> Result<(Vec<usize>, Tensor<f32>)> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut preds = Vec::with_capacity(dataset.len());
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (p, l) = predict(model, &dataset.batch(chunk)?)?;
        preds.extend(p);
        parts.push(l);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok((preds, Tensor::concat_outer(&refs)?))
}

pub fn evaluate(model: &Classifier, dataset: &Dataset, mode: ClassMode) -> Result<MetricsReport> {
    let labels = dataset.class_indices(mode)?;
    let (preds, _) = predict_dataset(model, dataset)?;
    MetricsReport::from_predictions(&preds, &labels, mode)
}

/// CSV `id,true_label,pred_label,logit_0..logit_{C-1}`.
pub fn predictions_csv(dataset: &Dataset, preds: &[usize], logits: &Tensor<f32>, mode: ClassMode) -> String {
    let c = logits.dim(1);
    let mut out = String::from("id,true_label,pred_label");
    for k in 0..c {
        write!(out, ",logit_{k}").expect("string write");
    }
    out.push('\n');
    for (i, s) in dataset.samples.iter().enumerate() {
        let truth = s.label.map_or(String::new(), |l| l.to_string());
        let pred = mode.label_at(preds[i]).map_or(preds[i].to_string(), |l| l.to_string());
        write!(out, "{},{truth},{pred}", s.id).expect("string write");
        for v in &logits.data()[i * c..(i + 1) * c] {
            write!(out, ",{v:.9e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Weighted cross-entropy loss and gradients of the full classifier on one
/// training batch.
pub fn classification_loss<T: Scalar>(
    net: &Backbone,
    params: &ParamSet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, ParamSet<T>, ParamSet<T>)> {
    let enc = net.encode(params, images, Mode::Train)?;
    let logits = head_linear(params, HEAD, &enc.embedding)?;
    let (loss, dlogits) = nn::cross_entropy(&logits, labels, Some(weights))?;
    let mut grads = ParamSet::new();
    let demb = head_linear_backward(params, HEAD, &enc.embedding, &dlogits, &mut grads)?;
    net.encode_backward(params, &enc, &demb, &mut grads)?;
    Ok((loss, grads, enc.tape.running_stats()))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Checkpoint,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub log: Vec<EpochRecord>,
}

/// Shuffled minibatches for one epoch; a trailing batch of one sample is
/// dropped so batch statistics stay defined.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, &format!("shuffle.{epoch}"))));
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2 || n == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Train backbone and head end-to-end for `epochs` at a constant `lr`.
/// A classification head is attached from the step seed when `init` lacks one.
pub fn finetune(init: &Checkpoint, data: &StepData<'_>, step: &StepSpec, lr: f64, epochs: usize) -> Result<FinetuneOutcome> {
    let labels = data.train.class_indices(data.mode)?;
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateData("training data holds a single class".into()));
    }
    let val_labels = data.val.class_indices(data.mode)?;
    let weights = data.weights.to_vec(data.mode)?;
    let config = BackboneConfig::from_meta(init)?;
    let net = Backbone::new(config.clone())?;
    let mut ckpt = init.clone();
    if !ckpt.tensors.contains(&format!("{HEAD}.weight")) {
        let head = HeadSpec::Classification {
            classes: data.mode.num_classes(),
        };
        ckpt.tensors.extend(head.init(config.embedding_dim(), derive_seed(step.seed, "head")));
    }
    let mut params = ckpt.tensors.clone();
    let mut opt = Optimizer::new(step.optimizer);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(labels.len(), step.batch_size, step.seed, epoch) {
            let x = data.train.batch(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads, running) = classification_loss(&net, &params, &x, &y, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("classification loss diverged at lr {lr}")));
            }
            opt.step(&mut params, &grads, lr)?;
            params.extend(running);
            if !params.is_finite() {
                return Err(Error::Numeric(format!("parameters diverged at lr {lr}")));
            }
            total += loss * y.len() as f64;
            seen += y.len();
        }
        ckpt.tensors = params.clone();
        let model = Classifier::from_checkpoint(ckpt.clone())?;
        let (preds, _) = predict_dataset(&model, data.val)?;
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / seen.max(1) as f64,
            metric: Some(balanced_accuracy(&preds, &val_labels)?),
        });
    }
    ckpt.tensors = params;
    let model = Classifier::from_checkpoint(ckpt)?;
    let train = evaluate(&model, data.train, data.mode)?;
    let val = evaluate(&model, data.val, data.mode)?;
    Ok(FinetuneOutcome {
        model: model.into_checkpoint(),
        train,
        val,
        log,
    })
}
