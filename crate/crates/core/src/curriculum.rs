//! Sequential pretraining: every step searches a learning rate on short
//! runs, retrains from the incoming weights at the chosen rate, and hands
//! its backbone to the next step. The last step is classification.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{init_backbone, transfer_weights, Backbone, BackboneConfig, HeadSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::classify::{epoch_batches, finetune, MetricsReport};
use crate::data::{ClassMode, ClassWeights, Dataset};
use crate::error::{Error, Result, ResultExt};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::Checkpoint;
use crate::rng::{derive_seed, rng_from_seed};
use crate::ssl::moco::{moco_step, MocoState};
use crate::ssl::relloc::make_relloc_batch;
use crate::ssl::rotation::make_rotation_batch;
use crate::ssl::swav::swav_step;
use crate::ssl::{pretext_accuracy, pretext_loss, PretextBatch, PretextConfig, TaskId};

pub const LR_MIN: f64 = 0.01;
pub const LR_MAX: f64 = 0.25;
pub const DEFAULT_LR_CANDIDATES: [f64; 5] = [0.01, 0.025, 0.05, 0.1, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepTask {
    Pretext(TaskId),
    Classification,
}

impl StepTask {
    pub fn as_str(self) -> &'static str {
        match self {
            StepTask::Pretext(t) => t.as_str(),
            StepTask::Classification => "classification",
        }
    }

    pub fn head(self, pretext: &PretextConfig, mode: ClassMode) -> HeadSpec {
        match self {
            StepTask::Pretext(t) => t.head(pretext),
            StepTask::Classification => HeadSpec::Classification {
                classes: mode.num_classes(),
            },
        }
    }

    /// Classification, rotation and relative location are scored by
    /// accuracy; the contrastive tasks by loss.
    pub fn default_criterion(self) -> Criterion {
        match self {
            StepTask::Pretext(TaskId::Moco | TaskId::Swav) => Criterion::MinLoss,
            _ => Criterion::MaxTaskPerformance,
        }
    }
}

impl fmt::Display for StepTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StepTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("classification") {
            Ok(StepTask::Classification)
        } else {
            s.parse().map(StepTask::Pretext)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    MaxTaskPerformance,
    MinLoss,
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max_task_performance" | "accuracy" => Ok(Criterion::MaxTaskPerformance),
            "min_loss" | "loss" => Ok(Criterion::MinLoss),
            other => Err(Error::Config(format!("unknown search criterion {other:?}"))),
        }
    }
}

/// Epoch counts and batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Scaled down for a CPU: 3/10 epochs for pretext steps, 5/25 for
    /// classification, classification batch 32.
    #[default]
    Desk,
    /// The full training schedule: 20/30 and 80/150 epochs, batch 64.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" | "full" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub task: StepTask,
    pub batch_size: usize,
    pub lr_candidates: Vec<f64>,
    pub search_epochs: usize,
    pub full_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Overrides the task's default search criterion.
    pub criterion: Option<Criterion>,
}

impl StepSpec {
    /// Batch size, epochs and optimizer for `task` under `profile`.
    pub fn for_task(task: StepTask, profile: Profile, seed: u64) -> Self {
        let batch_size = match (task, profile) {
            (StepTask::Classification, Profile::Desk) => 32,
            (StepTask::Classification, Profile::Paper) => 64,
            (StepTask::Pretext(TaskId::RelLoc | TaskId::Moco), _) => 32,
            (StepTask::Pretext(TaskId::Rotation), _) => 16,
            (StepTask::Pretext(TaskId::Swav), _) => 8,
        };
        let (search_epochs, full_epochs) = match (task, profile) {
            (StepTask::Classification, Profile::Desk) => (5, 25),
            (StepTask::Classification, Profile::Paper) => (80, 150),
            (_, Profile::Desk) => (3, 10),
            (_, Profile::Paper) => (20, 30),
        };
        let kind = match task {
            StepTask::Pretext(TaskId::Swav) => OptimizerKind::Lars,
            _ => OptimizerKind::Sgd,
        };
        Self {
            task,
            batch_size,
            lr_candidates: DEFAULT_LR_CANDIDATES.to_vec(),
            search_epochs,
            full_epochs,
            optimizer: OptimizerConfig {
                kind,
                ..OptimizerConfig::default()
            },
            seed,
            criterion: None,
        }
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion.unwrap_or_else(|| self.task.default_criterion())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_candidates.is_empty() {
            return Err(Error::Config(format!("{}: no learning-rate candidates", self.task)));
        }
        if self.lr_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("{}: learning-rate candidates must ascend", self.task)));
        }
        if let Some(lr) = self.lr_candidates.iter().find(|lr| !(LR_MIN..=LR_MAX).contains(*lr)) {
            return Err(Error::Config(format!(
                "{}: learning rate {lr} outside [{LR_MIN}, {LR_MAX}]",
                self.task
            )));
        }
        if self.search_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{}: search epochs and batch size must be positive",
                self.task
            )));
        }
        Ok(())
    }
}

/// Datasets and label settings shared by every step of a run.
#[derive(Debug, Clone)]
pub struct StepData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub mode: ClassMode,
    pub weights: ClassWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metric: Option<f64>,
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,metric\n");
    for r in records {
        let metric = r.metric.map_or(String::new(), |m| format!("{m:.9}"));
        writeln!(out, "{},{:.9},{metric}", r.epoch, r.loss).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearchResult {
    pub candidates: Vec<f64>,
    /// NaN marks a diverged candidate.
    pub scores: Vec<f64>,
    pub chosen_lr: f64,
    pub criterion: Criterion,
}

/// Best finite score under `criterion`; ties go to the smallest rate.
pub fn select_lr(candidates: &[f64], scores: &[f64], criterion: Criterion) -> Result<f64> {
    if candidates.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].total_cmp(&candidates[b]));
    for i in order {
        let s = scores[i];
        if !s.is_finite() {
            continue;
        }
        let better = match (best, criterion) {
            (None, _) => true,
            (Some((b, _)), Criterion::MaxTaskPerformance) => s > b,
            (Some((b, _)), Criterion::MinLoss) => s < b,
        };
        if better {
            best = Some((s, candidates[i]));
        }
    }
    best.map(|(_, lr)| lr)
        .ok_or_else(|| Error::Search("every candidate produced a non-finite score".into()))
}

/// Result of training one step at a fixed rate.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Search score: accuracy or final loss depending on the criterion.
    pub score: f64,
    pub val_report: Option<MetricsReport>,
}

fn pretext_batch(task: TaskId, x: &crate::tensor::Tensor<f32>, cfg: &PretextConfig, seed: u64) -> Result<PretextBatch<f32>> {
    Ok(match task {
        TaskId::Rotation => PretextBatch::Rotation(make_rotation_batch(x, seed)?),
        TaskId::RelLoc => PretextBatch::RelLoc(make_relloc_batch(x, cfg.relloc.gap, cfg.relloc.jitter, seed)?),
        _ => return Err(Error::Task(format!("{task} builds its batches inside its step"))),
    })
}

/// Eval-mode pretext accuracy on the validation images with fixed labels.
fn pretext_val_accuracy(task: TaskId, net: &Backbone, ckpt: &Checkpoint, data: &StepData<'_>, cfg: &PretextConfig, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.val.len()).collect();
    let (mut correct, mut total) = (0, 0);
    for (i, chunk) in idx.chunks(64).enumerate() {
        let x = data.val.batch(chunk)?;
        let b = pretext_batch(task, &x, cfg, derive_seed(seed, &format!("val.{i}")))?;
        let (c, t) = pretext_accuracy(task, net, &ckpt.tensors, &b)?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn train_pretext(task: TaskId, step: &StepSpec, init: &Checkpoint, data: &StepData<'_>, cfg: &PretextConfig, lr: f64, epochs: usize) -> Result<TrainOutcome> {
    let net = Backbone::new(BackboneConfig::from_meta(init)?)?;
    let mut ckpt = init.clone();
    let mut params = init.tensors.clone();
    let mut opt = Optimizer::new(step.optimizer);
    let mut moco = match task {
        TaskId::Moco => Some(MocoState::new(cfg.moco, &params, step.batch_size)?),
        _ => None,
    };
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (mut loss_sum, mut loss_n, mut correct, mut total) = (0.0, 0usize, 0usize, 0usize);
        for (bi, batch) in epoch_batches(data.train.len(), step.batch_size, step.seed, epoch).into_iter().enumerate() {
            let x = data.train.batch(&batch)?;
            let bseed = derive_seed(step.seed, &format!("batch.{epoch}.{bi}"));
            let loss = match task {
                TaskId::Rotation | TaskId::RelLoc => {
                    let b = pretext_batch(task, &x, cfg, bseed)?;
                    let out = pretext_loss(task, &net, &params, &b, cfg)?;
                    if out.loss.is_finite() {
                        opt.step(&mut params, &out.grads, lr)?;
                        params.extend(out.running);
                    }
                    correct += out.correct;
                    total += out.total;
                    Some(out.loss)
                }
                TaskId::Moco => {
                    let state = moco.as_mut().expect("moco state");
                    moco_step(state, &net, &mut params, &mut opt, lr, &x, &cfg.augment, &mut rng_from_seed(bseed))?
                }
                TaskId::Swav => Some(swav_step(&net, &mut params, &mut opt, lr, &x, &cfg.swav, &cfg.augment, &mut rng_from_seed(bseed))?),
            };
            if let Some(l) = loss {
                if !l.is_finite() || !params.is_finite() {
                    return Err(Error::Numeric(format!("{task} diverged at lr {lr}")));
                }
                loss_sum += l * batch.len() as f64;
                loss_n += batch.len();
            }
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            metric: (total > 0).then(|| correct as f64 / total as f64),
        });
    }
    ckpt.tensors = params;
    let score = match step.criterion() {
        Criterion::MinLoss => log.last().map_or(f64::NAN, |r| r.loss),
        Criterion::MaxTaskPerformance if task.has_accuracy() => {
            pretext_val_accuracy(task, &net, &ckpt, data, cfg, derive_seed(step.seed, "val"))?
        }
        Criterion::MaxTaskPerformance => {
            return Err(Error::Config(format!("{task} has no task accuracy to maximize")));
        }
    };
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        score,
        val_report: None,
    })
}

/// Train `init` for `epochs` at `lr` and score the result.
pub fn train_step(step: &StepSpec, init: &Checkpoint, data: &StepData<'_>, cfg: &PretextConfig, lr: f64, epochs: usize) -> Result<TrainOutcome> {
    let mut out = match step.task {
        StepTask::Pretext(task) => train_pretext(task, step, init, data, cfg, lr, epochs)?,
        StepTask::Classification => {
            let f = finetune(init, data, step, lr, epochs)?;
            let score = match step.criterion() {
                Criterion::MaxTaskPerformance => f.val.balanced_accuracy,
                Criterion::MinLoss => f.log.last().map_or(f64::NAN, |r| r.loss),
            };
            TrainOutcome {
                checkpoint: f.model,
                log: f.log,
                score,
                val_report: Some(f.val),
            }
        }
    };
    out.checkpoint.set_meta("task", step.task);
    out.checkpoint.set_meta("lr", lr);
    Ok(out)
}

/// Train a fresh copy of `init` per candidate for `search_epochs`.
/// Candidates that diverge score NaN and are excluded.
pub fn lr_search(step: &StepSpec, init: &Checkpoint, data: &StepData<'_>, cfg: &PretextConfig) -> Result<LrSearchResult> {
    step.validate()?;
    let mut scores = Vec::with_capacity(step.lr_candidates.len());
    for &lr in &step.lr_candidates {
        let score = match train_step(step, init, data, cfg, lr, step.search_epochs) {
            Ok(out) => out.score,
            Err(e) if matches!(e.root(), Error::Numeric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        scores.push(score);
    }
    let criterion = step.criterion();
    let chosen_lr = select_lr(&step.lr_candidates, &scores, criterion)?;
    Ok(LrSearchResult {
        candidates: step.lr_candidates.clone(),
        scores,
        chosen_lr,
        criterion,
    })
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub task: StepTask,
    pub search: LrSearchResult,
    pub epochs: Vec<EpochRecord>,
}

impl StepLog {
    pub fn to_csv(&self) -> String {
        epoch_log_csv(&self.epochs)
    }
}

/// Search, then train for `full_epochs` from `init` at the chosen rate.
pub fn run_step(step: &StepSpec, init: &Checkpoint, data: &StepData<'_>, cfg: &PretextConfig) -> Result<(Checkpoint, StepLog, Option<MetricsReport>)> {
    let search = lr_search(step, init, data, cfg)?;
    let out = train_step(step, init, data, cfg, search.chosen_lr, step.full_epochs)
        .context(|| format!("{} at lr {}", step.task, search.chosen_lr))?;
    Ok((
        out.checkpoint,
        StepLog {
            task: step.task,
            search,
            epochs: out.log,
        },
        out.val_report,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSource {
    Scratch,
    ExternalCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSpec {
    pub steps: Vec<StepSpec>,
    pub downstream: StepSpec,
    pub init: InitSource,
    pub backbone: BackboneConfig,
    pub pretext: PretextConfig,
    /// Seed of the scratch initialization.
    pub seed: u64,
}

impl CurriculumSpec {
    pub fn sequence(&self) -> Vec<TaskId> {
        self.steps
            .iter()
            .filter_map(|s| match s.task {
                StepTask::Pretext(t) => Some(t),
                StepTask::Classification => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for s in &self.steps {
            if s.task == StepTask::Classification {
                return Err(Error::Config("classification may only be the downstream step".into()));
            }
            s.validate()?;
        }
        if self.downstream.task != StepTask::Classification {
            return Err(Error::Config("the last step must be classification".into()));
        }
        self.downstream.validate()
    }
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    /// Weights each step started from, after transfer.
    pub initial: Vec<Checkpoint>,
    /// Final weights of every step, downstream last.
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<StepLog>,
    pub val_report: MetricsReport,
}

impl CurriculumResult {
    pub fn val_balanced_accuracy(&self) -> f64 {
        self.val_report.balanced_accuracy
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("downstream checkpoint")
    }
}

/// Weights a step starts from: the backbone of `current` plus a freshly
/// initialized head for the step's task.
pub fn transfer_for_step(current: &Checkpoint, step: &StepSpec, pretext: &PretextConfig, mode: ClassMode) -> Result<Checkpoint> {
    transfer_weights(current, &step.task.head(pretext, mode), derive_seed(step.seed, "head"))
}

fn step_dir(out: &Path, index: usize, task: StepTask) -> PathBuf {
    out.join(format!("step{index}_{task}"))
}

/// Run every pretraining step and the downstream step, transferring the
/// backbone in between. With `out_dir`, each finished step's checkpoint and
/// log are written immediately, so a failure leaves the completed prefix.
pub fn run_curriculum(spec: &CurriculumSpec, data: &StepData<'_>, out_dir: Option<&Path>) -> Result<CurriculumResult> {
    spec.validate()?;
    let mut current = match &spec.init {
        InitSource::Scratch => init_backbone(&spec.backbone, spec.seed)?,
        InitSource::ExternalCheckpoint(p) => load_checkpoint(p)?,
    };
    let mut result = CurriculumResult {
        initial: Vec::new(),
        checkpoints: Vec::new(),
        logs: Vec::new(),
        val_report: MetricsReport {
            balanced_accuracy: f64::NAN,
            per_class_recall: BTreeMap::new(),
            support: BTreeMap::new(),
        },
    };
    for (i, step) in spec.steps.iter().chain([&spec.downstream]).enumerate() {
        let init = transfer_for_step(&current, step, &spec.pretext, data.mode)?;
        let (ckpt, log, report) = run_step(step, &init, data, &spec.pretext).context(|| format!("step {i} ({})", step.task))?;
        if let Some(dir) = out_dir {
            let d = step_dir(dir, i, step.task);
            save_checkpoint(&ckpt, &d)?;
            fs::write(d.join("log.csv"), log.to_csv()).map_err(|e| Error::io(d.join("log.csv"), e))?;
        }
        if let Some(r) = report {
            result.val_report = r;
        }
        result.initial.push(init);
        result.checkpoints.push(ckpt.clone());
        result.logs.push(log);
        current = ckpt;
    }
    Ok(result)
}

/// True iff single-task accuracies strictly increase along `sequence`.
pub fn is_curriculum_order(sequence: &[TaskId], single_task_acc: &BTreeMap<TaskId, f64>) -> Result<bool> {
    let accs = sequence
        .iter()
        .map(|t| single_task_acc.get(t).copied().ok_or_else(|| Error::Key(t.to_string())))
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.windows(2).all(|w| w[0] < w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_selection_rules() {
        let c = [0.01, 0.05, 0.25];
        assert_eq!(select_lr(&c, &[0.60, 0.70, 0.65], Criterion::MaxTaskPerformance).unwrap(), 0.05);
        assert_eq!(select_lr(&c, &[0.70, 0.70, 0.65], Criterion::MaxTaskPerformance).unwrap(), 0.01);
        assert_eq!(select_lr(&c, &[f64::NAN, 0.5, 0.7], Criterion::MaxTaskPerformance).unwrap(), 0.25);
        assert_eq!(select_lr(&c, &[2.0, 1.0, f64::NAN], Criterion::MinLoss).unwrap(), 0.05);
        assert!(matches!(
            select_lr(&c, &[f64::NAN; 3], Criterion::MinLoss),
            Err(Error::Search(_))
        ));
    }

    #[test]
    fn ordering_predicate() {
        let acc: BTreeMap<TaskId, f64> = [
            (TaskId::RelLoc, 83.62),
            (TaskId::Moco, 83.89),
            (TaskId::Swav, 83.97),
            (TaskId::Rotation, 84.72),
        ]
        .into();
        assert!(is_curriculum_order(&[TaskId::Moco, TaskId::Swav, TaskId::Rotation], &acc).unwrap());
        assert!(!is_curriculum_order(&[TaskId::Moco, TaskId::RelLoc], &acc).unwrap());
        assert!(is_curriculum_order(&[TaskId::Swav], &acc).unwrap());
        let partial: BTreeMap<TaskId, f64> = [(TaskId::Moco, 1.0)].into();
        assert!(matches!(
            is_curriculum_order(&[TaskId::Moco, TaskId::Swav], &partial),
            Err(Error::Key(_))
        ));
    }

    #[test]
    fn step_validation() {
        let mut s = StepSpec::for_task(StepTask::Classification, Profile::Desk, 0);
        s.validate().unwrap();
        s.lr_candidates = vec![0.1, 0.05];
        assert!(s.validate().is_err());
        s.lr_candidates = vec![0.5];
        assert!(s.validate().is_err());
        s.lr_candidates = vec![];
        assert!(s.validate().is_err());
    }

    #[test]
    fn profile_defaults() {
        let s = StepSpec::for_task(StepTask::Pretext(TaskId::Swav), Profile::Paper, 0);
        assert_eq!((s.batch_size, s.search_epochs, s.full_epochs), (8, 20, 30));
        assert_eq!(s.optimizer.kind, OptimizerKind::Lars);
        assert_eq!(s.optimizer.momentum, 0.9);
        let c = StepSpec::for_task(StepTask::Classification, Profile::Desk, 0);
        assert_eq!((c.search_epochs, c.full_epochs), (5, 25));
        assert_eq!(c.criterion(), Criterion::MaxTaskPerformance);
        assert_eq!(StepSpec::for_task(StepTask::Pretext(TaskId::Moco), Profile::Desk, 0).criterion(), Criterion::MinLoss);
    }
}
