//! Experiment manifests and the runs they describe.
//!
//! A manifest is a TOML file with flat sections:
//!
//! ```toml
//! name = "scratch-in-lung"
//! output_dir = "runs"
//! global_seed = 0
//! profile = "desk"
//!
//! [dataset]
//! source = "phantom"        # or "directory" with `path = ...`
//! phantom_mode = "in_lung"
//! n_samples = 400
//! side = 64
//!
//! [curriculum]
//! sequence = ["relloc", "swav"]
//!
//! [task.swav]
//! full_epochs = 5
//! prototypes = 16
//!
//! [attention]
//! cam_clamp = true
//!
//! [single_task_acc]
//! relloc = 83.62
//! swav = 83.97
//! ```
//!
//! Seeds come from named streams of `global_seed`: `data.gen_phantom`,
//! `data.make_split`, `backbone.init`, `curriculum.step.<i>` and
//! `curriculum.downstream`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Deserialize;

use crate::attention::{inverse_segment, lung_only, mean_ail, AilOutcome, AttentionConfig, LungMask, MeanAil};
use crate::backbone::{init_backbone, BackboneConfig};
use crate::checkpoint::load_checkpoint;
use crate::classify::{predict_dataset, predictions_csv, Classifier};
use crate::curriculum::{
    is_curriculum_order, lr_search, run_curriculum, transfer_for_step, Criterion, CurriculumSpec, InitSource,
    LrSearchResult, Profile, StepData, StepSpec, StepTask,
};
use crate::data::{
    compute_class_weights, gen_phantom, load_dataset, load_masks, make_split, ClassMode, DataSource, Dataset,
    DatasetSpec, PhantomConfig, PhantomMode,
};
use crate::error::{Error, Result, ResultExt};
use crate::optim::OptimizerKind;
use crate::rng::SeedStream;
use crate::ssl::{PretextConfig, TaskId};

pub const SEED_ENV: &str = "CURRICUBENCH_SEED";
pub const RESULTS_FILE: &str = "results.csv";
pub const CONFOUND_FILE: &str = "confound.csv";
pub const RESULTS_HEADER: &str = "run_id,pretrain_sequence,is_curriculum,val_balanced_acc,mean_ail,wall_clock_s";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: String,
    output_dir: PathBuf,
    #[serde(default)]
    global_seed: u64,
    profile: Option<String>,
    dataset: RawDataset,
    #[serde(default)]
    backbone: RawBackbone,
    #[serde(default)]
    curriculum: RawCurriculum,
    #[serde(default)]
    task: BTreeMap<String, RawTask>,
    #[serde(default)]
    attention: RawAttention,
    #[serde(default)]
    single_task_acc: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    source: String,
    path: Option<PathBuf>,
    side: Option<usize>,
    split_fraction: Option<f64>,
    class_mode: Option<String>,
    phantom_mode: Option<String>,
    n_samples: Option<usize>,
    noise_sigma: Option<f64>,
    /// Pins the phantom regardless of `global_seed`.
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackbone {
    in_channels: Option<usize>,
    stage_widths: Option<Vec<usize>>,
    blocks_per_stage: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCurriculum {
    #[serde(default)]
    sequence: Vec<String>,
    /// `scratch` or a checkpoint directory.
    init: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    batch_size: Option<usize>,
    lr_candidates: Option<Vec<f64>>,
    search_epochs: Option<usize>,
    full_epochs: Option<usize>,
    optimizer: Option<String>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    trust_coeff: Option<f64>,
    criterion: Option<String>,
    // moco and swav
    temperature: Option<f64>,
    hidden: Option<usize>,
    out: Option<usize>,
    // moco
    queue_size: Option<usize>,
    encoder_momentum: Option<f64>,
    // swav
    prototypes: Option<usize>,
    epsilon: Option<f64>,
    sinkhorn_iters: Option<usize>,
    // relloc
    gap: Option<usize>,
    jitter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttention {
    cam_clamp: Option<bool>,
    min_area_fraction: Option<f64>,
    closing_radius: Option<usize>,
}

/// Values that take precedence over the manifest file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ManifestOverrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
}

impl ManifestOverrides {
    /// Reads the seed from `CURRICUBENCH_SEED` when set.
    pub fn from_env() -> Result<Self> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?,
            ),
            Err(_) => None,
        };
        Ok(Self { seed, profile: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub name: String,
    pub dataset: DatasetSpec,
    pub curriculum: CurriculumSpec,
    pub attention: AttentionConfig,
    pub output_dir: PathBuf,
    pub global_seed: u64,
    pub profile: Profile,
    /// Single-task accuracies used to decide whether a sequence is a
    /// curriculum.
    pub single_task_acc: BTreeMap<TaskId, f64>,
}

fn parse_opt<T: FromStr<Err = Error>>(v: Option<&String>) -> Result<Option<T>> {
    v.map(|s| s.parse()).transpose()
}

fn reject_keys(task: &str, keys: &[(&str, bool)]) -> Result<()> {
    match keys.iter().find(|(_, set)| *set) {
        Some((k, _)) => Err(Error::Config(format!("[task.{task}] does not take `{k}`"))),
        None => Ok(()),
    }
}

impl RawTask {
    fn check_keys(&self, task: StepTask) -> Result<()> {
        let name = task.as_str();
        let moco = [
            ("queue_size", self.queue_size.is_some()),
            ("encoder_momentum", self.encoder_momentum.is_some()),
        ];
        let swav = [
            ("prototypes", self.prototypes.is_some()),
            ("epsilon", self.epsilon.is_some()),
            ("sinkhorn_iters", self.sinkhorn_iters.is_some()),
        ];
        let relloc = [("gap", self.gap.is_some()), ("jitter", self.jitter.is_some())];
        let projection = [
            ("temperature", self.temperature.is_some()),
            ("hidden", self.hidden.is_some()),
            ("out", self.out.is_some()),
        ];
        match task {
            StepTask::Pretext(TaskId::Moco) => {
                reject_keys(name, &swav)?;
                reject_keys(name, &relloc)
            }
            StepTask::Pretext(TaskId::Swav) => {
                reject_keys(name, &moco)?;
                reject_keys(name, &relloc)
            }
            StepTask::Pretext(TaskId::RelLoc) => {
                reject_keys(name, &moco)?;
                reject_keys(name, &swav)?;
                reject_keys(name, &projection)
            }
            StepTask::Pretext(TaskId::Rotation) | StepTask::Classification => {
                reject_keys(name, &moco)?;
                reject_keys(name, &swav)?;
                reject_keys(name, &relloc)?;
                reject_keys(name, &projection)
            }
        }
    }

    fn apply_step(&self, step: &mut StepSpec) -> Result<()> {
        if let Some(v) = self.batch_size {
            step.batch_size = v;
        }
        if let Some(v) = &self.lr_candidates {
            step.lr_candidates = v.clone();
        }
        if let Some(v) = self.search_epochs {
            step.search_epochs = v;
        }
        if let Some(v) = self.full_epochs {
            step.full_epochs = v;
        }
        if let Some(v) = parse_opt::<OptimizerKind>(self.optimizer.as_ref())? {
            step.optimizer.kind = v;
        }
        if let Some(v) = self.momentum {
            step.optimizer.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            step.optimizer.weight_decay = v;
        }
        if let Some(v) = self.trust_coeff {
            step.optimizer.trust_coeff = v;
        }
        if let Some(v) = parse_opt::<Criterion>(self.criterion.as_ref())? {
            step.criterion = Some(v);
        }
        Ok(())
    }

    fn apply_pretext(&self, task: StepTask, cfg: &mut PretextConfig) {
        match task {
            StepTask::Pretext(TaskId::Moco) => {
                let m = &mut cfg.moco;
                m.temperature = self.temperature.unwrap_or(m.temperature);
                m.hidden = self.hidden.unwrap_or(m.hidden);
                m.out = self.out.unwrap_or(m.out);
                m.queue_size = self.queue_size.unwrap_or(m.queue_size);
                m.encoder_momentum = self.encoder_momentum.unwrap_or(m.encoder_momentum);
            }
            StepTask::Pretext(TaskId::Swav) => {
                let s = &mut cfg.swav;
                s.temperature = self.temperature.unwrap_or(s.temperature);
                s.hidden = self.hidden.unwrap_or(s.hidden);
                s.out = self.out.unwrap_or(s.out);
                s.prototypes = self.prototypes.unwrap_or(s.prototypes);
                s.epsilon = self.epsilon.unwrap_or(s.epsilon);
                s.sinkhorn_iters = self.sinkhorn_iters.unwrap_or(s.sinkhorn_iters);
            }
            StepTask::Pretext(TaskId::RelLoc) => {
                cfg.relloc.gap = self.gap.unwrap_or(cfg.relloc.gap);
                cfg.relloc.jitter = self.jitter.unwrap_or(cfg.relloc.jitter);
            }
            _ => {}
        }
    }
}

fn check_range(what: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::Config(format!("{what} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl ExperimentManifest {
    pub fn load(path: &Path, overrides: &ManifestOverrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides).context(|| format!("manifest {}", path.display()))
    }

    pub fn from_toml(text: &str, overrides: &ManifestOverrides) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if raw.name.trim().is_empty() {
            return Err(Error::Config("manifest name is empty".into()));
        }
        let global_seed = overrides.seed.unwrap_or(raw.global_seed);
        let profile = match overrides.profile {
            Some(p) => p,
            None => parse_opt::<Profile>(raw.profile.as_ref())?.unwrap_or_default(),
        };
        let seeds = SeedStream::new(global_seed);

        let d = &raw.dataset;
        let side = d.side.unwrap_or(64);
        let class_mode = parse_opt::<ClassMode>(d.class_mode.as_ref())?.unwrap_or(ClassMode::TwoClass);
        let source = match d.source.trim().to_ascii_lowercase().as_str() {
            "phantom" => {
                if d.path.is_some() {
                    return Err(Error::Config("a phantom dataset takes no `path`".into()));
                }
                DataSource::Phantom(PhantomConfig {
                    n_samples: d.n_samples.unwrap_or(400),
                    side,
                    mode: parse_opt::<PhantomMode>(d.phantom_mode.as_ref())?.unwrap_or(PhantomMode::SignalInLung),
                    noise_sigma: d.noise_sigma.unwrap_or(8.0),
                    seed: d.seed.unwrap_or_else(|| seeds.seed("data.gen_phantom")),
                    class_mode,
                })
            }
            "directory" => {
                if d.phantom_mode.is_some() || d.n_samples.is_some() || d.noise_sigma.is_some() || d.seed.is_some() {
                    return Err(Error::Config("phantom keys given for a directory dataset".into()));
                }
                DataSource::Directory(
                    d.path
                        .clone()
                        .ok_or_else(|| Error::Config("a directory dataset needs `path`".into()))?,
                )
            }
            other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
        };
        let dataset = DatasetSpec {
            source,
            side,
            split_fraction: d.split_fraction.unwrap_or(0.8),
            seed: seeds.seed("data.make_split"),
            class_mode,
        };
        dataset.validate()?;
        if let DataSource::Phantom(p) = &dataset.source {
            p.validate()?;
        }

        let defaults = BackboneConfig::default();
        let backbone = BackboneConfig {
            in_channels: raw.backbone.in_channels.unwrap_or(defaults.in_channels),
            stage_widths: raw.backbone.stage_widths.clone().unwrap_or(defaults.stage_widths),
            blocks_per_stage: raw.backbone.blocks_per_stage.unwrap_or(defaults.blocks_per_stage),
        };

        let sequence = raw
            .curriculum
            .sequence
            .iter()
            .map(|s| s.parse::<TaskId>())
            .collect::<Result<Vec<_>>>()?;
        let mut tasks = BTreeMap::new();
        for (name, t) in &raw.task {
            let task: StepTask = name.parse().map_err(|_| Error::Config(format!("unknown section [task.{name}]")))?;
            t.check_keys(task)?;
            // sections for tasks outside the sequence must still be valid
            let mut probe = StepSpec::for_task(task, profile, 0);
            t.apply_step(&mut probe)?;
            probe.validate()?;
            tasks.insert(task, t);
        }
        let mut pretext = PretextConfig::default();
        for (task, t) in &tasks {
            t.apply_pretext(*task, &mut pretext);
        }
        let mut steps = Vec::with_capacity(sequence.len());
        for (i, &t) in sequence.iter().enumerate() {
            let task = StepTask::Pretext(t);
            let mut step = StepSpec::for_task(task, profile, seeds.seed(&format!("curriculum.step.{i}")));
            if let Some(raw_task) = tasks.get(&task) {
                raw_task.apply_step(&mut step)?;
            }
            steps.push(step);
        }
        let mut downstream = StepSpec::for_task(StepTask::Classification, profile, seeds.seed("curriculum.downstream"));
        if let Some(raw_task) = tasks.get(&StepTask::Classification) {
            raw_task.apply_step(&mut downstream)?;
        }
        let init = match raw.curriculum.init.as_deref().map(str::trim) {
            None | Some("scratch") => InitSource::Scratch,
            Some(p) => InitSource::ExternalCheckpoint(PathBuf::from(p)),
        };
        let curriculum = CurriculumSpec {
            steps,
            downstream,
            init,
            backbone,
            pretext,
            seed: seeds.seed("backbone.init"),
        };
        curriculum.validate()?;
        let m = &curriculum.pretext.moco;
        check_range("moco temperature", m.temperature, 1e-3, 10.0)?;
        check_range("moco encoder_momentum", m.encoder_momentum, 0.0, 1.0)?;
        let s = &curriculum.pretext.swav;
        check_range("swav temperature", s.temperature, 1e-3, 10.0)?;
        check_range("swav epsilon", s.epsilon, 1e-3, 10.0)?;
        if m.queue_size == 0 || s.prototypes < 2 || s.sinkhorn_iters == 0 {
            return Err(Error::Config(
                "queue_size, prototypes and sinkhorn_iters must be positive (prototypes >= 2)".into(),
            ));
        }

        let mut attention = AttentionConfig::for_side(side);
        if let Some(v) = raw.attention.cam_clamp {
            attention.cam_clamp = v;
        }
        if let Some(v) = raw.attention.min_area_fraction {
            check_range("min_area_fraction", v, 0.0, 1.0)?;
            attention.min_area_fraction = v;
        }
        if let Some(v) = raw.attention.closing_radius {
            attention.closing_radius = v;
        }

        let single_task_acc = raw
            .single_task_acc
            .iter()
            .map(|(k, &v)| {
                check_range(&format!("single_task_acc.{k}"), v, 0.0, 100.0)?;
                Ok((k.parse::<TaskId>()?, v))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        Ok(Self {
            name: raw.name.trim().to_string(),
            dataset,
            curriculum,
            attention,
            output_dir: raw.output_dir,
            global_seed,
            profile,
            single_task_acc,
        })
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, self.global_seed)
    }

    pub fn sequence(&self) -> Vec<TaskId> {
        self.curriculum.sequence()
    }

    /// Whether the pretraining sequence is a curriculum: at least two steps
    /// with strictly increasing single-task accuracy. False when any
    /// accuracy is unknown.
    pub fn is_curriculum(&self) -> bool {
        let seq = self.sequence();
        seq.len() >= 2 && is_curriculum_order(&seq, &self.single_task_acc).unwrap_or(false)
    }
}

/// How images are altered before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageVariant {
    Raw,
    /// Background zeroed.
    LungOnly,
    /// Lungs zeroed.
    Inverse,
}

impl ImageVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageVariant::Raw => "raw",
            ImageVariant::LungOnly => "lung_only",
            ImageVariant::Inverse => "inverse",
        }
    }
}

impl fmt::Display for ImageVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Train/validation data with masks, ready for a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub masks: BTreeMap<String, LungMask>,
    pub mode: ClassMode,
}

impl PreparedData {
    pub fn step_data(&self) -> Result<StepData<'_>> {
        Ok(StepData {
            train: &self.train,
            val: &self.val,
            mode: self.mode,
            weights: compute_class_weights(&self.train.labels(), self.mode)?,
        })
    }
}

fn apply_variant(ds: &Dataset, masks: &BTreeMap<String, LungMask>, variant: ImageVariant) -> Result<Dataset> {
    if variant == ImageVariant::Raw {
        return Ok(ds.clone());
    }
    ds.map_pixels(|s| {
        let m = masks
            .get(&s.id)
            .ok_or_else(|| Error::Mask(format!("no lung mask for {}", s.id)))?;
        match variant {
            ImageVariant::LungOnly => lung_only(&s.pixels, m),
            _ => inverse_segment(&s.pixels, m),
        }
    })
}

/// Generate or load the dataset, apply `variant`, and split it.
pub fn prepare_data(spec: &DatasetSpec, variant: ImageVariant) -> Result<PreparedData> {
    let (ds, masks) = match &spec.source {
        DataSource::Phantom(cfg) => gen_phantom(cfg)?,
        DataSource::Directory(dir) => {
            let ds = load_dataset(spec)?;
            let masks = load_masks(dir, &ds)?;
            (ds, masks)
        }
    };
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let ds = apply_variant(&ds, &masks, variant)?;
    let (train, val) = make_split(&ds, spec.split_fraction, spec.seed)?;
    Ok(PreparedData {
        train,
        val,
        masks,
        mode: spec.class_mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub run_id: String,
    pub pretrain_sequence: Vec<TaskId>,
    pub is_curriculum: bool,
    /// Percent.
    pub val_balanced_acc: f64,
    /// Percent.
    pub mean_ail: f64,
    pub wall_clock_s: f64,
}

pub fn join_sequence(seq: &[TaskId]) -> String {
    seq.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
}

pub fn parse_sequence(s: &str) -> Result<Vec<TaskId>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split('+').map(str::parse).collect()
}

impl ResultsRow {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(',') {
            return Err(Error::Format(format!("bad run id {:?}", self.run_id)));
        }
        for (what, v) in [("val_balanced_acc", self.val_balanced_acc), ("mean_ail", self.mean_ail)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Format(format!("{what} = {v} is not a percentage")));
            }
        }
        if !(self.wall_clock_s >= 0.0) {
            return Err(Error::Format(format!("wall_clock_s = {}", self.wall_clock_s)));
        }
        Ok(())
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.3}",
            self.run_id,
            join_sequence(&self.pretrain_sequence),
            self.is_curriculum,
            self.val_balanced_acc,
            self.mean_ail,
            self.wall_clock_s
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("expected 6 fields, got {}", f.len())));
        }
        let num = |what: &str, s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("{what}: {s:?} is not a number")))
        };
        let row = Self {
            run_id: f[0].to_string(),
            pretrain_sequence: parse_sequence(f[1]).map_err(|e| Error::Format(e.to_string()))?,
            is_curriculum: f[2]
                .parse()
                .map_err(|_| Error::Format(format!("is_curriculum: {:?} is not a bool", f[2])))?,
            val_balanced_acc: num("val_balanced_acc", f[3])?,
            mean_ail: num("mean_ail", f[4])?,
            wall_clock_s: num("wall_clock_s", f[5])?,
        };
        row.validate()?;
        Ok(row)
    }
}

/// Append one row, writing the header first if the file is new. Existing
/// rows are never rewritten.
pub fn append_results(path: &Path, row: &ResultsRow) -> Result<()> {
    row.validate()?;
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match text.lines().next() {
            Some(h) if h.trim() == RESULTS_HEADER => {}
            None => {}
            Some(h) => return Err(Error::Format(format!("{}: unexpected header {h:?}", path.display()))),
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_csv_line());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Train the manifest's curriculum on `variant` images and score the final
/// classifier on the validation split. Checkpoints, step logs, per-image
/// AIL and predictions go under `output_dir/<run_id>`; nothing is appended
/// to a results file.
pub fn run_variant(manifest: &ExperimentManifest, variant: ImageVariant) -> Result<ResultsRow> {
    let start = Instant::now();
    let run_id = match variant {
        ImageVariant::Raw => manifest.run_id(),
        v => format!("{}-{v}", manifest.run_id()),
    };
    let inner = || -> Result<ResultsRow> {
        let data = prepare_data(&manifest.dataset, variant)?;
        let step_data = data.step_data()?;
        let run_dir = manifest.output_dir.join(&run_id);
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let result = run_curriculum(&manifest.curriculum, &step_data, Some(&run_dir))?;
        let model = Classifier::from_checkpoint(result.final_checkpoint().clone())?;
        let (preds, logits) = predict_dataset(&model, &data.val)?;
        write_file(
            &run_dir.join("predictions.csv"),
            &predictions_csv(&data.val, &preds, &logits, data.mode),
        )?;
        let ail = mean_ail(&model, &data.val, &data.masks, manifest.attention.cam_clamp)?;
        write_file(&run_dir.join("ail.csv"), &ail.to_csv())?;
        // alternative aggregate over correctly classified images only
        let labels = data.val.class_indices(data.mode)?;
        let correct: BTreeMap<String, AilOutcome> = data
            .val
            .samples
            .iter()
            .zip(preds.iter().zip(&labels))
            .filter(|(_, (p, l))| p == l)
            .filter_map(|(s, _)| ail.per_image.get(&s.id).map(|o| (s.id.clone(), o.clone())))
            .collect();
        let correct_mean = MeanAil::from_outcomes(correct).map_or(String::new(), |m| format!("{:.9}", m.mean));
        write_file(
            &run_dir.join("ail_summary.csv"),
            &format!("subset,mean_ail\nall,{:.9}\ncorrect,{correct_mean}\n", ail.mean),
        )?;
        Ok(ResultsRow {
            run_id: run_id.clone(),
            pretrain_sequence: manifest.sequence(),
            is_curriculum: manifest.is_curriculum(),
            val_balanced_acc: 100.0 * result.val_balanced_accuracy(),
            mean_ail: 100.0 * ail.mean,
            wall_clock_s: start.elapsed().as_secs_f64(),
        })
    };
    inner().context(|| format!("run {run_id}"))
}

/// Full experiment: train, score, and append the row to
/// `output_dir/results.csv`.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<ResultsRow> {
    let row = run_variant(manifest, ImageVariant::Raw)?;
    append_results(&manifest.output_dir.join(RESULTS_FILE), &row)?;
    Ok(row)
}

/// Train on lung-only and on inverse-segmented images; both rows go to
/// `output_dir/confound.csv`.
pub fn run_confound(manifest: &ExperimentManifest) -> Result<(ResultsRow, ResultsRow)> {
    let masked = run_variant(manifest, ImageVariant::LungOnly)?;
    let inverse = run_variant(manifest, ImageVariant::Inverse)?;
    let path = manifest.output_dir.join(CONFOUND_FILE);
    append_results(&path, &masked)?;
    append_results(&path, &inverse)?;
    Ok((masked, inverse))
}

/// Learning-rate search for one step of the manifest, starting from the
/// scratch (or external) initialization.
pub fn run_lr_search(manifest: &ExperimentManifest, task: StepTask) -> Result<LrSearchResult> {
    let c = &manifest.curriculum;
    let step = if task == StepTask::Classification {
        &c.downstream
    } else {
        c.steps
            .iter()
            .find(|s| s.task == task)
            .ok_or_else(|| Error::Config(format!("{task} is not in the manifest sequence")))?
    };
    let data = prepare_data(&manifest.dataset, ImageVariant::Raw)?;
    let step_data = data.step_data()?;
    let init = match &c.init {
        InitSource::Scratch => init_backbone(&c.backbone, c.seed)?,
        InitSource::ExternalCheckpoint(p) => load_checkpoint(p)?,
    };
    let init = transfer_for_step(&init, step, &c.pretext, data.mode)?;
    lr_search(step, &init, &step_data, &c.pretext)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
output_dir = "out"
[dataset]
source = "phantom"
"#;

    fn parse(text: &str) -> Result<ExperimentManifest> {
        ExperimentManifest::from_toml(text, &ManifestOverrides::default())
    }

    #[test]
    fn minimal_manifest_is_scratch_protocol() {
        let m = parse(MINIMAL).unwrap();
        assert!(m.sequence().is_empty());
        assert!(!m.is_curriculum());
        assert_eq!(m.run_id(), "t-0");
        assert_eq!(m.curriculum.downstream.task, StepTask::Classification);
        assert_eq!(m.profile, Profile::Desk);
        assert_eq!(m.attention.closing_radius, 2);
    }

    #[test]
    fn sections_override_defaults() {
        let text = format!(
            "{MINIMAL}n_samples = 80\n[curriculum]\nsequence = [\"relloc\", \"swav\"]\n\
             [task.swav]\nprototypes = 16\nfull_epochs = 2\n[single_task_acc]\nrelloc = 83.62\nswav = 83.97\n"
        );
        let m = parse(&text).unwrap();
        assert_eq!(m.sequence(), vec![TaskId::RelLoc, TaskId::Swav]);
        assert_eq!(m.curriculum.pretext.swav.prototypes, 16);
        assert_eq!(m.curriculum.steps[1].full_epochs, 2);
        assert_eq!(m.curriculum.steps[1].optimizer.kind, OptimizerKind::Lars);
        assert!(m.is_curriculum());
    }

    #[test]
    fn seed_override_changes_every_stream() {
        let a = parse(MINIMAL).unwrap();
        let b = ExperimentManifest::from_toml(MINIMAL, &ManifestOverrides { seed: Some(5), profile: None }).unwrap();
        assert_eq!(b.global_seed, 5);
        assert_ne!(a.dataset.seed, b.dataset.seed);
        assert_ne!(a.curriculum.seed, b.curriculum.seed);
    }

    #[test]
    fn adding_a_step_keeps_earlier_seeds() {
        let one = parse(&format!("{MINIMAL}[curriculum]\nsequence = [\"moco\"]\n")).unwrap();
        let two = parse(&format!("{MINIMAL}[curriculum]\nsequence = [\"moco\", \"swav\"]\n")).unwrap();
        assert_eq!(one.curriculum.steps[0].seed, two.curriculum.steps[0].seed);
        assert_eq!(one.curriculum.downstream.seed, two.curriculum.downstream.seed);
    }

    #[test]
    fn invalid_manifests_are_config_errors() {
        for text in [
            "name = \"\"\noutput_dir = \"o\"\n[dataset]\nsource = \"phantom\"\n",
            &format!("{MINIMAL}bogus = 1\n"),
            &format!("{MINIMAL}[curriculum]\nsequence = [\"jigsaw\"]\n"),
            &format!("{MINIMAL}[task.rotation]\nqueue_size = 3\n"),
            &format!("{MINIMAL}[task.moco]\nlr_candidates = [0.5]\n"),
            &format!("{MINIMAL}[task.jigsaw]\nbatch_size = 3\n"),
            "name = \"t\"\noutput_dir = \"o\"\n[dataset]\nsource = \"directory\"\n",
        ] {
            let e = parse(text).unwrap_err();
            assert!(e.is_validation(), "{text}: {e}");
        }
    }

    #[test]
    fn results_row_round_trip() {
        let row = ResultsRow {
            run_id: "x-1".into(),
            pretrain_sequence: vec![TaskId::Moco, TaskId::Swav, TaskId::Rotation],
            is_curriculum: true,
            val_balanced_acc: 85.67,
            mean_ail: 48.63,
            wall_clock_s: 12.5,
        };
        let line = row.to_csv_line();
        assert_eq!(line, "x-1,moco+swav+rotation,true,85.670000,48.630000,12.500");
        assert_eq!(ResultsRow::from_csv_line(&line).unwrap(), row);
        let scratch = ResultsRow::from_csv_line("s-0,,false,80,40,1").unwrap();
        assert!(scratch.pretrain_sequence.is_empty());
        assert!(ResultsRow::from_csv_line("s-0,,false,180,40,1").is_err());
    }

    #[test]
    fn append_only_results() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r/results.csv");
        let row = ResultsRow::from_csv_line("a-0,moco,false,70,30,1").unwrap();
        append_results(&path, &row).unwrap();
        let first = fs::read_to_string(&path).unwrap();
        append_results(&path, &row).unwrap();
        let second = fs::read_to_string(&path).unwrap();
        assert!(second.starts_with(&first));
        assert_eq!(second.lines().count(), 3);
        assert_eq!(second.lines().next().unwrap(), RESULTS_HEADER);
    }

    #[test]
    fn variants_need_masks() {
        let ds = Dataset::new(vec![crate::data::ImageSample::new("a", crate::Grid::new(16, 16, 9u8), None).unwrap()]);
        let e = apply_variant(&ds, &BTreeMap::new(), ImageVariant::Inverse).unwrap_err();
        assert!(matches!(e.root(), Error::Mask(_)));
        assert_eq!(apply_variant(&ds, &BTreeMap::new(), ImageVariant::Raw).unwrap(), ds);
    }
}
