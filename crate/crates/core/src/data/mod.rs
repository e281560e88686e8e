//! Datasets: labelled grayscale images, stratified splits, class weights
//! and the synthetic lung phantom.

pub mod image_io;
pub mod phantom;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::attention::LungMask;
use crate::error::{Error, Result, ResultExt};
use crate::grid::{resize_u8, Grid};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

pub use phantom::{gen_phantom, PhantomConfig, PhantomMode};

pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Negative,
    Typical,
    Indeterminate,
    Atypical,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Negative,
        ClassLabel::Typical,
        ClassLabel::Indeterminate,
        ClassLabel::Atypical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Negative => "negative",
            ClassLabel::Typical => "typical",
            ClassLabel::Indeterminate => "indeterminate",
            ClassLabel::Atypical => "atypical",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        ClassLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == lower)
            .ok_or_else(|| Error::Label(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassMode {
    FourClass,
    /// Negative vs. Typical only.
    #[default]
    TwoClass,
}

impl ClassMode {
    pub fn classes(self) -> &'static [ClassLabel] {
        match self {
            ClassMode::FourClass => &ClassLabel::ALL,
            ClassMode::TwoClass => &ClassLabel::ALL[..2],
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn index_of(self, label: ClassLabel) -> Option<usize> {
        self.classes().iter().position(|&l| l == label)
    }

    pub fn label_at(self, index: usize) -> Option<ClassLabel> {
        self.classes().get(index).copied()
    }
}

impl FromStr for ClassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "two" | "two_class" | "twoclass" | "2" => Ok(ClassMode::TwoClass),
            "four" | "four_class" | "fourclass" | "4" => Ok(ClassMode::FourClass),
            other => Err(Error::Config(format!("unknown class mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Grid<u8>,
    pub label: Option<ClassLabel>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Grid<u8>, label: Option<ClassLabel>) -> Result<Self> {
        if pixels.rows() < MIN_SIDE || pixels.cols() < MIN_SIDE {
            return Err(Error::Shape(format!(
                "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                pixels.rows(),
                pixels.cols()
            )));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            label,
        })
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Grid<f32> {
        self.pixels.map(|v| f32::from(v) / 255.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Class indices under `mode`; fails on unlabeled or inactive samples.
    pub fn class_indices(&self, mode: ClassMode) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                let label = s
                    .label
                    .ok_or_else(|| Error::Label(format!("{} is unlabeled", s.id)))?;
                mode.index_of(label)
                    .ok_or_else(|| Error::Label(format!("{label} is not active in {mode:?}")))
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().filter_map(|s| s.label).collect()
    }

    /// `[n, 1, H, W]` batch in `[0, 1]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        images_to_batch(indices.iter().map(|&i| &self.samples[i].pixels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn side(&self) -> Option<usize> {
        self.samples.first().map(|s| s.pixels.rows())
    }

    pub fn map_pixels(&self, mut f: impl FnMut(&ImageSample) -> Result<Grid<u8>>) -> Result<Dataset> {
        Ok(Dataset::new(
            self.samples
                .iter()
                .map(|s| {
                    Ok(ImageSample {
                        id: s.id.clone(),
                        pixels: f(s)?,
                        label: s.label,
                    })
                })
                .collect::<Result<_>>()?,
        ))
    }
}

pub fn images_to_batch<'a>(images: impl IntoIterator<Item = &'a Grid<u8>>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::Shape(format!("mixed image sizes {s:?} and {:?}", img.shape())))
            }
            _ => {}
        }
        data.extend(img.data().iter().map(|&v| f32::from(v) / 255.0));
        n += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Empty("no images in batch".into()))?;
    Tensor::from_vec(&[n, 1, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Phantom(PhantomConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub side: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub class_mode: ClassMode,
}

impl DatasetSpec {
    pub fn directory(path: impl Into<PathBuf>) -> Self {
        Self {
            source: DataSource::Directory(path.into()),
            side: 64,
            split_fraction: 0.8,
            seed: 0,
            class_mode: ClassMode::TwoClass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < MIN_SIDE {
            return Err(Error::Config(format!("side {} below {MIN_SIDE}", self.side)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

pub const LABELS_FILE: &str = "labels.csv";
pub const MASKS_DIR: &str = "masks";

/// Read `labels.csv` (`filename,label`) and the images it names, resized to
/// `side x side`. In two-class mode other labels are dropped.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let dir = match &spec.source {
        DataSource::Directory(d) => d,
        DataSource::Phantom(cfg) => {
            let (ds, _) = gen_phantom(cfg)?;
            return Ok(ds);
        }
    };
    let labels_path = dir.join(LABELS_FILE);
    if !labels_path.is_file() {
        return Err(Error::Format(format!("{} not found", labels_path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&labels_path)
        .map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(Error::Format(format!(
            "{}: header must be `filename,label`",
            labels_path.display()
        )));
    }
    let mut samples = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
        let (file, label) = (&row[0], &row[1]);
        let label: ClassLabel = label.parse()?;
        if spec.class_mode.index_of(label).is_none() {
            continue;
        }
        let path = dir.join(file);
        let img = image_io::read_gray_image(&path).context(|| format!("loading {}", path.display()))?;
        let pixels = resize_u8(&img, spec.side, spec.side);
        samples.push(ImageSample::new(file, pixels, Some(label))?);
    }
    Ok(Dataset::new(samples))
}

/// Masks from `<dir>/masks/<filename>` for every sample that has one,
/// resized (nearest) to the sample resolution.
pub fn load_masks(dir: &Path, dataset: &Dataset) -> Result<BTreeMap<String, LungMask>> {
    let mut out = BTreeMap::new();
    for s in &dataset.samples {
        let p = dir.join(MASKS_DIR).join(&s.id);
        if p.is_file() {
            let m = image_io::read_mask_pgm(&p)?;
            let (rows, cols) = s.pixels.shape();
            let m = if m.shape() == (rows, cols) {
                m
            } else {
                Grid::from_fn(rows, cols, |r, c| m.get(r * m.rows() / rows, c * m.cols() / cols))
            };
            out.insert(s.id.clone(), m);
        }
    }
    Ok(out)
}

/// Write a dataset in the directory layout [`load_dataset`] reads.
pub fn save_dataset(dir: &Path, dataset: &Dataset, masks: Option<&BTreeMap<String, LungMask>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("filename,label\n");
    for s in &dataset.samples {
        let file = if s.id.ends_with(".pgm") { s.id.clone() } else { format!("{}.pgm", s.id) };
        image_io::write_pgm(&dir.join(&file), &s.pixels)?;
        if let Some(l) = s.label {
            labels.push_str(&format!("{file},{l}\n"));
        }
        if let Some(m) = masks.and_then(|m| m.get(&s.id)) {
            let mdir = dir.join(MASKS_DIR);
            std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            image_io::write_mask_pgm(&mdir.join(&file), m)?;
        }
    }
    let p = dir.join(LABELS_FILE);
    std::fs::write(&p, labels).map_err(|e| Error::io(&p, e))
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified split: each class contributes `round(fraction * n_c)` samples
/// to training. Indices come back in ascending order.
pub fn split_indices(labels: &[ClassLabel], fraction: f64, seed: u64) -> Result<Split> {
    if labels.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng_from_seed(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Stratify(format!("class {label} has {} sample(s)", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = (fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

pub fn make_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels = dataset
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Label(format!("{} is unlabeled", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let split = split_indices(&labels, fraction, seed)?;
    Ok((dataset.subset(&split.train), dataset.subset(&split.val)))
}

/// Inverse-frequency class weights with mean 1 over the active classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: BTreeMap<ClassLabel, f64>,
}

impl ClassWeights {
    pub fn uniform(mode: ClassMode) -> Self {
        Self {
            weights: mode.classes().iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    /// Weights indexed by class position under `mode`.
    pub fn to_vec(&self, mode: ClassMode) -> Result<Vec<f64>> {
        mode.classes()
            .iter()
            .map(|c| {
                self.weights
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::Weight(format!("no weight for {c}")))
            })
            .collect()
    }

    pub fn get(&self, label: ClassLabel) -> Option<f64> {
        self.weights.get(&label).copied()
    }
}

pub fn compute_class_weights(labels: &[ClassLabel], mode: ClassMode) -> Result<ClassWeights> {
    let classes = mode.classes();
    let counts: Vec<usize> = classes
        .iter()
        .map(|c| labels.iter().filter(|&&l| l == *c).count())
        .collect();
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Weight(format!("class {} is absent", classes[i])));
    }
    let total: usize = counts.iter().sum();
    let inverse: Vec<f64> = counts.iter().map(|&n| total as f64 / n as f64).collect();
    let mean = inverse.iter().sum::<f64>() / inverse.len() as f64;
    Ok(ClassWeights {
        weights: classes
            .iter()
            .zip(&inverse)
            .map(|(&c, &w)| (c, w / mean))
            .collect(),
    })
}
