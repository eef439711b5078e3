//! Bias-controlled datasets: the 2-D toy configurations, colored MNIST, and
//! the random subset used to train the biased extractor.
//!
//! Group labels live on [`LabeledDataset`] for evaluation only. Training code
//! receives a [`TrainView`], which carries inputs and class labels and nothing
//! else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}")]
    BadMagic { path: PathBuf, found: u32 },
    #[error("{path}: truncated IDX file, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("palette has {colors} colors but the dataset has {classes} classes")]
    PaletteMismatch { colors: usize, classes: usize },
    #[error("subset of size {size} requested from {n} samples")]
    EmptySubset { size: usize, n: usize },
    #[error("subset drops class {class} entirely")]
    DroppedClass { class: usize },
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("group labels are not available on this dataset")]
    GroupsWithheld,
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Inputs, class labels and (optionally) evaluation-only group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f32>,
    labels: Vec<usize>,
    groups: Option<Vec<usize>>,
    num_classes: usize,
    num_groups: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f32>,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
        num_classes: usize,
        num_groups: usize,
        split: Split,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if labels.len() != n {
            return Err(DataError::Malformed(format!(
                "{} labels for {n} inputs",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(DataError::Malformed("empty dataset".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Malformed("non-finite input value".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: y,
                    num_classes,
                });
            }
            counts[y] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyClass { class });
        }
        if let Some(g) = &groups {
            if g.len() != n {
                return Err(DataError::Malformed(format!(
                    "{} group labels for {n} inputs",
                    g.len()
                )));
            }
            if let Some(&bad) = g.iter().find(|&&v| v >= num_groups) {
                return Err(DataError::Malformed(format!(
                    "group {bad} out of range for {num_groups} groups"
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            groups,
            num_classes,
            num_groups,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> ArrayView2<'_, f32> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Result<&[usize]> {
        self.groups.as_deref().ok_or(DataError::GroupsWithheld)
    }

    pub fn has_groups(&self) -> bool {
        self.groups.is_some()
    }

    /// The only view handed to training code.
    pub fn train_view(&self) -> TrainView<'_, f32> {
        TrainView {
            inputs: self.inputs.view(),
            labels: &self.labels,
            num_classes: self.num_classes,
        }
    }

    /// Copy with group labels removed.
    pub fn withhold_groups(&self) -> Self {
        Self {
            groups: None,
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.groups
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            self.num_classes,
            self.num_groups,
            self.split,
        )
    }
}

/// Inputs and class labels only.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a, T> {
    inputs: ArrayView2<'a, T>,
    labels: &'a [usize],
    num_classes: usize,
}

impl<'a, T> TrainView<'a, T> {
    pub fn new(inputs: ArrayView2<'a, T>, labels: &'a [usize], num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(DataError::Malformed(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.nrows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'a, T> {
        self.inputs
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Train, validation and test splits of one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

// ---------------------------------------------------------------------------
// Toy data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyCase {
    /// Bias coordinate strongly correlated with the class.
    A,
    /// Bias coordinate independent of the class.
    B,
    /// Case (a) rotated so each input coordinate mixes core and bias.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub case: ToyCase,
    pub n_per_class: usize,
    /// Fraction of training samples whose bias sign disagrees with the class.
    pub conflict_ratio: f64,
    pub core_shift: f64,
    pub core_std: f64,
    pub bias_shift: f64,
    pub bias_std: f64,
    pub rotation_deg: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            case: ToyCase::A,
            n_per_class: 2000,
            conflict_ratio: 0.1,
            core_shift: 0.75,
            core_std: 1.0,
            bias_shift: 2.5,
            bias_std: 0.5,
            rotation_deg: 45.0,
            val_per_class: 500,
            test_per_class: 5000,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if !(self.conflict_ratio > 0.0 && self.conflict_ratio < 1.0) {
            return bad("conflict_ratio must lie in (0, 1)");
        }
        if self.n_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class sample counts must be positive");
        }
        if !(self.core_std > 0.0 && self.bias_std > 0.0) {
            return bad("standard deviations must be positive");
        }
        if ![self.core_shift, self.bias_shift, self.rotation_deg]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("shifts and rotation must be finite");
        }
        Ok(())
    }
}

/// Two classes on axes `(z_c, z_s)`; the group label is the sign of the
/// latent bias attribute (1 for positive), so aligned samples have `g == y`.
pub fn gen_toy(cfg: &ToyConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = toy_split(
        cfg,
        cfg.n_per_class,
        cfg.conflict_ratio,
        Split::Train,
        &mut rng,
    )?;
    let val = toy_split(
        cfg,
        cfg.val_per_class,
        cfg.conflict_ratio,
        Split::Val,
        &mut rng,
    )?;
    let test = toy_split(cfg, cfg.test_per_class, 0.5, Split::Test, &mut rng)?;
    Ok(DatasetBundle { train, val, test })
}

fn toy_split(
    cfg: &ToyConfig,
    per_class: usize,
    rho: f64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let n = 2 * per_class;
    let core =
        Normal::new(0.0, cfg.core_std).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let bias =
        Normal::new(0.0, cfg.bias_std).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let angle = match cfg.case {
        ToyCase::C => cfg.rotation_deg.to_radians(),
        _ => 0.0,
    };
    let (sin, cos) = angle.sin_cos();
    let mut inputs = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let sign_y = if y == 1 { 1.0 } else { -1.0 };
        // One uniform draw per sample in every case keeps the streams aligned.
        let u: f64 = rng.gen();
        let sign_s = match cfg.case {
            ToyCase::B => {
                if u < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            ToyCase::A | ToyCase::C => {
                if u < rho {
                    -sign_y
                } else {
                    sign_y
                }
            }
        };
        let zc = sign_y * cfg.core_shift + core.sample(rng);
        let zs = sign_s * cfg.bias_shift + bias.sample(rng);
        inputs[[i, 0]] = (cos * zc - sin * zs) as f32;
        inputs[[i, 1]] = (sin * zc + cos * zs) as f32;
        labels.push(y);
        groups.push(usize::from(sign_s > 0.0));
    }
    LabeledDataset::new(inputs, labels, Some(groups), 2, 2, split)
}

// ---------------------------------------------------------------------------
// IDX / MNIST

/// Unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx_bytes(&bytes, path)
}

/// `path` is used for error messages only.
pub fn parse_idx_bytes(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let truncated = |expected: usize| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = bytes[3] as usize;
    if magic != 0x0000_0801 && magic != 0x0000_0803 {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims.iter().product::<usize>();
    if bytes.len() < header + count {
        return Err(truncated(header + count));
    }
    if bytes.len() > header + count {
        return Err(DataError::Malformed(format!(
            "{}: {} trailing bytes after IDX payload",
            path.display(),
            bytes.len() - header - count
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Raw MNIST images (n × 784 grayscale bytes) and labels.
#[derive(Debug, Clone)]
pub struct MnistPart {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl MnistPart {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Loads `train` or `t10k` images and labels from `dir`. Both the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings are
/// accepted (uncompressed).
pub fn load_mnist_part(dir: &Path, prefix: &str) -> Result<MnistPart> {
    let find = |kind: &str, idx: &str| -> Result<PathBuf> {
        let candidates = [
            format!("{prefix}-{kind}-{idx}-ubyte"),
            format!("{prefix}-{kind}.{idx}-ubyte"),
        ];
        candidates
            .iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| DataError::Io {
                path: dir.join(&candidates[0]),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            })
    };
    let images = parse_idx(&find("images", "idx3")?)?;
    let labels = parse_idx(&find("labels", "idx1")?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(DataError::Malformed(format!(
            "MNIST {prefix}: image dims {:?} do not match label dims {:?}",
            images.dims, labels.dims
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&y| y > 9) {
        return Err(DataError::Malformed(format!(
            "MNIST {prefix}: label {bad} out of range"
        )));
    }
    Ok(MnistPart {
        rows: images.dims[1],
        cols: images.dims[2],
        images: images.data,
        labels: labels.data,
    })
}

// ---------------------------------------------------------------------------
// Colored MNIST

/// Ten well-separated RGB colors in `[0, 1]`, one per digit.
pub fn default_palette() -> Vec<[f32; 3]> {
    vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
        [0.5, 0.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 0.5, 0.5],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmnistConfig {
    pub conflict_ratio: f64,
    pub palette: Vec<[f32; 3]>,
    /// Std of the per-image Gaussian perturbation added to each color channel.
    pub jitter_std: f64,
    /// Fraction of the MNIST training file held out as a validation split.
    pub val_fraction: f64,
    pub mnist_dir: PathBuf,
    /// Optional cap on the number of MNIST training images used (before the val split).
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

impl Default for CmnistConfig {
    fn default() -> Self {
        Self {
            conflict_ratio: 0.01,
            palette: default_palette(),
            jitter_std: 0.05,
            val_fraction: 0.1,
            mnist_dir: PathBuf::from("data/mnist"),
            max_train: None,
            max_test: None,
        }
    }
}

impl CmnistConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.conflict_ratio) {
            return bad("conflict_ratio must lie in [0, 1)");
        }
        if self.palette.len() != 10 {
            return Err(DataError::PaletteMismatch {
                colors: self.palette.len(),
                classes: 10,
            });
        }
        for (i, a) in self.palette.iter().enumerate() {
            if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("palette channels must lie in [0, 1]");
            }
            if self.palette[..i].contains(a) {
                return bad("palette colors must be distinct");
            }
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return bad("jitter_std must be non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Colors MNIST digits: training and validation images take their class
/// color with probability `1 - ρ` and a uniformly random other color
/// otherwise; test colors are uniform. Group = color index.
pub fn build_cmnist(cfg: &CmnistConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let train_raw = load_mnist_part(&cfg.mnist_dir, "train")?;
    let test_raw = load_mnist_part(&cfg.mnist_dir, "t10k")?;
    build_cmnist_from(cfg, &train_raw, &test_raw, seed)
}

pub fn build_cmnist_from(
    cfg: &CmnistConfig,
    train_raw: &MnistPart,
    test_raw: &MnistPart,
    seed: u64,
) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_raw.len()).collect();
    order.shuffle(&mut rng);
    if let Some(cap) = cfg.max_train {
        order.truncate(cap);
    }
    let n_val = ((order.len() as f64) * cfg.val_fraction).round() as usize;
    if n_val == 0 || n_val >= order.len() {
        return Err(DataError::InvalidConfig(
            "validation split would be empty or cover everything".into(),
        ));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let mut test_idx: Vec<usize> = (0..test_raw.len()).collect();
    if let Some(cap) = cfg.max_test {
        test_idx.shuffle(&mut rng);
        test_idx.truncate(cap);
        test_idx.sort_unstable();
    }
    let train = colorize(
        cfg,
        train_raw,
        &train_idx,
        Some(cfg.conflict_ratio),
        Split::Train,
        &mut rng,
    )?;
    let val = colorize(
        cfg,
        train_raw,
        &val_idx,
        Some(cfg.conflict_ratio),
        Split::Val,
        &mut rng,
    )?;
    let test = colorize(cfg, test_raw, &test_idx, None, Split::Test, &mut rng)?;
    Ok(DatasetBundle { train, val, test })
}

/// `rho = None` colors uniformly at random.
fn colorize(
    cfg: &CmnistConfig,
    raw: &MnistPart,
    indices: &[usize],
    rho: Option<f64>,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let k = cfg.palette.len();
    let pixels = raw.pixels();
    let jitter =
        Normal::new(0.0, cfg.jitter_std).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let mut inputs = Array2::<f32>::zeros((indices.len(), 3 * pixels));
    let mut labels = Vec::with_capacity(indices.len());
    let mut groups = Vec::with_capacity(indices.len());
    for (row, &src) in indices.iter().enumerate() {
        let y = raw.labels[src] as usize;
        let color = match rho {
            Some(rho) => {
                if rng.gen::<f64>() < rho {
                    // Uniform over the other k - 1 colors.
                    let c = rng.gen_range(0..k - 1);
                    if c >= y {
                        c + 1
                    } else {
                        c
                    }
                } else {
                    y
                }
            }
            None => rng.gen_range(0..k),
        };
        let mut rgb = [0f32; 3];
        for (ch, v) in rgb.iter_mut().enumerate() {
            let noise = if cfg.jitter_std > 0.0 {
                jitter.sample(rng)
            } else {
                0.0
            };
            *v = (cfg.palette[color][ch] as f64 + noise).clamp(0.0, 1.0) as f32;
        }
        let image = &raw.images[src * pixels..(src + 1) * pixels];
        let mut out = inputs.row_mut(row);
        for (ch, &c) in rgb.iter().enumerate() {
            for (p, &gray) in image.iter().enumerate() {
                out[ch * pixels + p] = c * (gray as f32 / 255.0);
            }
        }
        labels.push(y);
        groups.push(color);
    }
    LabeledDataset::new(inputs, labels, Some(groups), k, k, split)
}

// ---------------------------------------------------------------------------
// Subsets and tables

/// Uniformly random subset of size `round(γ·n)`, rows kept in dataset order.
pub fn split_fraction(ds: &LabeledDataset, gamma: f64, seed: u64) -> Result<LabeledDataset> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "split fraction {gamma} outside (0, 1]"
        )));
    }
    let n = ds.len();
    let size = (gamma * n as f64).round() as usize;
    if size == 0 {
        return Err(DataError::EmptySubset { size, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, size).into_vec();
    indices.sort_unstable();
    let mut seen = vec![false; ds.num_classes()];
    for &i in &indices {
        seen[ds.labels()[i]] = true;
    }
    if let Some(class) = seen.iter().position(|&s| !s) {
        return Err(DataError::DroppedClass { class });
    }
    ds.select(&indices)
}

/// `K × G` sample counts per (class, group) cell.
pub fn group_table(ds: &LabeledDataset) -> Result<Array2<usize>> {
    let groups = ds.groups()?;
    let mut table = Array2::zeros((ds.num_classes(), ds.num_groups()));
    for (&y, &g) in ds.labels().iter().zip(groups) {
        table[[y, g]] += 1;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Dataset directories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub seed: u64,
    pub palette: Option<Vec<[f32; 3]>>,
    /// Echo of the generating config.
    pub config: serde_json::Value,
}

pub const DATASET_FORMAT: &str = "ccdb-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Writes `data.bin` (row-major little-endian f32), `labels.csv`
/// (`index,y,g,split`) and `meta.json`. Splits are concatenated in the order
/// train, val, test.
pub fn write_dataset_dir(dir: &Path, bundle: &DatasetBundle, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let parts = [&bundle.train, &bundle.val, &bundle.test];
    let total: usize = parts.iter().map(|d| d.len()).sum();
    let mut bin = Vec::with_capacity(total * meta.input_dim * 4);
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["index", "y", "g", "split"])
        .map_err(csv_err)?;
    let mut index = 0usize;
    for part in parts {
        if part.input_dim() != meta.input_dim {
            return Err(DataError::Malformed("split input dims differ".into()));
        }
        for v in part.inputs().iter() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let groups = part.groups()?;
        for (&y, &g) in part.labels().iter().zip(groups) {
            csv.write_record([
                index.to_string(),
                y.to_string(),
                g.to_string(),
                part.split().as_str().to_string(),
            ])
            .map_err(csv_err)?;
            index += 1;
        }
    }
    let csv = csv
        .into_inner()
        .map_err(|e| DataError::Malformed(e.to_string()))?;
    write_atomic(&dir.join("data.bin"), &bin)?;
    write_atomic(&dir.join("labels.csv"), &csv)?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| DataError::Malformed(e.to_string()))?;
    write_atomic(&dir.join("meta.json"), &json)
}

pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetBundle, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)
            .map_err(|e| DataError::Malformed(format!("meta.json: {e}")))?;
    if meta.format != DATASET_FORMAT || meta.version != DATASET_VERSION {
        return Err(DataError::Malformed(format!(
            "unsupported dataset format {} v{}",
            meta.format, meta.version
        )));
    }
    let bin_path = dir.join("data.bin");
    let bin = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "y", "g", "split"] {
        return Err(DataError::Malformed(
            "labels.csv header must be index,y,g,split".into(),
        ));
    }
    let mut rows: Vec<(usize, usize, Split)> = Vec::new();
    for (expected, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| DataError::Malformed("short labels.csv row".into()))
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| DataError::Malformed(format!("labels.csv: {e}")))
        };
        if parse(field(0)?)? != expected {
            return Err(DataError::Malformed(format!(
                "labels.csv: row {expected} out of order"
            )));
        }
        let split = Split::parse(field(3)?)
            .ok_or_else(|| DataError::Malformed("labels.csv: unknown split".into()))?;
        rows.push((parse(field(1)?)?, parse(field(2)?)?, split));
    }
    let d = meta.input_dim;
    if bin.len() != rows.len() * d * 4 {
        return Err(DataError::Truncated {
            path: bin_path,
            expected: rows.len() * d * 4,
            found: bin.len(),
        });
    }
    let values: Vec<f32> = bin
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let all = Array2::from_shape_vec((rows.len(), d), values)
        .map_err(|e| DataError::Malformed(e.to_string()))?;
    let part = |split: Split| -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].2 == split).collect();
        LabeledDataset::new(
            all.select(Axis(0), &idx),
            idx.iter().map(|&i| rows[i].0).collect(),
            Some(idx.iter().map(|&i| rows[i].1).collect()),
            meta.num_classes,
            meta.num_groups,
            split,
        )
    };
    let bundle = DatasetBundle {
        train: part(Split::Train)?,
        val: part(Split::Val)?,
        test: part(Split::Test)?,
    };
    Ok((bundle, meta))
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::Malformed(format!("labels.csv: {e}"))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_toy(case: ToyCase) -> ToyConfig {
        ToyConfig {
            case,
            n_per_class: 5000,
            ..ToyConfig::default()
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn case_b_bias_coordinate_is_uncorrelated_with_class() {
        let data = gen_toy(&small_toy(ToyCase::B), 3).unwrap();
        let zs: Vec<f64> = data
            .train
            .inputs()
            .column(1)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = data.train.labels().iter().map(|&v| v as f64).collect();
        assert!(corr(&zs, &y).abs() < 0.05);
    }

    #[test]
    fn case_a_conflict_fraction_matches_ratio() {
        let data = gen_toy(&small_toy(ToyCase::A), 4).unwrap();
        let n = data.train.len() as f64;
        let conflicting = data
            .train
            .labels()
            .iter()
            .zip(data.train.groups().unwrap())
            .filter(|(y, g)| y != g)
            .count() as f64;
        let sigma = (0.1 * 0.9 / n).sqrt();
        assert!((conflicting / n - 0.1).abs() < 3.0 * sigma);
    }

    #[test]
    fn case_c_without_rotation_equals_case_a() {
        let a = gen_toy(&small_toy(ToyCase::A), 9).unwrap();
        let c = gen_toy(
            &ToyConfig {
                rotation_deg: 0.0,
                ..small_toy(ToyCase::C)
            },
            9,
        )
        .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn toy_test_set_is_balanced() {
        let data = gen_toy(&small_toy(ToyCase::A), 5).unwrap();
        let zs: Vec<f64> = data
            .test
            .inputs()
            .column(1)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = data.test.labels().iter().map(|&v| v as f64).collect();
        assert!(data.test.len() >= 10_000);
        assert!(corr(&zs, &y).abs() < 0.05);
    }

    #[test]
    fn idx_truncation_and_magic_are_reported() {
        let p = Path::new("mem");
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 3, 1, 2];
        assert!(matches!(
            parse_idx_bytes(&bytes, p),
            Err(DataError::Truncated { .. })
        ));
        bytes.push(3);
        assert_eq!(parse_idx_bytes(&bytes, p).unwrap().data, vec![1, 2, 3]);
        bytes[2] = 9;
        assert!(matches!(
            parse_idx_bytes(&bytes, p),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn split_fraction_sizes_and_determinism() {
        let data = gen_toy(
            &ToyConfig {
                n_per_class: 500,
                ..ToyConfig::default()
            },
            1,
        )
        .unwrap();
        let full = split_fraction(&data.train, 1.0, 0).unwrap();
        assert_eq!(full, data.train);
        let half = split_fraction(&data.train, 0.5, 7).unwrap();
        assert_eq!(half.len(), 500);
        assert_eq!(half, split_fraction(&data.train, 0.5, 7).unwrap());
        assert!(split_fraction(&data.train, 0.0001, 7).is_err());
    }

    #[test]
    fn group_table_counts_sum_to_n() {
        let data = gen_toy(&ToyConfig::default(), 2).unwrap();
        let t = group_table(&data.train).unwrap();
        assert_eq!(t.sum(), data.train.len());
        assert!(data.train.withhold_groups().groups().is_err());
        assert!(group_table(&data.train.withhold_groups()).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let data = gen_toy(
            &ToyConfig {
                n_per_class: 50,
                val_per_class: 5,
                test_per_class: 20,
                ..ToyConfig::default()
            },
            1,
        )
        .unwrap();
        let meta = DatasetMeta {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            input_dim: 2,
            num_classes: 2,
            num_groups: 2,
            seed: 1,
            palette: None,
            config: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &data, &meta).unwrap();
        let (back, meta_back) = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(meta_back, meta);
    }
}
