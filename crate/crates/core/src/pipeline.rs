//! End-to-end orchestration: data, the three training stages, evaluation,
//! and the weight and correlation analyses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_cmnist, gen_toy, read_dataset_dir, split_fraction, write_atomic, write_dataset_dir,
    CmnistConfig, DataError, DatasetBundle, DatasetMeta, LabeledDataset, ToyCase, ToyConfig,
    TrainView, DATASET_FORMAT, DATASET_VERSION,
};
use crate::model::{
    train_biased, train_final, BiasedTrainConfig, FinalTrainConfig, LossRecord, Mlp, ModelError,
    TrainOutcome,
};
use crate::reweight::{
    export_weights, optimize_weights, ClassWeightState, ReweightConfig, ReweightError,
    ReweightOutcome,
};
use crate::stats::{mi_estimate, pearson_profile, StatsError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("stage 1: {0}")]
    Stage1(ModelError),
    #[error("stage 2: {0}")]
    Stage2(ReweightError),
    #[error("stage 3: {0}")]
    Stage3(ModelError),
    #[error("evaluate: {0}")]
    Evaluate(String),
    #[error("analyze: {0}")]
    Analyze(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn analyze_err(e: StatsError) -> PipelineError {
    PipelineError::Analyze(e.to_string())
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Toy(ToyConfig),
    Cmnist(CmnistConfig),
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Toy(t) => format!("toy-{}", toy_case_name(t.case)),
            DatasetSpec::Cmnist(c) => format!("cmnist-rho{}", c.conflict_ratio),
        }
    }
}

fn toy_case_name(case: ToyCase) -> &'static str {
    match case {
        ToyCase::A => "a",
        ToyCase::B => "b",
        ToyCase::C => "c",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fraction γ of the training set used to train the biased extractor.
    pub split_gamma: f64,
    pub histogram_bins: usize,
    pub dataset: DatasetSpec,
    pub stage1: BiasedTrainConfig,
    pub stage2: ReweightConfig,
    pub stage3: FinalTrainConfig,
}

impl PipelineConfig {
    pub fn toy(case: ToyCase) -> Self {
        Self {
            seed: 0,
            split_gamma: 0.5,
            histogram_bins: 50,
            dataset: DatasetSpec::Toy(ToyConfig {
                case,
                ..ToyConfig::default()
            }),
            stage1: BiasedTrainConfig {
                hidden: vec![16, 16],
                epochs: 20,
                batch_size: 128,
                learning_rate: 1e-2,
                weight_decay: 0.0,
                compactness: 0.5,
            },
            stage2: ReweightConfig {
                clip_threshold: 1.2,
                ..ReweightConfig::default()
            },
            stage3: FinalTrainConfig {
                hidden: vec![16, 16],
                iterations: 2000,
                batch_size: 128,
                learning_rate: 1e-2,
                weight_decay: 1e-4,
                eval_every: 100,
                ..FinalTrainConfig::default()
            },
        }
    }

    pub fn cmnist(conflict_ratio: f64, mnist_dir: PathBuf) -> Self {
        Self {
            seed: 0,
            split_gamma: 0.1,
            histogram_bins: 50,
            dataset: DatasetSpec::Cmnist(CmnistConfig {
                conflict_ratio,
                mnist_dir,
                ..CmnistConfig::default()
            }),
            stage1: BiasedTrainConfig {
                batch_size: 32,
                ..BiasedTrainConfig::default()
            },
            stage2: ReweightConfig::default(),
            stage3: FinalTrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: String| PipelineError::Config(e);
        if !(self.split_gamma > 0.0 && self.split_gamma <= 1.0) {
            return Err(cfg_err(format!(
                "split_gamma {} outside (0, 1]",
                self.split_gamma
            )));
        }
        if self.histogram_bins == 0 {
            return Err(cfg_err("histogram_bins must be positive".into()));
        }
        match &self.dataset {
            DatasetSpec::Toy(t) => t.validate().map_err(|e| cfg_err(e.to_string()))?,
            DatasetSpec::Cmnist(c) => c.validate().map_err(|e| cfg_err(e.to_string()))?,
        }
        self.stage1.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.stage2.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.stage3.validate().map_err(|e| cfg_err(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Named random streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Stage1 = 2,
    Stage2 = 3,
    Stage3 = 4,
}

pub fn stream_seed(root: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

// ---------------------------------------------------------------------------
// Stages

pub fn load_dataset(cfg: &PipelineConfig) -> Result<DatasetBundle> {
    let seed = stream_seed(cfg.seed, Stream::Data);
    Ok(match &cfg.dataset {
        DatasetSpec::Toy(t) => gen_toy(t, seed)?,
        DatasetSpec::Cmnist(c) => build_cmnist(c, seed)?,
    })
}

/// Reads a dataset directory written by [`save_dataset`], or generates the
/// configured dataset when `dir` is `None`.
pub fn load_or_read(cfg: &PipelineConfig, dir: Option<&Path>) -> Result<DatasetBundle> {
    match dir {
        Some(d) => Ok(read_dataset_dir(d)?.0),
        None => load_dataset(cfg),
    }
}

pub fn dataset_meta(cfg: &PipelineConfig, bundle: &DatasetBundle) -> Result<DatasetMeta> {
    let config =
        serde_json::to_value(&cfg.dataset).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        input_dim: bundle.train.input_dim(),
        num_classes: bundle.train.num_classes(),
        num_groups: bundle.train.num_groups(),
        seed: cfg.seed,
        palette: match &cfg.dataset {
            DatasetSpec::Cmnist(c) => Some(c.palette.clone()),
            DatasetSpec::Toy(_) => None,
        },
        config,
    })
}

pub fn save_dataset(cfg: &PipelineConfig, bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    Ok(write_dataset_dir(dir, bundle, &dataset_meta(cfg, bundle)?)?)
}

/// Trains the biased extractor on a γ-subset of the training set.
pub fn run_stage1(cfg: &PipelineConfig, train: &LabeledDataset) -> Result<TrainOutcome<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Stage1));
    let subset = split_fraction(train, cfg.split_gamma, rng.next_u64())?;
    train_biased(subset.train_view(), &cfg.stage1, rng.next_u64()).map_err(PipelineError::Stage1)
}

pub fn extract_features_f64(model: &Mlp<f32>, x: ArrayView2<f32>) -> Result<Array2<f64>> {
    Ok(model
        .extract_features(x)
        .map_err(PipelineError::Stage1)?
        .mapv(f64::from))
}

/// Extracts features of the full training set and learns class weights.
pub fn run_stage2(
    cfg: &PipelineConfig,
    extractor: &Mlp<f32>,
    train: TrainView<'_, f32>,
) -> Result<(Array2<f64>, ReweightOutcome<f64>)> {
    let z = extract_features_f64(extractor, train.inputs())?;
    let outcome = optimize_weights(z.view(), train.labels(), train.num_classes(), &cfg.stage2)
        .map_err(PipelineError::Stage2)?;
    Ok((z, outcome))
}

/// Trains the final classifier; `weights = None` gives the shuffled ERM baseline.
pub fn run_stage3(
    cfg: &PipelineConfig,
    train: TrainView<'_, f32>,
    weights: Option<&ClassWeightState<f64>>,
    val: TrainView<'_, f32>,
) -> Result<TrainOutcome<f32>> {
    train_final(
        train,
        weights,
        Some(val),
        &cfg.stage3,
        stream_seed(cfg.seed, Stream::Stage3),
    )
    .map_err(PipelineError::Stage3)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub samples: usize,
    pub overall_accuracy: f64,
    /// Unweighted mean over non-empty (class, group) cells.
    pub group_balanced_accuracy: f64,
    pub worst_group_accuracy: f64,
    /// `cell_accuracy[class][group]`; `None` for empty cells.
    pub cell_accuracy: Vec<Vec<Option<f64>>>,
    pub cell_counts: Vec<Vec<usize>>,
}

pub fn group_metrics(predictions: &[usize], ds: &LabeledDataset) -> Result<GroupMetrics> {
    if ds.is_empty() || predictions.len() != ds.len() {
        return Err(PipelineError::Evaluate(format!(
            "{} predictions for {} samples",
            predictions.len(),
            ds.len()
        )));
    }
    let groups = ds
        .groups()
        .map_err(|e| PipelineError::Evaluate(e.to_string()))?;
    let (k, g) = (ds.num_classes(), ds.num_groups());
    let mut hits = vec![vec![0usize; g]; k];
    let mut counts = vec![vec![0usize; g]; k];
    for ((&p, &y), &gi) in predictions.iter().zip(ds.labels()).zip(groups) {
        counts[y][gi] += 1;
        hits[y][gi] += usize::from(p == y);
    }
    let cell_accuracy: Vec<Vec<Option<f64>>> = hits
        .iter()
        .zip(&counts)
        .map(|(h, c)| {
            h.iter()
                .zip(c)
                .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
                .collect()
        })
        .collect();
    let cells: Vec<f64> = cell_accuracy.iter().flatten().flatten().copied().collect();
    let total_hits: usize = hits.iter().flatten().sum();
    Ok(GroupMetrics {
        samples: ds.len(),
        overall_accuracy: total_hits as f64 / ds.len() as f64,
        group_balanced_accuracy: cells.iter().sum::<f64>() / cells.len() as f64,
        worst_group_accuracy: cells.iter().copied().fold(f64::INFINITY, f64::min),
        cell_accuracy,
        cell_counts: counts,
    })
}

pub fn evaluate(model: &Mlp<f32>, ds: &LabeledDataset) -> Result<GroupMetrics> {
    let predictions = model
        .predict(ds.inputs())
        .map_err(|e| PipelineError::Evaluate(e.to_string()))?;
    group_metrics(&predictions, ds)
}

// ---------------------------------------------------------------------------
// Weight analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellWeights {
    pub class: usize,
    pub group: usize,
    pub count: usize,
    /// Total weight of the cell; sums to 1 over the groups of a class.
    pub mass: f64,
    pub mean_weight: f64,
    /// Fraction of the cell's samples in each bin.
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAnalysis {
    /// `bins + 1` uniform edges over `[0, max weight]`.
    pub edges: Vec<f64>,
    pub cells: Vec<CellWeights>,
    /// Weight mass on samples whose group differs from their class, per
    /// class. Only defined when groups and classes share an index space
    /// (group `k` is the bias-aligned group of class `k`).
    pub conflicting_mass: Option<Vec<f64>>,
    pub conflicting_count_share: Option<Vec<f64>>,
}

pub fn analyze_weights(
    state: &ClassWeightState<f64>,
    ds: &LabeledDataset,
    bins: usize,
) -> Result<WeightAnalysis> {
    let groups = ds
        .groups()
        .map_err(|e| PipelineError::Analyze(e.to_string()))?;
    state
        .check_labels(ds.labels(), ds.num_classes())
        .map_err(|e| PipelineError::Analyze(e.to_string()))?;
    if bins == 0 {
        return Err(PipelineError::Analyze(
            "histogram needs at least one bin".into(),
        ));
    }
    let weights = state.sample_weights();
    let max = weights.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 * width).collect();
    let (k, g) = (ds.num_classes(), ds.num_groups());
    let mut hist = vec![vec![vec![0usize; bins]; g]; k];
    let mut counts = vec![vec![0usize; g]; k];
    let mut mass = vec![vec![0.0; g]; k];
    for ((&w, &y), &gi) in weights.iter().zip(ds.labels()).zip(groups) {
        let bin = ((w / width) as usize).min(bins - 1);
        hist[y][gi][bin] += 1;
        counts[y][gi] += 1;
        mass[y][gi] += w;
    }
    let mut cells = Vec::new();
    for y in 0..k {
        for gi in 0..g {
            let c = counts[y][gi];
            if c == 0 {
                continue;
            }
            cells.push(CellWeights {
                class: y,
                group: gi,
                count: c,
                mass: mass[y][gi],
                mean_weight: mass[y][gi] / c as f64,
                histogram: hist[y][gi].iter().map(|&h| h as f64 / c as f64).collect(),
            });
        }
    }
    let (conflicting_mass, conflicting_count_share) = if k == g {
        let per_class = |v: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..k)
                .map(|y| (0..g).filter(|&gi| gi != y).map(|gi| v[y][gi]).sum())
                .collect()
        };
        let shares: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| c as f64 / total as f64).collect()
            })
            .collect();
        (Some(per_class(&mass)), Some(per_class(&shares)))
    } else {
        (None, None)
    };
    Ok(WeightAnalysis {
        edges,
        cells,
        conflicting_mass,
        conflicting_count_share,
    })
}

// ---------------------------------------------------------------------------
// Correlation analysis

/// Box-plot summary of per-dimension |Pearson r|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub stage: String,
    pub target: String,
    /// Feature dimensions with non-zero variance; constant ones are excluded.
    pub dims: usize,
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-dimension association with a categorical target: the largest
/// one-vs-rest |r| over its categories.
pub fn association_profile(
    z: ArrayView2<f64>,
    target: &[usize],
    categories: usize,
) -> Result<Array1<f64>> {
    let mut best = Array1::<f64>::zeros(z.ncols());
    let mut used = 0;
    for c in 0..categories {
        let indicator: Array1<f64> = target
            .iter()
            .map(|&t| f64::from(u8::from(t == c)))
            .collect();
        let r = match pearson_profile(z, indicator.view()) {
            Ok(r) => r,
            Err(StatsError::ConstantTarget) => continue,
            Err(e) => return Err(analyze_err(e)),
        };
        used += 1;
        best.zip_mut_with(&r, |b, &v| *b = b.max(v.abs()));
        // With two categories both indicators give the same |r|.
        if categories == 2 {
            break;
        }
    }
    if used == 0 {
        return Err(analyze_err(StatsError::ConstantTarget));
    }
    Ok(best)
}

pub fn correlation_summary(
    stage: &str,
    target_name: &str,
    z: ArrayView2<f64>,
    target: &[usize],
    categories: usize,
) -> Result<CorrelationSummary> {
    let profile = association_profile(z, target, categories)?;
    let variance = z.var_axis(Axis(0), 0.0);
    let mut values: Vec<f64> = profile
        .iter()
        .zip(variance.iter())
        .filter(|(_, &v)| v > 0.0)
        .map(|(&r, _)| r)
        .collect();
    if values.is_empty() {
        return Err(PipelineError::Analyze(format!(
            "{stage}: every feature dimension is constant"
        )));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile_sorted(&values, 0.25);
    let q3 = quantile_sorted(&values, 0.75);
    let iqr = q3 - q1;
    Ok(CorrelationSummary {
        stage: stage.into(),
        target: target_name.into(),
        dims: values.len(),
        min: values[0],
        whisker_low: values
            .iter()
            .copied()
            .find(|&v| v >= q1 - 1.5 * iqr)
            .unwrap_or(values[0]),
        q1,
        median: quantile_sorted(&values, 0.5),
        q3,
        whisker_high: values
            .iter()
            .rev()
            .copied()
            .find(|&v| v <= q3 + 1.5 * iqr)
            .unwrap_or(values[values.len() - 1]),
        max: values[values.len() - 1],
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// Four rows: (before, after) × (class, bias).
pub fn analyze_correlations(
    before: ArrayView2<f64>,
    after: ArrayView2<f64>,
    ds: &LabeledDataset,
) -> Result<Vec<CorrelationSummary>> {
    let mut rows = stage_correlations("before", before, ds)?;
    rows.extend(stage_correlations("after", after, ds)?);
    Ok(rows)
}

pub fn stage_correlations(
    stage: &str,
    z: ArrayView2<f64>,
    ds: &LabeledDataset,
) -> Result<Vec<CorrelationSummary>> {
    let groups = ds
        .groups()
        .map_err(|e| PipelineError::Analyze(e.to_string()))?;
    Ok(vec![
        correlation_summary(stage, "class", z, ds.labels(), ds.num_classes())?,
        correlation_summary(stage, "bias", z, groups, ds.num_groups())?,
    ])
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub uniform: f64,
    pub reweighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub test: GroupMetrics,
    pub validation_score: Option<f64>,
    pub selected_step: Option<usize>,
    /// Gaussian MI between Stage-1 training features and labels.
    pub mutual_information: Option<MiSummary>,
    pub stage2_objective: Option<MiSummary>,
    pub conflicting_mass: Option<Vec<f64>>,
    /// Test-set |Pearson r| summaries of penultimate features.
    pub correlations: Vec<CorrelationSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PipelineError::Evaluate(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Evaluate(e.to_string()))
    }
}

/// Everything produced by one CCDB run.
#[derive(Debug, Clone)]
pub struct CcdbRun {
    pub stage1: TrainOutcome<f32>,
    pub features: Array2<f64>,
    pub weights: ReweightOutcome<f64>,
    pub stage3: TrainOutcome<f32>,
    pub weight_analysis: WeightAnalysis,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct ErmRun {
    pub stage3: TrainOutcome<f32>,
    pub report: EvalReport,
}

/// Runs all three stages on `data`. When `out` is set, each stage's
/// artifacts are written as soon as the stage finishes.
pub fn run_ccdb_on(
    cfg: &PipelineConfig,
    data: &DatasetBundle,
    out: Option<&Path>,
) -> Result<CcdbRun> {
    cfg.validate()?;
    if let Some(dir) = out {
        prepare_out(dir, cfg)?;
    }
    let stage1 = run_stage1(cfg, &data.train)?;
    if let Some(dir) = out {
        save_model(&stage1.model, &dir.join("stage1_model.json"))?;
    }
    let (features, weights) = run_stage2(cfg, &stage1.model, data.train.train_view())?;
    if let Some(dir) = out {
        let path = dir.join("weights.csv");
        export_weights(&weights.state, &path).map_err(PipelineError::Stage2)?;
    }
    let stage3 = run_stage3(
        cfg,
        data.train.train_view(),
        Some(&weights.state),
        data.val.train_view(),
    )?;
    if let Some(dir) = out {
        save_model(&stage3.model, &dir.join("final_model.json"))?;
    }

    let labels = data.train.labels();
    let k = data.train.num_classes();
    let uniform_mi = mi_estimate(features.view(), labels, k, None).map_err(analyze_err)?;
    let learned = weights.state.all_weights();
    let reweighted_mi =
        mi_estimate(features.view(), labels, k, Some(&learned)).map_err(analyze_err)?;
    let weight_analysis = analyze_weights(&weights.state, &data.train, cfg.histogram_bins)?;

    let before = extract_features_f64(&stage1.model, data.test.inputs())?;
    let after = extract_features_f64(&stage3.model, data.test.inputs())?;
    let mut correlations = stage_correlations("stage1", before.view(), &data.test)?;
    correlations.extend(stage_correlations("final", after.view(), &data.test)?);

    let report = EvalReport {
        method: "ccdb".into(),
        dataset: cfg.dataset.name(),
        seed: cfg.seed,
        test: evaluate(&stage3.model, &data.test)?,
        validation_score: stage3.selected.map(|s| s.1),
        selected_step: stage3.selected.map(|s| s.0),
        mutual_information: Some(MiSummary {
            uniform: uniform_mi,
            reweighted: reweighted_mi,
        }),
        stage2_objective: Some(MiSummary {
            uniform: weights.trace[0],
            reweighted: weights.trace[weights.trace.len() - 1],
        }),
        conflicting_mass: weight_analysis.conflicting_mass.clone(),
        correlations,
    };
    let run = CcdbRun {
        stage1,
        features,
        weights,
        stage3,
        weight_analysis,
        report,
    };
    if let Some(dir) = out {
        write_loss_trace(
            &dir.join("loss_trace.csv"),
            &[
                ("stage1", &run.stage1.trace),
                ("stage2", &objective_records(&run.weights.trace)),
                ("stage3", &run.stage3.trace),
            ],
        )?;
        write_histograms(&dir.join("histograms.csv"), &run.weight_analysis)?;
        write_correlations(&dir.join("correlations.csv"), &run.report.correlations)?;
        write_report(&dir.join("report.json"), &run.report)?;
    }
    Ok(run)
}

/// Stage-3 architecture and budget on shuffled, unweighted data.
pub fn run_erm_on(
    cfg: &PipelineConfig,
    data: &DatasetBundle,
    out: Option<&Path>,
) -> Result<ErmRun> {
    cfg.validate()?;
    if let Some(dir) = out {
        prepare_out(dir, cfg)?;
    }
    let stage3 = run_stage3(cfg, data.train.train_view(), None, data.val.train_view())?;
    let features = extract_features_f64(&stage3.model, data.test.inputs())?;
    let report = EvalReport {
        method: "erm".into(),
        dataset: cfg.dataset.name(),
        seed: cfg.seed,
        test: evaluate(&stage3.model, &data.test)?,
        validation_score: stage3.selected.map(|s| s.1),
        selected_step: stage3.selected.map(|s| s.0),
        mutual_information: None,
        stage2_objective: None,
        conflicting_mass: None,
        correlations: stage_correlations("final", features.view(), &data.test)?,
    };
    if let Some(dir) = out {
        save_model(&stage3.model, &dir.join("final_model.json"))?;
        write_loss_trace(&dir.join("loss_trace.csv"), &[("stage3", &stage3.trace)])?;
        write_correlations(&dir.join("correlations.csv"), &report.correlations)?;
        write_report(&dir.join("report.json"), &report)?;
    }
    Ok(ErmRun { stage3, report })
}

pub fn run_ccdb(cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    Ok(run_ccdb_on(cfg, &data, Some(out))?.report)
}

pub fn run_erm_baseline(cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    Ok(run_erm_on(cfg, &data, Some(out))?.report)
}

// ---------------------------------------------------------------------------
// Artifact writers

/// Creates `dir` and stores the resolved config.
pub fn prepare_out(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| match e {
        DataError::Io { path, source } => PipelineError::Io { path, source },
        other => PipelineError::Data(other),
    })
}

pub fn save_model(model: &Mlp<f32>, path: &Path) -> Result<()> {
    model
        .save(path)
        .map_err(|e| PipelineError::Evaluate(format!("{}: {e}", path.display())))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut json = report.to_json()?;
    json.push('\n');
    write_text(path, &json)
}

pub fn objective_records(trace: &[f64]) -> Vec<LossRecord> {
    trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRecord { step, loss })
        .collect()
}

pub fn write_loss_trace(path: &Path, stages: &[(&str, &[LossRecord])]) -> Result<()> {
    let mut out = String::from("stage,step,loss\n");
    for (stage, trace) in stages {
        for r in trace.iter() {
            let _ = writeln!(out, "{stage},{},{}", r.step, r.loss);
        }
    }
    write_text(path, &out)
}

pub fn write_histograms(path: &Path, analysis: &WeightAnalysis) -> Result<()> {
    let mut out =
        String::from("class,group,count,mass,mean_weight,bin,bin_low,bin_high,fraction\n");
    for cell in &analysis.cells {
        for (b, &f) in cell.histogram.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{b},{},{},{f}",
                cell.class,
                cell.group,
                cell.count,
                cell.mass,
                cell.mean_weight,
                analysis.edges[b],
                analysis.edges[b + 1]
            );
        }
    }
    write_text(path, &out)
}

pub fn write_correlations(path: &Path, rows: &[CorrelationSummary]) -> Result<()> {
    let mut out =
        String::from("stage,target,dims,min,whisker_low,q1,median,q3,whisker_high,max,mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.target,
            r.dims,
            r.min,
            r.whisker_low,
            r.q1,
            r.median,
            r.q3,
            r.whisker_high,
            r.max,
            r.mean
        );
    }
    write_text(path, &out)
}
