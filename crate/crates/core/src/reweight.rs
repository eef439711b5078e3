//! Per-class sample reweighting that pulls every class-conditional feature
//! distribution toward the fixed marginal.
//!
//! Each class `k` owns logits `sₖ` with weights `wₖ = softmax(sₖ)`. The
//! objective is the class average of the Gaussian 2-Wasserstein distance
//! between the weighted class summary and the uniform marginal summary of
//! all features, which stays fixed for the whole optimization. Logits are
//! updated with full-batch Adam and clamped to `[-T, T]` after each step.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{BuresAnchor, LinalgError, SymmetricMatrix, DEFAULT_EIG_FLOOR};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::stats::{
    marginal_summary, partition_by_class, softmax, weighted_moments, GaussianSummary, StatsError,
    WeightVector, WEIGHT_SUM_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("objective diverged (non-finite value) at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid reweighting config: {0}")]
    InvalidConfig(String),
    #[error("weight file: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight file parse error: {0}")]
    Parse(String),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("weights of class {class} sum to {sum}, expected 1")]
    WeightSum { class: usize, sum: f64 },
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("class membership does not match labels: {0}")]
    LabelMismatch(String),
}

pub type Result<T> = std::result::Result<T, ReweightError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightConfig {
    /// Logit clip threshold `T`.
    pub clip_threshold: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            clip_threshold: 2.0,
            learning_rate: 0.01,
            iterations: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip_threshold", self.clip_threshold),
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ReweightError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.iterations == 0 {
            return Err(ReweightError::InvalidConfig(
                "iterations must be at least 1".into(),
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ReweightError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: 0.0,
        }
    }
}

/// Logits of every class together with the sample indices they weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightState<T> {
    members: Vec<Vec<usize>>,
    logits: Vec<Array1<T>>,
}

impl<T: Scalar> ClassWeightState<T> {
    /// Zero logits (uniform weights within each class).
    pub fn uniform(labels: &[usize], num_classes: usize) -> Result<Self> {
        let members = partition_by_class(labels, num_classes)?;
        let logits = members.iter().map(|m| Array1::zeros(m.len())).collect();
        Ok(Self { members, logits })
    }

    pub fn from_parts(members: Vec<Vec<usize>>, logits: Vec<Array1<T>>) -> Result<Self> {
        if members.len() != logits.len() {
            return Err(ReweightError::ClassCountMismatch {
                expected: members.len(),
                found: logits.len(),
            });
        }
        for (k, (m, s)) in members.iter().zip(&logits).enumerate() {
            if m.is_empty() {
                return Err(StatsError::EmptyClass(k).into());
            }
            if m.len() != s.len() {
                return Err(ReweightError::Malformed(format!(
                    "class {k} has {} members but {} logits",
                    m.len(),
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(ReweightError::Malformed(format!(
                    "class {k} has non-finite logits"
                )));
            }
        }
        Ok(Self { members, logits })
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn num_samples(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn logits(&self, class: usize) -> &Array1<T> {
        &self.logits[class]
    }

    pub fn weights(&self, class: usize) -> WeightVector<T> {
        WeightVector::softmax(self.logits[class].view())
    }

    pub fn all_weights(&self) -> Vec<WeightVector<T>> {
        (0..self.num_classes()).map(|k| self.weights(k)).collect()
    }

    /// Within-class weight of every sample, indexed by dataset position.
    pub fn sample_weights(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_samples()];
        for k in 0..self.num_classes() {
            let w = softmax(self.logits[k].view());
            for (&i, &v) in self.members[k].iter().zip(w.iter()) {
                out[i] = v;
            }
        }
        out
    }

    /// Class label of every sample, indexed by dataset position.
    pub fn sample_classes(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_samples()];
        for (k, m) in self.members.iter().enumerate() {
            for &i in m {
                out[i] = k;
            }
        }
        out
    }

    pub fn max_abs_logit(&self) -> T {
        self.logits
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn clip(&mut self, threshold: T) {
        for s in &mut self.logits {
            s.mapv_inplace(|v| v.max(-threshold).min(threshold));
        }
    }

    /// Checks that the class membership was built from `labels`.
    pub fn check_labels(&self, labels: &[usize], num_classes: usize) -> Result<()> {
        if self.num_classes() != num_classes {
            return Err(ReweightError::ClassCountMismatch {
                expected: num_classes,
                found: self.num_classes(),
            });
        }
        let expected = partition_by_class(labels, num_classes)?;
        if expected != self.members {
            return Err(ReweightError::LabelMismatch(format!(
                "weights cover {} samples, labels describe {}",
                self.num_samples(),
                labels.len()
            )));
        }
        Ok(())
    }
}

/// Feature blocks per class plus the fixed marginal anchor.
#[derive(Debug, Clone)]
pub struct ReweightProblem<T> {
    blocks: Vec<Array2<T>>,
    members: Vec<Vec<usize>>,
    anchor: GaussianSummary<T>,
    bures: BuresAnchor<T>,
    ridge: T,
}

/// Objective value with per-class logit gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveEval<T> {
    pub value: T,
    pub per_class: Vec<T>,
    pub gradients: Vec<Array1<T>>,
}

impl<T: Scalar> ReweightProblem<T> {
    /// `anchor` must be the uniform marginal summary of `z`, computed once.
    pub fn new(
        z: ArrayView2<T>,
        labels: &[usize],
        num_classes: usize,
        anchor: GaussianSummary<T>,
    ) -> Result<Self> {
        if z.nrows() != labels.len() {
            return Err(StatsError::LengthMismatch {
                rows: z.nrows(),
                weights: labels.len(),
            }
            .into());
        }
        if anchor.dim() != z.ncols() {
            return Err(StatsError::DimMismatch(anchor.dim(), z.ncols()).into());
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite.into());
        }
        let members = partition_by_class(labels, num_classes)?;
        let blocks = members.iter().map(|m| z.select(Axis(0), m)).collect();
        let ridge = anchor.ridge();
        let bures = BuresAnchor::new(&anchor.cov.with_ridge(ridge), T::lit(DEFAULT_EIG_FLOOR))?;
        Ok(Self {
            blocks,
            members,
            anchor,
            bures,
            ridge,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.len()
    }

    pub fn anchor(&self) -> &GaussianSummary<T> {
        &self.anchor
    }

    fn check_state(&self, state: &ClassWeightState<T>) -> Result<()> {
        if state.members != self.members {
            return Err(ReweightError::LabelMismatch(
                "weight state was built for different labels".into(),
            ));
        }
        Ok(())
    }

    fn class_summary(&self, k: usize, w: &Array1<T>) -> Result<(Array1<T>, SymmetricMatrix<T>)> {
        let (mean, cov) = weighted_moments(self.blocks[k].view(), w.view())?;
        let cov = SymmetricMatrix::new(cov)?.with_ridge(self.ridge);
        Ok((mean, cov))
    }

    fn mean_term(&self, mean: &Array1<T>) -> T {
        mean.iter()
            .zip(self.anchor.mean.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    }

    pub fn objective(&self, state: &ClassWeightState<T>) -> Result<T> {
        self.check_state(state)?;
        let mut total = T::zero();
        for k in 0..self.num_classes() {
            let w = softmax(state.logits[k].view());
            let (mean, cov) = self.class_summary(k, &w)?;
            total += self.mean_term(&mean) + self.bures.term(&cov)?;
        }
        Ok(total / T::lit(self.num_classes() as f64))
    }

    /// Objective and exact gradient with respect to every logit vector.
    ///
    /// `workspace` carries scratch buffers and the previous inner eigenbases
    /// (used as warm starts); reuse it across consecutive iterations.
    pub fn evaluate(
        &self,
        state: &ClassWeightState<T>,
        workspace: &mut EvalWorkspace<T>,
    ) -> Result<ObjectiveEval<T>> {
        self.check_state(state)?;
        let k_count = self.num_classes();
        if workspace.scratch.len() != k_count {
            workspace.scratch = self
                .blocks
                .iter()
                .map(|b| Array2::zeros(b.raw_dim()))
                .collect();
            workspace.warm = vec![None; k_count];
        }
        let inv_k = T::one() / T::lit(k_count as f64);
        let two = T::lit(2.0);
        let mut value = T::zero();
        let mut per_class = Vec::with_capacity(k_count);
        let mut gradients = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let block = &self.blocks[k];
            let buf = &mut workspace.scratch[k];
            let w = softmax(state.logits[k].view());
            let mean = block.t().dot(&w);
            Zip::from(buf.rows_mut())
                .and(block.rows())
                .and(&w)
                .for_each(|mut out, z, &wi| {
                    let root = wi.sqrt();
                    Zip::from(&mut out)
                        .and(&z)
                        .and(&mean)
                        .for_each(|o, &zv, &m| *o = root * (zv - m));
                });
            let cov = SymmetricMatrix::new(buf.t().dot(&*buf))?.with_ridge(self.ridge);
            let bures = self.bures.term_and_grad(&cov, workspace.warm[k].as_ref())?;
            let class_value = self.mean_term(&mean) + bures.value;
            per_class.push(class_value);
            value += class_value;

            // dL/dwᵢ = zᵢᵀ G zᵢ + (2(μ − μ̄) − 2Gμ)ᵀ zᵢ + const; constants cancel
            // under the softmax Jacobian.
            let g = bures.grad.as_array();
            general_mat_mul(T::one(), block, g, T::zero(), buf);
            let linear = (&mean - &self.anchor.mean) * two - g.dot(&mean) * two;
            let mut dw = block.dot(&linear);
            Zip::from(&mut dw)
                .and(block.rows())
                .and(buf.rows())
                .for_each(|d, z, p| *d += z.dot(&p));
            let avg = w.dot(&dw);
            gradients.push(
                Zip::from(&w)
                    .and(&dw)
                    .map_collect(|&wi, &di| wi * (di - avg) * inv_k),
            );
            workspace.warm[k] = Some(bures.inner_basis);
        }
        Ok(ObjectiveEval {
            value: value * inv_k,
            per_class,
            gradients,
        })
    }
}

/// Scratch buffers and warm-start eigenbases reused across evaluations.
#[derive(Debug, Clone)]
pub struct EvalWorkspace<T> {
    warm: Vec<Option<Array2<T>>>,
    scratch: Vec<Array2<T>>,
}

impl<T> Default for EvalWorkspace<T> {
    fn default() -> Self {
        Self {
            warm: Vec::new(),
            scratch: Vec::new(),
        }
    }
}

/// Average reweighted 2-Wasserstein distance of the classes to `anchor`.
pub fn ccdb_objective<T: Scalar>(
    z: ArrayView2<T>,
    labels: &[usize],
    state: &ClassWeightState<T>,
    anchor: &GaussianSummary<T>,
) -> Result<T> {
    ReweightProblem::new(z, labels, state.num_classes(), anchor.clone())?.objective(state)
}

/// Analytic gradient of [`ccdb_objective`] with respect to each class's logits.
pub fn ccdb_gradient<T: Scalar>(
    z: ArrayView2<T>,
    labels: &[usize],
    state: &ClassWeightState<T>,
    anchor: &GaussianSummary<T>,
) -> Result<Vec<Array1<T>>> {
    let problem = ReweightProblem::new(z, labels, state.num_classes(), anchor.clone())?;
    Ok(problem
        .evaluate(state, &mut EvalWorkspace::default())?
        .gradients)
}

#[derive(Debug, Clone)]
pub struct ReweightOutcome<T> {
    pub state: ClassWeightState<T>,
    /// Objective before each step followed by the final value (`iterations + 1` entries).
    pub trace: Vec<T>,
}

/// Learns class weights from zero logits with clipped full-batch Adam.
pub fn optimize_weights<T: Scalar>(
    z: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ReweightConfig,
) -> Result<ReweightOutcome<T>> {
    optimize_weights_observed(z, labels, num_classes, cfg, |_, _| {})
}

/// As [`optimize_weights`], calling `observe(step, state)` after every clipped update.
pub fn optimize_weights_observed<T: Scalar>(
    z: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ReweightConfig,
    mut observe: impl FnMut(usize, &ClassWeightState<T>),
) -> Result<ReweightOutcome<T>> {
    cfg.validate()?;
    let anchor = marginal_summary(z)?;
    let problem = ReweightProblem::new(z, labels, num_classes, anchor)?;
    let mut state = ClassWeightState::uniform(labels, num_classes)?;
    let sizes: Vec<usize> = state.logits.iter().map(Array1::len).collect();
    let mut adam = Adam::<T>::new(cfg.adam(), &sizes);
    let threshold = T::lit(cfg.clip_threshold);
    let mut workspace = EvalWorkspace::default();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for iteration in 0..cfg.iterations {
        let eval = problem.evaluate(&state, &mut workspace)?;
        if !eval.value.is_finite()
            || eval
                .gradients
                .iter()
                .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(ReweightError::Divergence { iteration });
        }
        trace.push(eval.value);
        {
            let mut blocks: Vec<(&mut [T], &[T])> = state
                .logits
                .iter_mut()
                .zip(&eval.gradients)
                .map(|(s, g)| {
                    (
                        s.as_slice_mut().expect("contiguous logits"),
                        g.as_slice().expect("contiguous gradient"),
                    )
                })
                .collect();
            adam.step(&mut blocks);
        }
        state.clip(threshold);
        observe(iteration, &state);
    }
    let last = problem.objective(&state)?;
    if !last.is_finite() {
        return Err(ReweightError::Divergence {
            iteration: cfg.iterations,
        });
    }
    trace.push(last);
    Ok(ReweightOutcome { state, trace })
}

const WEIGHT_HEADER: &str = "sample_index,class,logit,weight";

/// Writes `sample_index,class,logit,weight` rows in sample order.
pub fn export_weights<T: Scalar>(state: &ClassWeightState<T>, path: &Path) -> Result<()> {
    let weights = state.sample_weights();
    let classes = state.sample_classes();
    let mut logits = vec![T::zero(); state.num_samples()];
    for k in 0..state.num_classes() {
        for (&i, &s) in state.members[k].iter().zip(state.logits[k].iter()) {
            logits[i] = s;
        }
    }
    let mut out = String::with_capacity(32 * (logits.len() + 1));
    out.push_str(WEIGHT_HEADER);
    out.push('\n');
    for i in 0..logits.len() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            classes[i], logits[i], weights[i]
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(out.as_bytes())?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Reads a weight file; logits are authoritative and weights are recomputed.
pub fn import_weights<T: Scalar>(path: &Path) -> Result<ClassWeightState<T>> {
    let text = fs::read_to_string(path)?;
    parse_weights(&text)
}

pub fn parse_weights<T: Scalar>(text: &str) -> Result<ClassWeightState<T>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim_end_matches('\r') == WEIGHT_HEADER => {}
        Some(other) => return Err(ReweightError::Parse(format!("unexpected header {other:?}"))),
        None => return Err(ReweightError::Parse("empty file".into())),
    }
    let mut rows: Vec<(usize, usize, T, T)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(ReweightError::Parse(format!(
                "line {}: expected 4 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| ReweightError::Parse(format!("line {}: invalid {what}", lineno + 2));
        let index = fields[0]
            .parse::<usize>()
            .map_err(|_| bad("sample_index"))?;
        let class = fields[1].parse::<usize>().map_err(|_| bad("class"))?;
        let logit = fields[2].parse::<T>().map_err(|_| bad("logit"))?;
        let weight = fields[3].parse::<T>().map_err(|_| bad("weight"))?;
        rows.push((index, class, logit, weight));
    }
    if rows.is_empty() {
        return Err(ReweightError::Parse("no weight rows".into()));
    }
    rows.sort_by_key(|r| r.0);
    for (expected, row) in rows.iter().enumerate() {
        if row.0 != expected {
            return Err(ReweightError::Malformed(format!(
                "sample indices must cover 0..{} exactly once (found {} at position {expected})",
                rows.len(),
                row.0
            )));
        }
    }
    let num_classes = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let mut members = vec![Vec::new(); num_classes];
    let mut logits = vec![Vec::new(); num_classes];
    let mut sums = vec![T::zero(); num_classes];
    for &(i, k, s, w) in &rows {
        members[k].push(i);
        logits[k].push(s);
        sums[k] += w;
    }
    for (k, sum) in sums.iter().enumerate() {
        if members[k].is_empty() {
            return Err(StatsError::EmptyClass(k).into());
        }
        if (*sum - T::one()).abs() > T::tolerance(WEIGHT_SUM_TOLERANCE) {
            return Err(ReweightError::WeightSum {
                class: k,
                sum: sum.as_f64(),
            });
        }
    }
    ClassWeightState::from_parts(members, logits.into_iter().map(Array1::from).collect())
}
