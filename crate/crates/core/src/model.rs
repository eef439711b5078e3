//! Dense ReLU networks with hand-written backpropagation, plus the biased
//! extractor and final classifier training loops.
//!
//! A network is a list of dense layers; every layer but the last uses ReLU.
//! The "features" of a network are the activations entering its last layer.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrainView;
use crate::optim::{Adam, AdamConfig};
use crate::reweight::{ClassWeightState, ReweightError};
use crate::scalar::Scalar;

/// Rows per forward pass when running a network over a whole dataset.
pub const INFERENCE_CHUNK: usize = 2048;

pub const CHECKPOINT_FORMAT: &str = "ccdb-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss or parameters) at step {step}")]
    Divergence { step: usize },
    #[error("non-finite parameter in layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Weights(#[from] ReweightError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// `y = act(x·W + b)` with `W` stored `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    weight: Array2<T>,
    bias: Array1<T>,
    activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.ncols() {
            return Err(ModelError::DimMismatch {
                what: "layer bias",
                expected: weight.ncols(),
                found: bias.len(),
            });
        }
        if weight.is_empty() {
            return Err(ModelError::InvalidConfig("layer with zero width".into()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<T> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weight) + &self.bias;
        if self.activation == Activation::Relu {
            out.mapv_inplace(|v| v.max(T::zero()));
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    seed: u64,
}

/// Activations of one forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    activations: Vec<Array2<T>>,
}

impl<T> ForwardPass<T> {
    pub fn logits(&self) -> &Array2<T> {
        self.activations
            .last()
            .expect("forward pass has at least one layer")
    }

    /// Input to the last layer.
    pub fn features(&self) -> &Array2<T> {
        &self.activations[self.activations.len() - 2]
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Validates that consecutive layers chain and all values are finite.
    pub fn new(layers: Vec<Dense<T>>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(ModelError::DimMismatch {
                    what: "consecutive layers",
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        if let Some(layer) = layers.iter().position(|l| !l.is_finite()) {
            return Err(ModelError::NonFinite { layer });
        }
        Ok(Self { layers, seed })
    }

    /// He-normal weights, zero biases; ReLU on hidden layers, linear output.
    pub fn init(input_dim: usize, hidden: &[usize], outputs: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "layer widths must be positive, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let std = (2.0 / pair[0] as f64).sqrt();
            let normal =
                Normal::new(0.0, std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
            let weight = Array2::from_shape_simple_fn((pair[0], pair[1]), || {
                T::lit(normal.sample(&mut rng))
            });
            let activation = if i + 2 == dims.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(Dense::new(weight, Array1::zeros(pair[1]), activation)?);
        }
        Self::new(layers, seed)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].inputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<ForwardPass<T>> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let next = layer.apply(activations.last().unwrap().view());
            activations.push(next);
        }
        Ok(ForwardPass { activations })
    }

    /// Backpropagates `dlogits` (and optionally a gradient on the features)
    /// through the cached pass.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        dlogits: ArrayView2<T>,
        dfeatures: Option<ArrayView2<T>>,
    ) -> Result<Gradients<T>> {
        let depth = self.layers.len();
        if pass.activations.len() != depth + 1 || dlogits.dim() != pass.logits().dim() {
            return Err(ModelError::DimMismatch {
                what: "logit gradient",
                expected: pass.logits().ncols(),
                found: dlogits.ncols(),
            });
        }
        if let Some(df) = &dfeatures {
            if df.dim() != pass.features().dim() {
                return Err(ModelError::DimMismatch {
                    what: "feature gradient",
                    expected: pass.features().ncols(),
                    found: df.ncols(),
                });
            }
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut delta = dlogits.to_owned();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Relu {
                Zip::from(&mut delta)
                    .and(&pass.activations[l + 1])
                    .for_each(|d, &out| {
                        if out <= T::zero() {
                            *d = T::zero();
                        }
                    });
            }
            weights.push(
                pass.activations[l]
                    .t()
                    .dot(&delta)
                    .as_standard_layout()
                    .into_owned(),
            );
            biases.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut prev = delta.dot(&layer.weight.t());
                if l + 1 == depth {
                    if let Some(df) = &dfeatures {
                        prev += df;
                    }
                }
                delta = prev;
            }
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients { weights, biases })
    }

    fn map_chunks(
        &self,
        x: ArrayView2<T>,
        width: usize,
        f: impl Fn(&ForwardPass<T>) -> ArrayView2<T>,
    ) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut out = Array2::zeros((x.nrows(), width));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + INFERENCE_CHUNK).min(x.nrows());
            let pass = self.forward(x.slice(s![start..end, ..]))?;
            out.slice_mut(s![start..end, ..]).assign(&f(&pass));
            start = end;
        }
        Ok(out)
    }

    pub fn logits(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.map_chunks(x, self.output_dim(), |p| p.logits().view())
    }

    /// Penultimate representation of every row, in order.
    pub fn extract_features(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.map_chunks(x, self.feature_dim(), |p| p.features().view())
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn block_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    fn apply_adam(&mut self, adam: &mut Adam<T>, grads: &Gradients<T>) {
        let mut blocks: Vec<(&mut [T], &[T])> = Vec::with_capacity(2 * self.layers.len());
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            blocks.push((
                layer
                    .weight
                    .as_slice_mut()
                    .expect("weights are standard layout"),
                gw.as_slice().expect("gradients are standard layout"),
            ));
            blocks.push((
                layer.bias.as_slice_mut().expect("contiguous bias"),
                gb.as_slice().expect("contiguous bias gradient"),
            ));
        }
        adam.step(&mut blocks);
    }

    fn all_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weight: l.weight.iter().map(|v| v.as_f64()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let layers = ckpt
            .layers
            .iter()
            .map(|r| {
                let weight = Array2::from_shape_vec(
                    (r.inputs, r.outputs),
                    r.weight.iter().map(|&v| T::lit(v)).collect(),
                )
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
                if r.bias.len() != r.outputs {
                    return Err(ModelError::Checkpoint(
                        "bias length does not match layer width".into(),
                    ));
                }
                Dense::new(
                    weight,
                    r.bias.iter().map(|&v| T::lit(v)).collect(),
                    r.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, ckpt.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        crate::data::write_atomic(path, json.as_bytes())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// JSON container: layer dims, activation tags, row-major parameters, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Losses

fn check_labels(rows: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(ModelError::DimMismatch {
            what: "labels",
            expected: rows,
            found: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(ModelError::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy.
pub fn ce_loss<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    Ok(ce_loss_grad(logits, labels)?.0)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn ce_loss_grad<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    check_labels(logits.nrows(), labels, logits.ncols())?;
    let n = logits.nrows();
    if n == 0 {
        return Ok((T::zero(), Array2::zeros(logits.raw_dim())));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi = (v - max).exp();
            sum += *gi;
        }
        total += sum.ln() + max - row[y];
        g.mapv_inplace(|e| e / sum * inv_n);
        g[y] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Intra-class compactness over one batch:
/// `(λ/K) Σₖ 1/(m(m−1)) Σ_{i≠j} ‖zᵢ − zⱼ‖²`, with classes of fewer than two
/// batch members contributing nothing. Estimated per batch, so it is a biased
/// estimate of the full-data sum.
pub fn compactness_loss<T: Scalar>(
    features: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    lambda: T,
) -> Result<T> {
    Ok(compactness_loss_grad(features, labels, num_classes, lambda)?.0)
}

pub fn compactness_loss_grad<T: Scalar>(
    features: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    lambda: T,
) -> Result<(T, Array2<T>)> {
    check_labels(features.nrows(), labels, num_classes)?;
    let d = features.ncols();
    let mut sums = Array2::<T>::zeros((num_classes, d));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let mut acc = sums.row_mut(y);
        acc += &row;
        counts[y] += 1;
    }
    for (mut acc, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            acc.mapv_inplace(|v| v / T::lit(c as f64));
        }
    }
    let scale = lambda / T::lit(num_classes as f64);
    let mut value = T::zero();
    let mut grad = Array2::zeros(features.raw_dim());
    for ((row, mut g), &y) in features.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let m = counts[y];
        if m < 2 {
            continue;
        }
        let mf = T::lit(m as f64);
        let mut sq = T::zero();
        for ((gi, &z), &mu) in g.iter_mut().zip(row.iter()).zip(sums.row(y).iter()) {
            let diff = z - mu;
            sq += diff * diff;
            *gi = scale * T::lit(4.0) / (mf - T::one()) * diff;
        }
        // Σ_{i≠j}‖zᵢ − zⱼ‖² = 2m Σᵢ ‖zᵢ − z̄‖²
        value += scale * T::lit(2.0) / (mf - T::one()) * sq;
    }
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Sampling

/// Draws with replacement from `q(i) = w_{k(i)}[i] / K`: a class uniformly,
/// then a member of that class by its weight.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    classes: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new<W: Scalar>(state: &ClassWeightState<W>, seed: u64) -> Result<Self> {
        let classes = (0..state.num_classes())
            .map(|k| {
                let w = state.weights(k);
                let dist = WeightedIndex::new(w.values().iter().map(|v| v.as_f64()))
                    .map_err(|e| ModelError::InvalidConfig(format!("class {k} weights: {e}")))?;
                Ok((state.members(k).to_vec(), dist))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        let k = self.rng.gen_range(0..self.classes.len());
        let (members, dist) = &self.classes[k];
        members[dist.sample(&mut self.rng)]
    }

    pub fn draw_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.draw()).collect()
    }
}

/// `n_draws` sample indices from the weighted sampler.
pub fn weighted_sample<W: Scalar>(
    state: &ClassWeightState<W>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(WeightedSampler::new(state, seed)?.draw_batch(n_draws))
}

/// Epoch-wise shuffled batches that wrap across epoch boundaries.
#[derive(Debug, Clone)]
struct ShuffleSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ShuffleSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    fn draw_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - batch.len()).min(self.order.len() - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// Training

fn default_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasedTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Compactness coefficient λ.
    pub compactness: f64,
}

impl Default for BiasedTrainConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            epochs: 5,
            batch_size: 256,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            compactness: 0.5,
        }
    }
}

impl BiasedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0 && self.compactness >= 0.0) {
            return bad(
                "learning_rate must be positive; weight_decay and compactness non-negative",
            );
        }
        Ok(())
    }
}

/// How the final classifier's checkpoint is chosen on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    /// Fraction of validation samples classified correctly.
    Average,
    /// Lowest per-class validation accuracy.
    WorstClass,
    /// Keep the last iterate.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalTrainConfig {
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub selection: SelectionMetric,
}

impl Default for FinalTrainConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            iterations: 5000,
            batch_size: 256,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            eval_every: 100,
            selection: SelectionMetric::Average,
        }
    }
}

impl FinalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("iterations, batch_size and eval_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Mlp<T>,
    pub trace: Vec<LossRecord>,
    /// Step of the selected checkpoint and its validation score.
    pub selected: Option<(usize, f64)>,
}

fn gather<T: Scalar>(view: &TrainView<'_, T>, idx: &[usize]) -> (Array2<T>, Vec<usize>) {
    (
        view.inputs().select(Axis(0), idx),
        idx.iter().map(|&i| view.labels()[i]).collect(),
    )
}

/// Minibatch Adam on cross-entropy plus intra-class compactness of the
/// penultimate features. With `compactness = 0` this is plain ERM.
pub fn train_biased<T: Scalar>(
    view: TrainView<'_, T>,
    cfg: &BiasedTrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(ModelError::InvalidConfig("empty training set".into()));
    }
    let k = view.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::init(view.inputs().ncols(), &cfg.hidden, k, rng.gen())?;
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_learning_rate(cfg.learning_rate)
        },
        &model.block_sizes(),
    );
    let lambda = T::lit(cfg.compactness);
    let mut order: Vec<usize> = (0..view.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = gather(&view, idx);
            let pass = model.forward(x.view())?;
            let (ce, dlogits) = ce_loss_grad(pass.logits().view(), &y)?;
            let (loss, dfeat) = if cfg.compactness > 0.0 {
                let (c, g) = compactness_loss_grad(pass.features().view(), &y, k, lambda)?;
                (ce + c, Some(g))
            } else {
                (ce, None)
            };
            let grads = model.backward(&pass, dlogits.view(), dfeat.as_ref().map(|g| g.view()))?;
            model.apply_adam(&mut adam, &grads);
            if !loss.is_finite() || !model.all_finite() {
                return Err(ModelError::Divergence { step });
            }
            trace.push(LossRecord {
                step,
                loss: loss.as_f64(),
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        selected: None,
    })
}

/// Validation score used for checkpoint selection.
pub fn selection_score(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    metric: SelectionMetric,
) -> f64 {
    match metric {
        SelectionMetric::Average | SelectionMetric::Last => {
            let hits = predictions
                .iter()
                .zip(labels)
                .filter(|(p, y)| p == y)
                .count();
            hits as f64 / labels.len().max(1) as f64
        }
        SelectionMetric::WorstClass => {
            let mut hits = vec![0usize; num_classes];
            let mut totals = vec![0usize; num_classes];
            for (&p, &y) in predictions.iter().zip(labels) {
                totals[y] += 1;
                hits[y] += usize::from(p == y);
            }
            hits.iter()
                .zip(&totals)
                .filter(|(_, &t)| t > 0)
                .map(|(&h, &t)| h as f64 / t as f64)
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// Cross-entropy training of a fresh classifier. Batches come from the
/// weighted sampler when `weights` is given and from shuffled epochs
/// otherwise. When `val` is given, the checkpoint with the best validation
/// score (earliest on ties) is returned.
pub fn train_final<T: Scalar, W: Scalar>(
    train: TrainView<'_, T>,
    weights: Option<&ClassWeightState<W>>,
    val: Option<TrainView<'_, T>>,
    cfg: &FinalTrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::InvalidConfig("empty training set".into()));
    }
    let k = train.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::init(train.inputs().ncols(), &cfg.hidden, k, rng.gen())?;
    let sampler_seed: u64 = rng.gen();
    enum Batches {
        Weighted(WeightedSampler),
        Shuffled(ShuffleSampler),
    }
    let mut batches = match weights {
        Some(state) => {
            if state.num_samples() != train.len() {
                return Err(ModelError::DimMismatch {
                    what: "weight file samples",
                    expected: train.len(),
                    found: state.num_samples(),
                });
            }
            state.check_labels(train.labels(), k)?;
            Batches::Weighted(WeightedSampler::new(state, sampler_seed)?)
        }
        None => Batches::Shuffled(ShuffleSampler::new(train.len(), sampler_seed)),
    };
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_learning_rate(cfg.learning_rate)
        },
        &model.block_sizes(),
    );
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(usize, f64, Mlp<T>)> = None;
    for step in 0..cfg.iterations {
        let idx = match &mut batches {
            Batches::Weighted(s) => s.draw_batch(cfg.batch_size),
            Batches::Shuffled(s) => s.draw_batch(cfg.batch_size),
        };
        let (x, y) = gather(&train, &idx);
        let pass = model.forward(x.view())?;
        let (loss, dlogits) = ce_loss_grad(pass.logits().view(), &y)?;
        let grads = model.backward(&pass, dlogits.view(), None)?;
        model.apply_adam(&mut adam, &grads);
        if !loss.is_finite() || !model.all_finite() {
            return Err(ModelError::Divergence { step });
        }
        trace.push(LossRecord {
            step,
            loss: loss.as_f64(),
        });
        let done = step + 1;
        let checkpoint = done % cfg.eval_every == 0 || done == cfg.iterations;
        if let (Some(val), true, false) = (&val, checkpoint, cfg.selection == SelectionMetric::Last)
        {
            let preds = model.predict(val.inputs())?;
            let score = selection_score(&preds, val.labels(), k, cfg.selection);
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((done, score, model.clone()));
            }
        }
    }
    Ok(match best {
        Some((step, score, model)) => TrainOutcome {
            model,
            trace,
            selected: Some((step, score)),
        },
        None => TrainOutcome {
            model,
            trace,
            selected: None,
        },
    })
}
