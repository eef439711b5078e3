//! Weighted Gaussian summaries of feature matrices and the distances and
//! diagnostics built on them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::linalg::{bures_term, sym_eig_named, LinalgError, SymmetricMatrix};
use crate::scalar::Scalar;

/// One row of latent features per sample.
pub type FeatureMatrix<T> = Array2<T>;

/// Relative ridge `floor = COV_RIDGE_REL × mean(diag C̄)` added to
/// covariances before any inverse or inverse square root.
pub const COV_RIDGE_REL: f64 = 1e-6;
/// Tolerance on the unit-sum constraint of a weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {rows} feature rows vs {weights} weights")]
    LengthMismatch { rows: usize, weights: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("anchor covariance is singular after flooring")]
    SingularAnchor,
    #[error("target vector is constant")]
    ConstantTarget,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T> {
    values: Array1<T>,
}

impl<T: Scalar> WeightVector<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(StatsError::InvalidWeights("empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(StatsError::InvalidWeights(format!(
                "entry {bad} is negative or non-finite"
            )));
        }
        let sum = values.sum();
        if (sum - T::one()).abs() > T::tolerance(WEIGHT_SUM_TOLERANCE) {
            return Err(StatsError::InvalidWeights(format!(
                "sum is {sum}, expected 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform weights need at least one entry");
        Self {
            values: Array1::from_elem(n, T::one() / T::lit(n as f64)),
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut values = Array1::zeros(n);
        values[index] = T::one();
        Self { values }
    }

    /// Numerically stable softmax of `logits`.
    pub fn softmax(logits: ArrayView1<T>) -> Self {
        Self {
            values: softmax(logits),
        }
    }

    pub fn values(&self) -> ArrayView1<'_, T> {
        self.values.view()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut exp = logits.mapv(|s| (s - max).exp());
    let total = exp.sum();
    exp /= total;
    exp
}

/// Mean and covariance of a (weighted) empirical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary<T> {
    pub mean: Array1<T>,
    pub cov: SymmetricMatrix<T>,
}

impl<T: Scalar> GaussianSummary<T> {
    pub fn new(mean: Array1<T>, cov: SymmetricMatrix<T>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(StatsError::DimMismatch(mean.len(), cov.dim()));
        }
        Ok(Self { mean, cov })
    }

    pub fn weighted(z: ArrayView2<T>, w: &WeightVector<T>) -> Result<Self> {
        let (mean, cov) = weighted_moments(z, w.values())?;
        Ok(Self {
            mean,
            cov: SymmetricMatrix::new(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ridge `COV_RIDGE_REL × mean(diag C)` for this summary used as an anchor.
    pub fn ridge(&self) -> T {
        let d = self.dim().max(1);
        T::lit(COV_RIDGE_REL) * self.cov.trace() / T::lit(d as f64)
    }
}

pub(crate) fn weighted_moments<T: Scalar>(
    z: ArrayView2<T>,
    w: ArrayView1<T>,
) -> Result<(Array1<T>, Array2<T>)> {
    if z.nrows() != w.len() {
        return Err(StatsError::LengthMismatch {
            rows: z.nrows(),
            weights: w.len(),
        });
    }
    let mean = z.t().dot(&w);
    let sqrt_w = w.mapv(|v| v.max(T::zero()).sqrt());
    let mut centered = &z - &mean.view().insert_axis(Axis(0));
    centered *= &sqrt_w.view().insert_axis(Axis(1));
    let cov = centered.t().dot(&centered);
    Ok((mean, cov))
}

/// `Σᵢ wᵢ zᵢ`.
pub fn weighted_mean<T: Scalar>(z: ArrayView2<T>, w: &WeightVector<T>) -> Result<Array1<T>> {
    if z.nrows() != w.len() {
        return Err(StatsError::LengthMismatch {
            rows: z.nrows(),
            weights: w.len(),
        });
    }
    Ok(z.t().dot(&w.values()))
}

/// Weighted population covariance `Σᵢ wᵢ (zᵢ − μ)(zᵢ − μ)ᵀ` (no bias correction).
pub fn weighted_cov<T: Scalar>(
    z: ArrayView2<T>,
    w: &WeightVector<T>,
) -> Result<SymmetricMatrix<T>> {
    let (_, cov) = weighted_moments(z, w.values())?;
    Ok(SymmetricMatrix::new(cov)?)
}

/// Uniform-weight summary of all rows; the fixed anchor of the reweighting objective.
pub fn marginal_summary<T: Scalar>(z: ArrayView2<T>) -> Result<GaussianSummary<T>> {
    if z.nrows() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: z.nrows(),
        });
    }
    GaussianSummary::weighted(z, &WeightVector::uniform(z.nrows()))
}

fn squared_distance<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Squared 2-Wasserstein distance between Gaussians: `‖μₖ − μ̄‖² + d_B(Cₖ, C̄)`.
pub fn w2_gaussian<T: Scalar>(gk: &GaussianSummary<T>, gbar: &GaussianSummary<T>) -> Result<T> {
    if gk.dim() != gbar.dim() {
        return Err(StatsError::DimMismatch(gk.dim(), gbar.dim()));
    }
    let mean_term = squared_distance(gk.mean.view(), gbar.mean.view());
    Ok(mean_term + bures_term(&gk.cov, &gbar.cov)?)
}

/// `KL(N(μₖ, Cₖ) ‖ N(μ̄, C̄))` with both covariances ridged by the anchor's floor.
pub fn gaussian_kl<T: Scalar>(gk: &GaussianSummary<T>, gbar: &GaussianSummary<T>) -> Result<T> {
    if gk.dim() != gbar.dim() {
        return Err(StatsError::DimMismatch(gk.dim(), gbar.dim()));
    }
    let ridge = gbar.ridge();
    if ridge.is_nan() || ridge <= T::zero() {
        return Err(StatsError::SingularAnchor);
    }
    let anchor = sym_eig_named(&gbar.cov.with_ridge(ridge), "anchor covariance")?;
    if anchor.min_eigenvalue() <= T::zero() {
        return Err(StatsError::SingularAnchor);
    }
    let inv = anchor.map_spectrum(|l| T::one() / l)?;
    let logdet_bar: T = anchor.eigenvalues.iter().map(|l| l.ln()).sum();
    let class = sym_eig_named(&gk.cov.with_ridge(ridge), "class covariance")?;
    let logdet_k: T = class.eigenvalues.iter().map(|l| l.max(ridge).ln()).sum();

    let cov_k = gk.cov.with_ridge(ridge);
    let trace_term: T = (inv.as_array() * cov_k.as_array()).sum();
    let diff = &gbar.mean - &gk.mean;
    let mahalanobis = diff.dot(&inv.as_array().dot(&diff));
    let d = T::lit(gk.dim() as f64);
    let kl = T::lit(0.5) * (trace_term + mahalanobis - d + logdet_bar - logdet_k);
    Ok(kl.max(T::zero()))
}

/// Sample indices of each class, in dataset order.
pub fn partition_by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(StatsError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        members[label].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(StatsError::EmptyClass(empty));
    }
    Ok(members)
}

/// Gaussian estimate of `I(z; y) = Σₖ p(k) KL(p(z|y=k) ‖ p(z))`.
///
/// Without weights, classes are summarized uniformly and `p(k)` is the
/// class frequency. With per-class weights (one vector per class, ordered
/// like the class members) each class uses its weighted summary and
/// `p(k) = 1/K`. The anchor is always the uniform marginal.
pub fn mi_estimate<T: Scalar>(
    z: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    weights: Option<&[WeightVector<T>]>,
) -> Result<T> {
    if z.nrows() != labels.len() {
        return Err(StatsError::LengthMismatch {
            rows: z.nrows(),
            weights: labels.len(),
        });
    }
    let members = partition_by_class(labels, num_classes)?;
    if let Some(ws) = weights {
        if ws.len() != num_classes {
            return Err(StatsError::InvalidWeights(format!(
                "{} weight vectors for {num_classes} classes",
                ws.len()
            )));
        }
    }
    let anchor = marginal_summary(z)?;
    let n = T::lit(labels.len() as f64);
    let mut total = T::zero();
    for (k, idx) in members.iter().enumerate() {
        let zk = z.select(Axis(0), idx);
        let (summary, prior) = match weights {
            Some(ws) => {
                if ws[k].len() != idx.len() {
                    return Err(StatsError::LengthMismatch {
                        rows: idx.len(),
                        weights: ws[k].len(),
                    });
                }
                (
                    GaussianSummary::weighted(zk.view(), &ws[k])?,
                    T::one() / T::lit(num_classes as f64),
                )
            }
            None => (
                GaussianSummary::weighted(zk.view(), &WeightVector::uniform(idx.len()))?,
                T::lit(idx.len() as f64) / n,
            ),
        };
        total += prior * gaussian_kl(&summary, &anchor)?;
    }
    Ok(total)
}

/// Per-column Pearson correlation with `target`; zero-variance columns report 0.
pub fn pearson_profile<T: Scalar>(z: ArrayView2<T>, target: ArrayView1<T>) -> Result<Array1<T>> {
    if z.nrows() != target.len() {
        return Err(StatsError::LengthMismatch {
            rows: z.nrows(),
            weights: target.len(),
        });
    }
    let n = T::lit(target.len() as f64);
    let t_mean = target.sum() / n;
    let t_centered = target.mapv(|v| v - t_mean);
    let t_ss: T = t_centered.iter().map(|v| *v * *v).sum();
    if t_ss.is_nan() || t_ss <= T::zero() {
        return Err(StatsError::ConstantTarget);
    }
    let means = z
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(z.ncols()));
    let centered = &z - &means.view().insert_axis(Axis(0));
    let cross = centered.t().dot(&t_centered);
    let ss = centered.mapv(|v| v * v).sum_axis(Axis(0));
    Ok(Array1::from_iter(cross.iter().zip(ss.iter()).map(
        |(&c, &s)| {
            if s > T::zero() {
                (c / (s * t_ss).sqrt()).max(-T::one()).min(T::one())
            } else {
                T::zero()
            }
        },
    )))
}
