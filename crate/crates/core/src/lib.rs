//! Class-conditional distribution balancing (CCDB).
//!
//! A three-stage, bias-annotation-free pipeline for group-robust
//! classification:
//!
//! 1. train a deliberately biased feature extractor on a random subset of
//!    the training data, with an intra-class compactness penalty;
//! 2. learn per-class sample weights that minimize the Gaussian
//!    2-Wasserstein distance between each reweighted class-conditional
//!    feature distribution and the fixed marginal;
//! 3. train the final classifier on samples drawn with the learned weights.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` / `f64`). The
//! pipeline runs the reweighting stage in `f64` and the networks in `f32`;
//! aliases for both are exported below.

pub mod data;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reweight;
pub mod scalar;
pub mod stats;

pub use scalar::Scalar;

pub type SymmetricMatrix64 = linalg::SymmetricMatrix<f64>;
pub type SymmetricMatrix32 = linalg::SymmetricMatrix<f32>;
pub type GaussianSummary64 = stats::GaussianSummary<f64>;
pub type GaussianSummary32 = stats::GaussianSummary<f32>;
pub type WeightVector64 = stats::WeightVector<f64>;
pub type ClassWeightState64 = reweight::ClassWeightState<f64>;
pub type ClassWeightState32 = reweight::ClassWeightState<f32>;
pub type Mlp32 = model::Mlp<f32>;
pub type Mlp64 = model::Mlp<f64>;
