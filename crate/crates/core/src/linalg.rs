//! Dense symmetric and SPD matrix numerics.
//!
//! Eigendecompositions use cyclic Jacobi rotations, which are accurate to
//! working precision for symmetric input and need no external LAPACK. Every
//! square root and inverse square root goes through an eigendecomposition
//! with an explicit eigenvalue floor, because weighted covariances are
//! frequently rank deficient.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::Scalar;

/// Eigenvalue floor applied by default in square roots and inverse square roots.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-8;
/// Sweep budget for the Jacobi eigensolver.
pub const MAX_JACOBI_SWEEPS: usize = 100;
/// Relative off-diagonal norm at which Jacobi iteration stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Largest supported matrix dimension.
pub const MAX_DIM: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix dimension {0} exceeds the supported maximum of {MAX_DIM}")]
    TooLarge(usize),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("eigensolver did not converge for {name} after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence {
        name: String,
        sweeps: usize,
        off_norm: f64,
    },
    #[error("{name} is not positive semidefinite: eigenvalue {eigenvalue:e} is below -{floor:e}")]
    NotPsd {
        name: String,
        eigenvalue: f64,
        floor: f64,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Square matrix with exactly symmetric, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix<T> {
    entries: Array2<T>,
}

impl<T: Scalar> SymmetricMatrix<T> {
    /// Symmetrizes `entries` as `(A + Aᵀ) / 2`.
    pub fn new(mut entries: Array2<T>) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        if rows > MAX_DIM {
            return Err(LinalgError::TooLarge(rows));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let half = T::lit(0.5);
        for i in 0..rows {
            for j in (i + 1)..rows {
                let avg = (entries[[i, j]] + entries[[j, i]]) * half;
                entries[[i, j]] = avg;
                entries[[j, i]] = avg;
            }
        }
        Ok(Self { entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: Array2::eye(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: Array2::zeros((dim, dim)),
        }
    }

    pub fn from_diag(diag: &[T]) -> Result<Self> {
        if diag.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self {
            entries: Array2::from_diag(&Array1::from(diag.to_vec())),
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.entries
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.entries.view()
    }

    pub fn into_array(self) -> Array2<T> {
        self.entries
    }

    pub fn trace(&self) -> T {
        self.entries.diag().sum()
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Returns `self + delta * I`.
    pub fn with_ridge(&self, delta: T) -> Self {
        let mut entries = self.entries.clone();
        entries.diag_mut().mapv_inplace(|v| v + delta);
        Self { entries }
    }

    /// Congruence `B · self · B` for symmetric `B`.
    pub fn sandwich(&self, outer: &SymmetricMatrix<T>) -> Result<Self> {
        check_same_dim(self, outer)?;
        let product = outer.entries.dot(&self.entries).dot(&outer.entries);
        Self::new(product)
    }
}

fn check_same_dim<T: Scalar>(a: &SymmetricMatrix<T>, b: &SymmetricMatrix<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Eigenvalues in descending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition<T> {
    pub eigenvalues: Array1<T>,
    pub eigenvectors: Array2<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn reconstruct(&self) -> Array2<T> {
        let scaled = &self.eigenvectors * &self.eigenvalues.view().insert_axis(Axis(0));
        scaled.dot(&self.eigenvectors.t())
    }

    /// Spectral function `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(T) -> T) -> Result<SymmetricMatrix<T>> {
        let mapped = self.eigenvalues.mapv(f);
        let scaled = &self.eigenvectors * &mapped.view().insert_axis(Axis(0));
        SymmetricMatrix::new(scaled.dot(&self.eigenvectors.t()))
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigenvalues.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_abs_eigenvalue(&self) -> T {
        self.eigenvalues
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig<T: Scalar>(s: &SymmetricMatrix<T>) -> Result<EigenDecomposition<T>> {
    sym_eig_named(s, "symmetric matrix")
}

/// As [`sym_eig`], with `name` reported in convergence errors.
pub fn sym_eig_named<T: Scalar>(
    s: &SymmetricMatrix<T>,
    name: &str,
) -> Result<EigenDecomposition<T>> {
    let n = s.dim();
    let mut a: Vec<T> = s.entries.iter().copied().collect();
    let mut vt: Vec<T> = Array2::<T>::eye(n).into_iter().collect();
    jacobi_in_place(&mut a, &mut vt, n, name)?;
    Ok(collect_sorted(&a, &vt, n))
}

/// Eigendecomposition started from an approximate eigenbasis `guess`
/// (orthonormal columns). Converges in few sweeps when `guess` is close,
/// e.g. the eigenvectors of a slightly different matrix.
pub fn sym_eig_warm<T: Scalar>(
    s: &SymmetricMatrix<T>,
    guess: &Array2<T>,
    name: &str,
) -> Result<EigenDecomposition<T>> {
    let n = s.dim();
    if guess.dim() != (n, n) {
        return Err(LinalgError::DimMismatch {
            left: n,
            right: guess.nrows(),
        });
    }
    let rotated = guess.t().dot(&s.entries).dot(guess);
    let rotated = SymmetricMatrix::new(rotated)?;
    let mut a: Vec<T> = rotated.entries.into_iter().collect();
    let mut vt: Vec<T> = guess.t().iter().copied().collect();
    jacobi_in_place(&mut a, &mut vt, n, name)?;
    Ok(collect_sorted(&a, &vt, n))
}

fn off_and_diag_norms<T: Scalar>(a: &[T], n: usize) -> (T, T) {
    let mut off = T::zero();
    let mut diag = T::zero();
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            if i == j {
                diag += v * v;
            } else {
                off += v * v;
            }
        }
    }
    (off.sqrt(), diag.sqrt())
}

/// Rotates `a` (row-major, symmetric) to diagonal form, accumulating the
/// rotations into the rows of `vt`.
fn jacobi_in_place<T: Scalar>(a: &mut [T], vt: &mut [T], n: usize, name: &str) -> Result<()> {
    let tol = T::tolerance(JACOBI_TOLERANCE);
    let hundred = T::lit(100.0);
    let half = T::lit(0.5);
    for sweep in 0..MAX_JACOBI_SWEEPS {
        let (off, diag) = off_and_diag_norms(a, n);
        if off <= tol * diag || off == T::zero() {
            return Ok(());
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let g = hundred * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = T::zero();
                    a[q * n + p] = T::zero();
                    continue;
                }
                let theta = (aqq - app) * half / apq;
                // theta² would overflow
                let t = if theta.abs() > T::max_value().sqrt() {
                    half / theta
                } else {
                    let mag = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    if theta < T::zero() {
                        -mag
                    } else {
                        mag
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                let (row_p, row_q) = two_rows(a, n, p, q);
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = row_p[k];
                    let akq = row_q[k];
                    row_p[k] = c * akp - s * akq;
                    row_q[k] = s * akp + c * akq;
                }
                row_p[p] = app - t * apq;
                row_q[q] = aqq + t * apq;
                row_p[q] = T::zero();
                row_q[p] = T::zero();
                for k in 0..n {
                    if k != p && k != q {
                        a[k * n + p] = a[p * n + k];
                        a[k * n + q] = a[q * n + k];
                    }
                }
                let (vp, vq) = two_rows(vt, n, p, q);
                for k in 0..n {
                    let x = vp[k];
                    let y = vq[k];
                    vp[k] = c * x - s * y;
                    vq[k] = s * x + c * y;
                }
            }
        }
    }
    let (off, diag) = off_and_diag_norms(a, n);
    if off <= tol * diag || off == T::zero() {
        return Ok(());
    }
    Err(LinalgError::NoConvergence {
        name: name.to_string(),
        sweeps: MAX_JACOBI_SWEEPS,
        off_norm: off.as_f64(),
    })
}

/// Disjoint mutable borrows of rows `p < q` of a row-major `n`-wide buffer.
fn two_rows<T>(buf: &mut [T], n: usize, p: usize, q: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * n);
    (&mut head[p * n..(p + 1) * n], &mut tail[..n])
}

fn collect_sorted<T: Scalar>(a: &[T], vt: &[T], n: usize) -> EigenDecomposition<T> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| a[i * n + i]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            eigenvectors[[row, col]] = vt[src * n + row];
        }
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

fn check_psd<T: Scalar>(eig: &EigenDecomposition<T>, floor: T, name: &str) -> Result<()> {
    let min = eig.min_eigenvalue();
    if min < -floor {
        return Err(LinalgError::NotPsd {
            name: name.to_string(),
            eigenvalue: min.as_f64(),
            floor: floor.as_f64(),
        });
    }
    Ok(())
}

/// `V diag(√max(λ, floor)) Vᵀ`; eigenvalues below `-floor` are rejected.
pub fn spd_sqrt<T: Scalar>(s: &SymmetricMatrix<T>, floor: T) -> Result<SymmetricMatrix<T>> {
    let eig = sym_eig_named(s, "matrix square root input")?;
    check_psd(&eig, floor, "matrix square root input")?;
    eig.map_spectrum(|l| l.max(floor).sqrt())
}

/// `V diag(1/√max(λ, floor)) Vᵀ`; eigenvalues below `-floor` are rejected.
pub fn spd_inv_sqrt<T: Scalar>(s: &SymmetricMatrix<T>, floor: T) -> Result<SymmetricMatrix<T>> {
    let eig = sym_eig_named(s, "inverse square root input")?;
    check_psd(&eig, floor, "inverse square root input")?;
    eig.map_spectrum(|l| T::one() / l.max(floor).sqrt())
}

/// Negative-eigenvalue tolerance for matrices that are PSD up to rounding.
fn rounding_tolerance<T: Scalar>(eig: &EigenDecomposition<T>) -> T {
    T::tolerance(DEFAULT_EIG_FLOOR) * (T::one() + eig.max_abs_eigenvalue())
}

/// PSD square root with eigenvalues clamped at zero (no additive floor), so
/// exactly singular inputs keep exact roots.
fn psd_sqrt_clamped<T: Scalar>(s: &SymmetricMatrix<T>, name: &str) -> Result<SymmetricMatrix<T>> {
    let eig = sym_eig_named(s, name)?;
    check_psd(&eig, rounding_tolerance(&eig), name)?;
    eig.map_spectrum(|l| l.max(T::zero()).sqrt())
}

/// Fixed covariance anchor for repeated Bures evaluations against it.
///
/// Holds `C̄^{1/2}` so each evaluation costs one eigendecomposition of the
/// congruence `C̄^{1/2} C C̄^{1/2}`.
#[derive(Debug, Clone)]
pub struct BuresAnchor<T> {
    sqrt: SymmetricMatrix<T>,
    trace: T,
    floor: T,
}

/// Bures term together with the previous inner eigenbasis for warm starts.
#[derive(Debug, Clone)]
pub struct BuresEval<T> {
    pub value: T,
    pub grad: SymmetricMatrix<T>,
    pub inner_basis: Array2<T>,
}

impl<T: Scalar> BuresAnchor<T> {
    pub fn new(cbar: &SymmetricMatrix<T>, floor: T) -> Result<Self> {
        Ok(Self {
            sqrt: psd_sqrt_clamped(cbar, "anchor covariance")?,
            trace: cbar.trace(),
            floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.sqrt.dim()
    }

    pub fn sqrt(&self) -> &SymmetricMatrix<T> {
        &self.sqrt
    }

    fn inner_eig(
        &self,
        ck: &SymmetricMatrix<T>,
        warm: Option<&Array2<T>>,
    ) -> Result<EigenDecomposition<T>> {
        let inner = ck.sandwich(&self.sqrt)?;
        let eig = match warm {
            Some(guess) => sym_eig_warm(&inner, guess, "Bures inner product")?,
            None => sym_eig_named(&inner, "Bures inner product")?,
        };
        check_psd(&eig, rounding_tolerance(&eig), "Bures inner product")?;
        Ok(eig)
    }

    fn value_from(&self, ck: &SymmetricMatrix<T>, eig: &EigenDecomposition<T>) -> T {
        let root_trace: T = eig
            .eigenvalues
            .iter()
            .map(|l| l.max(T::zero()).sqrt())
            .sum();
        (ck.trace() + self.trace - T::lit(2.0) * root_trace).max(T::zero())
    }

    /// `tr(C + C̄ − 2 (C̄^{1/2} C C̄^{1/2})^{1/2})`, clamped at zero.
    pub fn term(&self, ck: &SymmetricMatrix<T>) -> Result<T> {
        if ck.dim() != self.dim() {
            return Err(LinalgError::DimMismatch {
                left: ck.dim(),
                right: self.dim(),
            });
        }
        let eig = self.inner_eig(ck, None)?;
        Ok(self.value_from(ck, &eig))
    }

    /// Value and gradient `I − C̄^{1/2} (C̄^{1/2} C C̄^{1/2})^{-1/2} C̄^{1/2}`
    /// with respect to `C`; `warm` optionally seeds the inner eigensolver.
    pub fn term_and_grad(
        &self,
        ck: &SymmetricMatrix<T>,
        warm: Option<&Array2<T>>,
    ) -> Result<BuresEval<T>> {
        if ck.dim() != self.dim() {
            return Err(LinalgError::DimMismatch {
                left: ck.dim(),
                right: self.dim(),
            });
        }
        let eig = self.inner_eig(ck, warm)?;
        let value = self.value_from(ck, &eig);
        let floor = self.floor;
        let inv_root = eig.map_spectrum(|l| T::one() / l.max(floor).sqrt())?;
        let pulled = inv_root.sandwich(&self.sqrt)?;
        let mut grad = Array2::<T>::eye(self.dim());
        grad -= pulled.as_array();
        Ok(BuresEval {
            value,
            grad: SymmetricMatrix::new(grad)?,
            inner_basis: eig.eigenvectors,
        })
    }
}

/// Bures covariance term of the Gaussian 2-Wasserstein distance.
pub fn bures_term<T: Scalar>(ck: &SymmetricMatrix<T>, cbar: &SymmetricMatrix<T>) -> Result<T> {
    check_same_dim(ck, cbar)?;
    BuresAnchor::new(cbar, T::lit(DEFAULT_EIG_FLOOR))?.term(ck)
}

/// Gradient of [`bures_term`] with respect to its first argument.
pub fn bures_grad<T: Scalar>(
    ck: &SymmetricMatrix<T>,
    cbar: &SymmetricMatrix<T>,
) -> Result<SymmetricMatrix<T>> {
    check_same_dim(ck, cbar)?;
    Ok(BuresAnchor::new(cbar, T::lit(DEFAULT_EIG_FLOOR))?
        .term_and_grad(ck, None)?
        .grad)
}
