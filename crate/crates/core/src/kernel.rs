//! Kernels, kernel ridge regression and the kernel-inducing-point (KIP) loss.
//!
//! The KIP loss of a support set `(X̃, Ỹ)` against targets `(X, Y)` is
//!
//! ```text
//! H(X̃) = ½ ‖Y − K(X, X̃) (K(X̃, X̃) + λI)⁻¹ Ỹ‖²_F
//! ```
//!
//! For the RBF kernel the gradient with respect to `X̃` is computed in closed
//! form through both kernel blocks and the linear solve. The arc-cosine NTK
//! gradient uses central finite differences.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, factor_with_ridge, sq_dist, Cholesky, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelKind {
    /// `exp(−‖a−b‖² / (2σ²))`
    Rbf { bandwidth: f64 },
    /// Infinite-width NTK of a bias-free ReLU network with `depth` hidden layers.
    ArccosNtk { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Absolute(f64),
    /// `λ = λ0 · mean(diag K(X̃, X̃))`
    TraceScaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default = "default_regularization")]
    pub regularization: Regularization,
}

fn default_regularization() -> Regularization {
    Regularization::TraceScaled(1e-6)
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Self {
        Self {
            kind: KernelKind::Rbf { bandwidth },
            regularization: default_regularization(),
        }
    }

    pub fn arccos_ntk(depth: usize) -> Self {
        Self {
            kind: KernelKind::ArccosNtk { depth },
            regularization: default_regularization(),
        }
    }

    pub fn with_regularization(mut self, regularization: Regularization) -> Self {
        self.regularization = regularization;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Rbf { bandwidth } if !(bandwidth > 0.0) || !bandwidth.is_finite() => {
                return Err(invalid(format!(
                    "rbf bandwidth must be > 0, got {bandwidth}"
                )))
            }
            KernelKind::ArccosNtk { depth: 0 } => {
                return Err(invalid("ntk depth must be at least 1"))
            }
            _ => {}
        }
        let (Regularization::Absolute(l) | Regularization::TraceScaled(l)) = self.regularization;
        if !(l >= 0.0) || !l.is_finite() {
            return Err(invalid(format!(
                "regularization must be finite and >= 0, got {l}"
            )));
        }
        Ok(())
    }

    /// Resolves the ridge added to the support Gram matrix.
    pub fn ridge<T: Scalar>(&self, k_ss: &Matrix<T>) -> T {
        match self.regularization {
            Regularization::Absolute(l) => T::lit(l),
            Regularization::TraceScaled(l0) => {
                let n = k_ss.rows().max(1);
                let trace: T = (0..k_ss.rows()).map(|i| k_ss[(i, i)]).sum();
                T::lit(l0) * trace / T::lit(n as f64)
            }
        }
    }
}

/// Support points with their (soft or one-hot) label rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet<T> {
    pub points: Matrix<T>,
    pub labels: Matrix<T>,
}

impl<T: Scalar> SupportSet<T> {
    pub fn new(points: Matrix<T>, labels: Matrix<T>) -> Result<Self> {
        if points.rows() != labels.rows() {
            return Err(Error::DimensionMismatch {
                context: "support labels",
                expected: points.rows(),
                found: labels.rows(),
            });
        }
        let tol = T::lit(1e-6);
        for (i, r) in labels.row_iter().enumerate() {
            let s: T = r.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(invalid(format!("support label row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

pub fn kernel_matrix<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "kernel feature dimension",
            expected: a.cols(),
            found: b.cols(),
        });
    }
    match spec.kind {
        KernelKind::Rbf { bandwidth } => {
            let inv = T::lit(-0.5 / (bandwidth * bandwidth));
            Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
                (sq_dist(a.row(i), b.row(j)) * inv).exp()
            }))
        }
        KernelKind::ArccosNtk { depth } => {
            let d = T::lit(a.cols().max(1) as f64);
            let na: Vec<T> = a.row_iter().map(|r| dot(r, r) / d).collect();
            let nb: Vec<T> = b.row_iter().map(|r| dot(r, r) / d).collect();
            let layers = T::lit((depth + 1) as f64);
            Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
                if a.row(i) == b.row(j) {
                    // exact closed form; acos(1 − ulp) would inject O(1e-8) noise
                    layers * na[i]
                } else {
                    ntk_entry(dot(a.row(i), b.row(j)) / d, na[i], nb[j], depth)
                }
            }))
        }
    }
}

/// Depth-`depth` ReLU NTK from the input covariance `cross` and the two
/// input variances. Hidden variances are preserved layer to layer under He
/// scaling, so only the cross term is propagated.
fn ntk_entry<T: Scalar>(cross: T, var_a: T, var_b: T, depth: usize) -> T {
    let pi = T::lit(PI);
    let norm = (var_a * var_b).sqrt();
    let mut sigma = cross;
    let mut theta = cross;
    for _ in 0..depth {
        let cos = if norm > T::zero() {
            (sigma / norm).max(-T::one()).min(T::one())
        } else {
            T::zero()
        };
        let angle = cos.acos();
        let sin = (T::one() - cos * cos).max(T::zero()).sqrt();
        let derivative = (pi - angle) / pi;
        sigma = norm * (sin + (pi - angle) * cos) / pi;
        theta = theta * derivative + sigma;
    }
    theta
}

/// Factorized support system reused by prediction, loss and gradient.
struct KrrFit<T> {
    k_ss: Matrix<T>,
    chol: Cholesky<T>,
    alpha: Matrix<T>,
}

fn fit<T: Scalar>(support: &SupportSet<T>, spec: &KernelSpec) -> Result<KrrFit<T>> {
    spec.validate()?;
    if support.is_empty() {
        return Err(invalid("support set is empty"));
    }
    let k_ss = kernel_matrix(&support.points, &support.points, spec)?;
    let (chol, _) = factor_with_ridge(&k_ss, spec.ridge(&k_ss))?;
    let alpha = chol.solve(&support.labels)?;
    if !alpha.is_finite() {
        return Err(Error::NonFinite {
            context: "krr dual coefficients".into(),
        });
    }
    Ok(KrrFit { k_ss, chol, alpha })
}

/// `K(X, X̃) (K(X̃, X̃) + λI)⁻¹ Ỹ`, one row per target.
pub fn krr_predict<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    let f = fit(support, spec)?;
    kernel_matrix(targets, &support.points, spec)?.matmul(&f.alpha)
}

pub fn kip_loss<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    target_labels: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<T> {
    let pred = krr_predict(support, targets, spec)?;
    Ok(T::lit(0.5) * target_labels.sub(&pred)?.frobenius_sq())
}

/// Loss and its gradient with respect to the support points.
pub fn kip_loss_grad<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    target_labels: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<(T, Matrix<T>)> {
    match spec.kind {
        KernelKind::Rbf { bandwidth } => {
            rbf_loss_grad(support, targets, target_labels, spec, bandwidth)
        }
        KernelKind::ArccosNtk { .. } => {
            let loss = kip_loss(support, targets, target_labels, spec)?;
            let grad = fd_grad(support, targets, target_labels, spec)?;
            Ok((loss, grad))
        }
    }
}

pub fn kip_grad<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    target_labels: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    kip_loss_grad(support, targets, target_labels, spec).map(|(_, g)| g)
}

fn rbf_loss_grad<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    target_labels: &Matrix<T>,
    spec: &KernelSpec,
    bandwidth: f64,
) -> Result<(T, Matrix<T>)> {
    let f = fit(support, spec)?;
    let k_ts = kernel_matrix(targets, &support.points, spec)?;
    let pred = k_ts.matmul(&f.alpha)?;
    let resid = target_labels.sub(&pred)?;
    let loss = T::lit(0.5) * resid.frobenius_sq();

    // dL/dPred = −R
    let g = resid.scale(-T::one());
    // dL/dK(X, X̃) = G αᵀ
    let d_kts = g.matmul_t(&f.alpha)?;
    // dL/dK(X̃, X̃) = −β αᵀ with β = (K + λI)⁻¹ K(X, X̃)ᵀ G
    let beta = f.chol.solve(&k_ts.t_matmul(&g)?)?;
    let d_kss = beta.matmul_t(&f.alpha)?;

    let inv_s2 = T::lit(1.0 / (bandwidth * bandwidth));
    let pts = &support.points;
    let (ns, d) = (pts.rows(), pts.cols());
    let mut grad = Matrix::zeros(ns, d);
    for j in 0..ns {
        let xj = pts.row(j);
        let gj = grad.row_mut(j);
        for i in 0..targets.rows() {
            let w = d_kts[(i, j)] * k_ts[(i, j)] * inv_s2;
            if w == T::zero() {
                continue;
            }
            for ((g, &xi), &sj) in gj.iter_mut().zip(targets.row(i)).zip(xj) {
                *g += w * (xi - sj);
            }
        }
        for i in 0..ns {
            if i == j {
                continue;
            }
            let w = -(d_kss[(i, j)] + d_kss[(j, i)]) * f.k_ss[(i, j)] * inv_s2;
            for ((g, &xi), &sj) in gj.iter_mut().zip(pts.row(i)).zip(xj) {
                *g += w * (xi - sj);
            }
        }
    }
    if !grad.is_finite() || !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "kip gradient".into(),
        });
    }
    Ok((loss, grad))
}

fn fd_grad<T: Scalar>(
    support: &SupportSet<T>,
    targets: &Matrix<T>,
    target_labels: &Matrix<T>,
    spec: &KernelSpec,
) -> Result<Matrix<T>> {
    let step = T::epsilon().cbrt();
    let mut probe = support.clone();
    let (ns, d) = (support.points.rows(), support.points.cols());
    let mut grad = Matrix::zeros(ns, d);
    for i in 0..ns {
        for j in 0..d {
            let x = support.points[(i, j)];
            let h = step * x.abs().max(T::one());
            probe.points[(i, j)] = x + h;
            let up = kip_loss(&probe, targets, target_labels, spec)?;
            probe.points[(i, j)] = x - h;
            let down = kip_loss(&probe, targets, target_labels, spec)?;
            probe.points[(i, j)] = x;
            grad[(i, j)] = (up - down) / (h + h);
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            context: "kip finite-difference gradient".into(),
        });
    }
    Ok(grad)
}
