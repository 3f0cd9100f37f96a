//! Ridge regression with closed-form leave-one-out selection of the penalty.
//!
//! Features are standardized with full-sample statistics, the intercept is
//! unpenalized. For a penalty `α` the fit is the linear smoother
//! `ŷ = H y` with `H = 11ᵀ/n + X_s (X_sᵀX_s + αI)⁻¹ X_sᵀ`, so the
//! leave-one-out residual is `(y_i − ŷ_i) / (1 − H_ii)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHAS: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];

/// Eigendecomposition used for the smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LooRoute {
    /// Primal when `q ≤ n`, Gram otherwise.
    #[default]
    Auto,
    /// Of the `q×q` scatter matrix.
    Primal,
    /// Of the `n×n` Gram matrix.
    Gram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// In the original feature scale.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    /// `(alpha, mean squared LOO error)` for every candidate.
    pub loo_mse: Vec<(f64, f64)>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::shape(
                "ridge_predict",
                format!("{} features, model has {}", x.ncols(), self.weights.len()),
            ));
        }
        let w = DVector::from_column_slice(&self.weights);
        Ok((x * w).iter().map(|v| v + self.intercept).collect())
    }
}

struct Standardized {
    xs: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    y_mean: f64,
    yc: DVector<f64>,
}

fn standardize(x: &DMatrix<f64>, y: &[f64]) -> Standardized {
    let (n, q) = x.shape();
    let mut xs = x.clone();
    let mut mean = vec![0.0; q];
    let mut scale = vec![1.0; q];
    for j in 0..q {
        let col = x.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        if var.sqrt() > 1e-12 {
            scale[j] = var.sqrt();
        }
        for i in 0..n {
            xs[(i, j)] = (x[(i, j)] - m) / scale[j];
        }
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    Standardized {
        xs,
        mean,
        scale,
        y_mean,
        yc,
    }
}

/// Smoother pieces for one penalty: fitted centered values, leverages and
/// standardized weights.
struct Solution {
    fitted: DVector<f64>,
    leverage: Vec<f64>,
    weights: DVector<f64>,
}

enum Decomposition {
    Primal {
        v: DMatrix<f64>,
        lambda: DVector<f64>,
        p: DMatrix<f64>,
        pty: DVector<f64>,
    },
    Gram {
        u: DMatrix<f64>,
        sigma: DVector<f64>,
        uty: DVector<f64>,
    },
}

impl Decomposition {
    fn new(s: &Standardized, route: LooRoute) -> Self {
        let (n, q) = s.xs.shape();
        let primal = match route {
            LooRoute::Auto => q <= n,
            LooRoute::Primal => true,
            LooRoute::Gram => false,
        };
        if primal {
            let eig = SymmetricEigen::new(s.xs.transpose() * &s.xs);
            let lambda = eig.eigenvalues.map(|l| l.max(0.0));
            let p = &s.xs * &eig.eigenvectors;
            let pty = p.transpose() * &s.yc;
            Self::Primal {
                v: eig.eigenvectors,
                lambda,
                p,
                pty,
            }
        } else {
            let eig = SymmetricEigen::new(&s.xs * s.xs.transpose());
            let sigma = eig.eigenvalues.map(|l| l.max(0.0));
            let uty = eig.eigenvectors.transpose() * &s.yc;
            Self::Gram {
                u: eig.eigenvectors,
                sigma,
                uty,
            }
        }
    }

    fn solve(&self, s: &Standardized, alpha: f64) -> Solution {
        let n = s.xs.nrows();
        match self {
            Self::Primal { v, lambda, p, pty } => {
                let inv = lambda.map(|l| 1.0 / (l + alpha));
                let coef = pty.component_mul(&inv);
                let fitted = p * &coef;
                let leverage = (0..n)
                    .map(|i| 1.0 / n as f64 + (0..inv.len()).map(|k| p[(i, k)].powi(2) * inv[k]).sum::<f64>())
                    .collect();
                Solution {
                    fitted,
                    leverage,
                    weights: v * coef,
                }
            }
            Self::Gram { u, sigma, uty } => {
                let shrink = sigma.map(|sg| sg / (sg + alpha));
                let fitted = u * uty.component_mul(&shrink);
                let leverage = (0..n)
                    .map(|i| 1.0 / n as f64 + (0..n).map(|k| u[(i, k)].powi(2) * shrink[k]).sum::<f64>())
                    .collect();
                let dual = u * uty.component_mul(&sigma.map(|sg| 1.0 / (sg + alpha)));
                Solution {
                    fitted,
                    leverage,
                    weights: s.xs.transpose() * dual,
                }
            }
        }
    }
}

fn check(x: &DMatrix<f64>, y: &[f64], alphas: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::shape("ridge", format!("{} rows, {} targets", x.nrows(), y.len())));
    }
    if x.nrows() < 3 {
        return Err(Error::InvalidArgument(format!("ridge needs at least 3 rows, got {}", x.nrows())));
    }
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("alphas must be positive: {alphas:?}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge inputs".into()));
    }
    Ok(())
}

/// Leave-one-out residuals for each alpha, by the closed form.
pub fn loo_residuals(x: &DMatrix<f64>, y: &[f64], alphas: &[f64], route: LooRoute) -> Result<Vec<Vec<f64>>> {
    check(x, y, alphas)?;
    let s = standardize(x, y);
    let dec = Decomposition::new(&s, route);
    Ok(alphas
        .iter()
        .map(|&a| {
            let sol = dec.solve(&s, a);
            (0..y.len())
                .map(|i| (s.yc[i] - sol.fitted[i]) / (1.0 - sol.leverage[i]).max(1e-12))
                .collect()
        })
        .collect())
}

pub fn fit_ridge_loocv_with(x: &DMatrix<f64>, y: &[f64], alphas: &[f64], route: LooRoute) -> Result<RidgeModel> {
    check(x, y, alphas)?;
    let s = standardize(x, y);
    let dec = Decomposition::new(&s, route);
    let n = y.len() as f64;
    let mut loo_mse = Vec::with_capacity(alphas.len());
    let mut best: Option<(f64, f64, Solution)> = None;
    for &a in alphas {
        let sol = dec.solve(&s, a);
        let mse = (0..y.len())
            .map(|i| ((s.yc[i] - sol.fitted[i]) / (1.0 - sol.leverage[i]).max(1e-12)).powi(2))
            .sum::<f64>()
            / n;
        loo_mse.push((a, mse));
        if best.as_ref().is_none_or(|(_, m, _)| mse < *m) {
            best = Some((a, mse, sol));
        }
    }
    let (alpha, _, sol) = best.expect("at least one alpha");
    let weights: Vec<f64> = sol.weights.iter().zip(&s.scale).map(|(w, sc)| w / sc).collect();
    let intercept = s.y_mean - weights.iter().zip(&s.mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel {
        weights,
        intercept,
        alpha,
        loo_mse,
    })
}

/// Fits on standardized features with the LOO-best alpha from `alphas`.
pub fn fit_ridge_loocv(x: &DMatrix<f64>, y: &[f64], alphas: &[f64]) -> Result<RidgeModel> {
    fit_ridge_loocv_with(x, y, alphas, LooRoute::Auto)
}
