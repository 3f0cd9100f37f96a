//! Yeo–Johnson power transform with maximum-likelihood λ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Search interval for λ.
pub const LAMBDA_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const LAMBDA_TOL: f64 = 1e-6;

/// Fitted per-relation (or per-column) transform followed by standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTransform {
    pub relation: String,
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
}

fn near_zero(x: f64) -> bool {
    x.abs() < f64::EPSILON
}

/// Yeo–Johnson transform of one value.
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    // both branches reduce to x; skip the rounding of exp_m1(ln_1p(x))
    if lambda == 1.0 {
        return x;
    }
    if x >= 0.0 {
        let l = x.ln_1p();
        if near_zero(lambda) {
            l
        } else {
            (lambda * l).exp_m1() / lambda
        }
    } else {
        let l = (-x).ln_1p();
        let p = 2.0 - lambda;
        if near_zero(p) {
            -l
        } else {
            -(p * l).exp_m1() / p
        }
    }
}

/// Inverse of [`yeo_johnson`]. The sign of `y` matches the sign of `x`.
pub fn yeo_johnson_inverse(y: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        return y;
    }
    if y >= 0.0 {
        if near_zero(lambda) {
            y.exp_m1()
        } else {
            ((lambda * y).ln_1p() / lambda).exp_m1()
        }
    } else {
        let p = 2.0 - lambda;
        if near_zero(p) {
            -(-y).exp_m1()
        } else {
            -((-p * y).ln_1p() / p).exp_m1()
        }
    }
}

/// Profile log-likelihood of λ under a normal model of the transformed data.
pub fn log_likelihood(values: &[f64], lambda: f64) -> f64 {
    let n = values.len() as f64;
    let t: Vec<f64> = values.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0 && var.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = values.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// Maximizes a unimodal function on `[lo, hi]`.
fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fits λ by maximum likelihood, then the mean and standard deviation of the
/// transformed values.
///
/// Non-finite inputs are ignored. Fewer than two distinct finite values is a
/// [`Error::Degenerate`] error; callers fall back to [`PowerTransform::identity`].
pub fn fit_power_transform(values: &[f64], relation: &str) -> Result<PowerTransform> {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let first = finite.first().copied();
    if first.is_none_or(|f| finite.iter().all(|&x| x == f)) {
        return Err(Error::Degenerate(format!(
            "relation {relation:?} needs at least two distinct finite values"
        )));
    }
    let lambda = golden_section_max(
        |l| log_likelihood(&finite, l),
        LAMBDA_BOUNDS.0,
        LAMBDA_BOUNDS.1,
        LAMBDA_TOL,
    );
    let n = finite.len() as f64;
    let t: Vec<f64> = finite.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var.sqrt() > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
    Ok(PowerTransform {
        relation: relation.to_string(),
        lambda,
        mean,
        std,
    })
}

impl PowerTransform {
    /// λ = 1 without standardization: maps every value to itself.
    pub fn identity(relation: &str) -> Self {
        Self {
            relation: relation.to_string(),
            lambda: 1.0,
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Fits, falling back to the identity on degenerate input.
    pub fn fit_or_identity(values: &[f64], relation: &str) -> Self {
        fit_power_transform(values, relation).unwrap_or_else(|e| {
            log::warn!("{e}; using identity transform");
            Self::identity(relation)
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (yeo_johnson(x, self.lambda) - self.mean) / self.std
    }

    pub fn invert(&self, y: f64) -> f64 {
        yeo_johnson_inverse(y * self.std + self.mean, self.lambda)
    }
}
