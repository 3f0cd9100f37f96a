//! Slow, direct reference implementations used to check the library.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tartekit::encoder::{CellPair, CellPairSequence};

/// Leave-one-out residuals by refitting without each row. Features are
/// standardized once with full-sample statistics; the intercept is free.
pub fn brute_force_loo(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Vec<f64> {
    let (n, q) = x.shape();
    let mut xs = x.clone();
    for j in 0..q {
        let m = x.column(j).mean();
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for i in 0..n {
            xs[(i, j)] = (x[(i, j)] - m) / sd;
        }
    }
    (0..n)
        .map(|out| {
            let keep: Vec<usize> = (0..n).filter(|&i| i != out).collect();
            let a = DMatrix::from_fn(n - 1, q + 1, |r, c| if c == 0 { 1.0 } else { xs[(keep[r], c - 1)] });
            let b = DVector::from_iterator(n - 1, keep.iter().map(|&i| y[i]));
            let mut lhs = a.transpose() * &a;
            for j in 1..=q {
                lhs[(j, j)] += alpha;
            }
            let beta = lhs.lu().solve(&(a.transpose() * b)).expect("ridge system is regular");
            let pred = beta[0] + (0..q).map(|j| xs[(out, j)] * beta[j + 1]).sum::<f64>();
            y[out] - pred
        })
        .collect()
}

/// Yeo–Johnson written straight from its piecewise definition.
pub fn yeo_johnson_ref(x: f64, lambda: f64) -> f64 {
    if x >= 0.0 {
        if lambda == 0.0 {
            (x + 1.0).ln()
        } else {
            ((x + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if lambda == 2.0 {
        -(1.0 - x).ln()
    } else {
        -((1.0 - x).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

fn yj_log_likelihood_ref(values: &[f64], lambda: f64) -> f64 {
    let n = values.len() as f64;
    let t: Vec<f64> = values.iter().map(|&x| yeo_johnson_ref(x, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let log_jac: f64 = values.iter().map(|&x| (x.abs() + 1.0).ln().copysign(x)).sum();
    -n / 2.0 * var.ln() + (lambda - 1.0) * log_jac
}

/// Maximum-likelihood λ by a coarse grid over [-5, 5] refined around the
/// best grid point.
pub fn yj_lambda_ref(values: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    let scan = |lo: f64, hi: f64, steps: usize, best: &mut (f64, f64)| {
        for k in 0..=steps {
            let l = lo + (hi - lo) * k as f64 / steps as f64;
            let ll = yj_log_likelihood_ref(values, l);
            if ll > best.0 {
                *best = (ll, l);
            }
        }
    };
    scan(-5.0, 5.0, 1000, &mut best);
    let centre = best.1;
    scan(centre - 0.02, centre + 0.02, 4000, &mut best);
    best.1
}

/// AUROC as the fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
pub fn auroc_pairs(y: &[f64], s: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Points no other point dominates (runtime ≤, score ≥, one strict).
pub fn pareto_scan(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().any(|&(t, s)| {
                let (ti, si) = points[i];
                t <= ti && s >= si && (t < ti || s > si)
            })
        })
        .collect()
}

/// A row of `k` random pairs in width `d_lm`.
pub fn random_row(k: usize, d_lm: usize, rng: &mut ChaCha8Rng) -> CellPairSequence {
    let v = |rng: &mut ChaCha8Rng| (0..d_lm).map(|_| rng.random_range(-1.0..1.0)).collect();
    CellPairSequence {
        row: 0,
        pairs: (0..k)
            .map(|_| CellPair {
                column: v(rng),
                cell: v(rng),
            })
            .collect(),
    }
}
