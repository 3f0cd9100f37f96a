//! Median-bandwidth Gaussian kernel and the contrastive losses built on it.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const BANDWIDTH_FLOOR: f64 = 1e-12;

/// Kernel values and the bandwidth that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub k: Tensor<T>,
    pub bandwidth: T,
}

/// Median of the off-diagonal pairwise Euclidean distances between rows,
/// floored at [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth<T: Scalar>(z: &Tensor<T>) -> T {
    let (m, q) = (z.rows(), z.cols());
    let data = z.data();
    let mut dists = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let sq: f64 = (0..q)
                .map(|c| {
                    let d = (data[i * q + c] - data[j * q + c]).to_f64_lossy();
                    d * d
                })
                .sum();
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return T::of(BANDWIDTH_FLOOR);
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    T::of(med.max(BANDWIDTH_FLOOR))
}

/// `exp(−‖z_i−z_j‖² / 2h²)` on the tape; `bandwidth` is a constant.
pub fn gaussian_kernel_on_tape<T: Scalar>(tape: &mut Tape<T>, z: Var, bandwidth: T) -> Result<Var> {
    let d = tape.sq_dist(z)?;
    let two_h2 = T::of(2.0) * bandwidth * bandwidth;
    let scaled = tape.scale(d, -T::one() / two_h2);
    Ok(tape.exp(scaled))
}

pub fn gaussian_kernel_matrix<T: Scalar>(z: &Tensor<T>) -> Result<SimilarityMatrix<T>> {
    if !z.is_matrix() || z.rows() < 2 {
        return Err(Error::shape("gaussian_kernel_matrix", format!("need at least 2 rows, got {:?}", z.shape())));
    }
    let bandwidth = median_bandwidth(z);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let k = gaussian_kernel_on_tape(&mut tape, zv, bandwidth)?;
    Ok(SimilarityMatrix {
        k: tape.value(k).clone(),
        bandwidth,
    })
}

/// Partner of every row from anchor→positive pairs. Every row must be
/// covered exactly once.
pub fn partners_from_map(positive_map: &[(usize, usize)], rows: usize) -> Result<Vec<usize>> {
    let mut partners = vec![usize::MAX; rows];
    for &(a, p) in positive_map {
        if a == p {
            return Err(Error::InvalidArgument(format!("positive of row {a} is the row itself")));
        }
        if a >= rows || p >= rows {
            return Err(Error::InvalidArgument(format!("pair ({a}, {p}) outside {rows} rows")));
        }
        if partners[a] != usize::MAX || partners[p] != usize::MAX {
            return Err(Error::InvalidArgument(format!("row {a} or {p} paired twice")));
        }
        partners[a] = p;
        partners[p] = a;
    }
    if let Some(i) = partners.iter().position(|&p| p == usize::MAX) {
        return Err(Error::InvalidArgument(format!("row {i} has no positive")));
    }
    Ok(partners)
}

/// InfoNCE over kernel logits `K/τ`, each row against all non-self rows,
/// averaged over every row so both directions of a pair count.
pub fn info_nce_on_tape<T: Scalar>(tape: &mut Tape<T>, k: Var, partners: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let logits = tape.scale(k, T::of(1.0 / temperature));
    tape.partner_cross_entropy(logits, partners)
}

pub fn info_nce<T: Scalar>(k: &Tensor<T>, positive_map: &[(usize, usize)], temperature: f64) -> Result<T> {
    let partners = partners_from_map(positive_map, k.rows())?;
    let mut tape = Tape::new();
    let kv = tape.constant(k.clone());
    let loss = info_nce_on_tape(&mut tape, kv, &partners, temperature)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean over projections of the InfoNCE loss on each projection's own
/// kernel. Bandwidths are read from current values and held constant.
pub fn matryoshka_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    projections: &[Var],
    partners: &[usize],
    temperature: f64,
) -> Result<Var> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("no projections for the contrastive loss".into()));
    }
    let mut losses = Vec::with_capacity(projections.len());
    for &z in projections {
        let h = median_bandwidth(tape.value(z));
        let k = gaussian_kernel_on_tape(tape, z, h)?;
        losses.push(info_nce_on_tape(tape, k, partners, temperature)?);
    }
    let stacked = tape.concat_rows(&losses)?;
    Ok(tape.mean(stacked))
}

pub fn matryoshka_loss<T: Scalar>(projections: &[Tensor<T>], positive_map: &[(usize, usize)], temperature: f64) -> Result<T> {
    let rows = projections.first().map_or(0, Tensor::rows);
    let partners = partners_from_map(positive_map, rows)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = projections.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = matryoshka_loss_on_tape(&mut tape, &vars, &partners, temperature)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean kernel similarity between paired rows and between unpaired rows.
pub fn pair_similarity<T: Scalar>(z: &Tensor<T>, positive_map: &[(usize, usize)]) -> Result<(f64, f64)> {
    let m = z.rows();
    let partners = partners_from_map(positive_map, m)?;
    let k = gaussian_kernel_matrix(z)?.k;
    let (mut pos, mut neg, mut n_neg) = (0.0, 0.0, 0usize);
    for i in 0..m {
        for j in 0..m {
            let v = k.data()[i * m + j].to_f64_lossy();
            if j == partners[i] {
                pos += v;
            } else if j != i {
                neg += v;
                n_neg += 1;
            }
        }
    }
    Ok((pos / m as f64, neg / n_neg.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_rows_kernel() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = gaussian_kernel_matrix(&z).unwrap();
        assert!((s.bandwidth - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.k.get2(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(s.k.get2(0, 0), 1.0);
    }

    #[test]
    fn identical_rows_give_ones() {
        let z = Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let s = gaussian_kernel_matrix(&z).unwrap();
        assert_eq!(s.bandwidth, BANDWIDTH_FLOOR);
        assert!(s.k.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_kernel_gives_log_candidates() {
        for m in [2usize, 4, 10] {
            let k = Tensor::<f64>::full(&[m, m], 0.7);
            let map: Vec<_> = (0..m / 2).map(|i| (2 * i, 2 * i + 1)).collect();
            let l = info_nce(&k, &map, 1.0).unwrap();
            assert!((l - ((m - 1) as f64).ln()).abs() < 1e-12, "{m}: {l}");
        }
    }

    #[test]
    fn self_positive_rejected() {
        let k = Tensor::<f64>::full(&[2, 2], 0.5);
        assert!(info_nce(&k, &[(0, 0)], 1.0).is_err());
        assert!(info_nce(&k, &[(0, 1)], 0.0).is_err());
    }

    #[test]
    fn odd_median_and_floor() {
        let z = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        // distances 1, 3, 2
        assert_eq!(median_bandwidth(&z), 2.0);
    }
}
