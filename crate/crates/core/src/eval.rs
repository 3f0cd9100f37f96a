//! Benchmark metrics and aggregation: R², AUROC, normalized scores, average
//! ranks and the runtime/score Pareto frontier.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub method: String,
    pub train_size: usize,
    pub split: usize,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.metric != "r2" && self.metric != "auroc" {
            return Err(Error::InvalidArgument(format!("unknown metric {:?}", self.metric)));
        }
        if !self.value.is_finite() || !(self.seconds >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad record values: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub dataset: String,
    pub method: String,
    pub train_size: usize,
    pub score: f64,
}

pub fn metric_r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.len() < 2 {
        return Err(Error::InvalidArgument(format!("r2 needs ≥2 aligned values, got {} and {}", y.len(), yhat.len())));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("r2 undefined for a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// 1-based ranks in ascending order, ties sharing their mean rank.
pub fn average_rank_values(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney statistic over average ranks; labels are 0/1.
pub fn metric_auroc(y: &[f64], scores: &[f64]) -> Result<f64> {
    if y.len() != scores.len() {
        return Err(Error::shape("auroc", format!("{} labels, {} scores", y.len(), scores.len())));
    }
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    let neg = y.iter().filter(|&&v| v == 0.0).count();
    if pos + neg != y.len() {
        return Err(Error::InvalidArgument("auroc labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("auroc needs both classes in the test set".into()));
    }
    let ranks = average_rank_values(scores);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Per dataset, min-max scaling of the mean metric of every
/// (method, train size) cell.
pub fn normalize_scores(records: &[EvalRecord]) -> Result<Vec<NormalizedScore>> {
    let mut cells: BTreeMap<&str, BTreeMap<(&str, usize), (f64, usize)>> = BTreeMap::new();
    for r in records {
        let c = cells
            .entry(&r.dataset)
            .or_default()
            .entry((&r.method, r.train_size))
            .or_insert((0.0, 0));
        c.0 += r.value;
        c.1 += 1;
    }
    let mut out = Vec::new();
    for (dataset, cell) in cells {
        let count: usize = cell.values().map(|c| c.1).sum();
        if count < 2 {
            return Err(Error::InvalidArgument(format!("dataset {dataset} has a single record")));
        }
        let means: Vec<((&str, usize), f64)> = cell.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let lo = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let hi = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            warn!("all cells of dataset {dataset} have the same metric; scoring them 0.5");
        }
        for ((method, size), m) in means {
            out.push(NormalizedScore {
                dataset: dataset.to_string(),
                method: method.to_string(),
                train_size: size,
                score: if hi == lo { 0.5 } else { (m - lo) / (hi - lo) },
            });
        }
    }
    Ok(out)
}

/// Mean rank (1 = best, ties averaged) per method over the
/// (dataset, train size, split) cells that every method covers.
pub fn average_ranks(records: &[EvalRecord]) -> Vec<(String, f64)> {
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    let mut cells: BTreeMap<(&str, usize, usize), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((&r.dataset, r.train_size, r.split))
            .or_default()
            .insert(&r.method, r.value);
    }
    let total = cells.len();
    cells.retain(|_, m| m.len() == methods.len());
    if cells.len() < total {
        warn!("{} of {total} cells lack some method; ranking over the intersection", total - cells.len());
    }
    let mut sums: BTreeMap<&str, f64> = methods.iter().map(|&m| (m, 0.0)).collect();
    for cell in cells.values() {
        let names: Vec<&str> = cell.keys().copied().collect();
        let neg: Vec<f64> = cell.values().map(|v| -v).collect();
        for (name, r) in names.iter().zip(average_rank_values(&neg)) {
            *sums.get_mut(name).expect("known method") += r;
        }
    }
    let n = cells.len().max(1) as f64;
    sums.into_iter()
        .map(|(m, s)| (m.to_string(), if cells.is_empty() { f64::NAN } else { s / n }))
        .collect()
}

/// Indices of points not dominated by any other: a point is dominated when
/// another has runtime ≤ and score ≥, with one strict.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut frontier = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut last: Option<(f64, f64)> = None;
    for i in order {
        let p = points[i];
        // equal points do not dominate each other
        if p.1 > best || last == Some(p) {
            frontier.push(i);
            best = best.max(p.1);
            last = Some(p);
        }
    }
    frontier.sort_unstable();
    frontier
}
