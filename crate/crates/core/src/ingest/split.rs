//! Seeded train/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_SIZES: [usize; 7] = [32, 64, 128, 256, 512, 1024, 10_000];
pub const SPLITS_PER_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_size: usize,
    pub seed: u64,
    pub split_index: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !TRAIN_SIZES.contains(&self.train_size) {
            return Err(Error::InvalidArgument(format!(
                "train size {} not in {TRAIN_SIZES:?}",
                self.train_size
            )));
        }
        if self.split_index >= SPLITS_PER_SIZE {
            return Err(Error::InvalidArgument(format!(
                "split index {} outside 0..{SPLITS_PER_SIZE}",
                self.split_index
            )));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.split_index as u64);
        rng
    }
}

/// Train and test row indices. With `labels`, every class keeps at least one
/// training row and classes are allotted train slots in proportion to their
/// frequency.
pub fn make_splits(n: usize, labels: Option<&[f64]>, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    split_indices(n, labels, spec.train_size, &mut spec.rng())
}

/// [`make_splits`] without the train-size grid check.
pub fn split_indices(
    n: usize,
    labels: Option<&[f64]>,
    train_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n <= train_size {
        return Err(Error::InvalidArgument(format!(
            "table has {n} rows; a train size of {train_size} needs more"
        )));
    }
    let Some(labels) = labels else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let test = idx.split_off(train_size);
        return Ok((idx, test));
    };
    if labels.len() != n {
        return Err(Error::shape("make_splits", format!("{} labels for {n} rows", labels.len())));
    }
    let mut classes: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        match classes.iter_mut().find(|(c, _)| *c == y) {
            Some((_, v)) => v.push(i),
            None => classes.push((y, vec![i])),
        }
    }
    classes.sort_by(|a, b| a.0.total_cmp(&b.0));
    // largest-remainder allocation of train slots
    let quotas: Vec<f64> = classes
        .iter()
        .map(|(_, v)| v.len() as f64 * train_size as f64 / n as f64)
        .collect();
    if classes.len() > train_size {
        return Err(Error::ClassAbsent(classes[train_size].0.to_string()));
    }
    // every class gets at least one slot
    let mut alloc: Vec<usize> = quotas.iter().map(|q| (q.floor() as usize).max(1)).collect();
    while alloc.iter().sum::<usize>() > train_size {
        let c = (0..alloc.len()).max_by_key(|&c| (alloc[c], std::cmp::Reverse(c))).expect("classes");
        alloc[c] -= 1;
    }
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = train_size - alloc.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if alloc[c] < classes[c].1.len() {
            alloc[c] += 1;
            left -= 1;
        }
    }
    if let Some(c) = alloc.iter().position(|&a| a == 0) {
        return Err(Error::ClassAbsent(classes[c].0.to_string()));
    }
    let (mut train, mut test) = (Vec::with_capacity(train_size), Vec::with_capacity(n - train_size));
    for ((_, members), &k) in classes.iter_mut().zip(&alloc) {
        members.shuffle(rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.shuffle(rng);
    test.shuffle(rng);
    Ok((train, test))
}
