//! String embeddings: a pretrained lookup table with a hashed character
//! n-gram fallback for out-of-vocabulary entries.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding width, matching common pretrained word vectors.
pub const DEFAULT_DIM: usize = 300;

/// Character n-gram hashing parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramHasher {
    pub min_n: usize,
    pub max_n: usize,
    pub buckets: u64,
    pub seed: u64,
}

impl Default for NgramHasher {
    fn default() -> Self {
        Self {
            min_n: 3,
            max_n: 6,
            buckets: 2_000_000,
            seed: 0x7a72_7465,
        }
    }
}

/// 32-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

impl NgramHasher {
    /// Subword units of one word: the bracketed word itself plus every
    /// character n-gram of `<word>` with `min_n <= n <= max_n`.
    pub fn units(&self, word: &str) -> Vec<String> {
        let bracketed: Vec<char> = format!("<{word}>").chars().collect();
        let mut out = vec![bracketed.iter().collect::<String>()];
        for n in self.min_n..=self.max_n {
            if n >= bracketed.len() {
                break;
            }
            for start in 0..=(bracketed.len() - n) {
                out.push(bracketed[start..start + n].iter().collect());
            }
        }
        out
    }

    pub fn bucket(&self, unit: &str) -> u64 {
        fnv1a(unit.as_bytes()) as u64 % self.buckets
    }

    /// Deterministic pseudo-random vector for a bucket.
    fn bucket_vector(&self, bucket: u64, dim: usize, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ bucket.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for a in acc.iter_mut().take(dim) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }

    /// Mean of the bucket vectors over all units of all words, L2-normalized.
    /// Returns `None` for strings without any word.
    pub fn embed(&self, s: &str, dim: usize) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; dim];
        let mut count = 0usize;
        for word in s.split_whitespace() {
            for unit in self.units(word) {
                self.bucket_vector(self.bucket(&unit), dim, &mut acc);
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        acc.iter_mut().for_each(|x| *x /= norm);
        Some(acc)
    }
}

/// An embedded string; `missing` marks empty or whitespace-only input.
#[derive(Debug, Clone, PartialEq)]
pub struct StringEmbedding {
    pub vector: Vec<f64>,
    pub missing: bool,
}

/// Maps strings to fixed-width vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StringEmbedder {
    dim: usize,
    lookup: HashMap<String, Vec<f64>>,
    fallback: NgramHasher,
}

impl StringEmbedder {
    /// Fallback-only embedder.
    pub fn hashed(dim: usize, fallback: NgramHasher) -> Result<Self> {
        Self::with_lookup(dim, HashMap::new(), fallback)
    }

    pub fn with_lookup(dim: usize, lookup: HashMap<String, Vec<f64>>, fallback: NgramHasher) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding width must be positive".into()));
        }
        if fallback.min_n == 0 || fallback.min_n > fallback.max_n || fallback.buckets == 0 {
            return Err(Error::InvalidArgument(format!("bad n-gram settings {fallback:?}")));
        }
        if let Some((tok, v)) = lookup.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "lookup vector for {tok:?} has width {}, expected {dim}",
                v.len()
            )));
        }
        Ok(Self { dim, lookup, fallback })
    }

    /// Reads a `token<TAB>v1 v2 ...` file, optionally headed by `#dim <n>`.
    pub fn from_lookup_file(path: impl AsRef<Path>, fallback: NgramHasher) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim: Option<usize> = None;
        let mut lookup = HashMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            if idx == 0 {
                if let Some(rest) = line.strip_prefix("#dim") {
                    let d = rest.trim().parse::<usize>().map_err(|_| Error::Malformed {
                        line: line_no,
                        reason: format!("bad dimension header {line:?}"),
                    })?;
                    dim = Some(d);
                    continue;
                }
            }
            let (token, values) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                line: line_no,
                reason: "expected token<TAB>values".into(),
            })?;
            let vector = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected || expected == 0 {
                return Err(Error::Malformed {
                    line: line_no,
                    reason: format!("{} values, expected {expected}", vector.len()),
                });
            }
            lookup.insert(token.to_string(), vector);
        }
        let dim = dim.ok_or_else(|| Error::Parse(format!("{} holds no vectors", path.display())))?;
        Self::with_lookup(dim, lookup, fallback)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocabulary_size(&self) -> usize {
        self.lookup.len()
    }

    pub fn fallback(&self) -> &NgramHasher {
        &self.fallback
    }

    pub fn embed(&self, s: &str) -> StringEmbedding {
        if let Some(v) = self.lookup.get(s) {
            return StringEmbedding {
                vector: v.clone(),
                missing: false,
            };
        }
        match self.fallback.embed(s, self.dim) {
            Some(vector) => StringEmbedding { vector, missing: false },
            None => StringEmbedding {
                vector: vec![0.0; self.dim],
                missing: true,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn embedder() -> StringEmbedder {
        StringEmbedder::hashed(64, NgramHasher::default()).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn empty_and_blank_are_missing() {
        let e = embedder();
        for s in ["", "   ", "\t"] {
            let out = e.embed(s);
            assert!(out.missing);
            assert!(out.vector.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn deterministic() {
        let e = embedder();
        let a = e.embed("Louvre");
        let b = e.embed("Louvre");
        assert_eq!(
            a.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fallback_is_unit_norm() {
        let e = embedder();
        for s in ["a", "Paris", "New York City", "ünïcödé"] {
            let v = e.embed(s).vector;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "{s}: {norm}");
        }
    }

    #[test]
    fn shared_ngrams_raise_similarity() {
        let h = NgramHasher::default();
        let units = |s: &str| h.units(s).into_iter().collect::<HashSet<_>>();
        // counting oracle: "parisian" shares subword units with "paris", "xqzwv" shares none
        assert!(units("paris").intersection(&units("parisian")).count() > 0);
        assert_eq!(units("paris").intersection(&units("xqzwv")).count(), 0);

        let e = embedder();
        let paris = e.embed("paris").vector;
        let near = cosine(&paris, &e.embed("parisian").vector);
        let far = cosine(&paris, &e.embed("xqzwv").vector);
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn lookup_hits_are_verbatim() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "#dim 3").unwrap();
        writeln!(f, "paris\t0.5 2 -1").unwrap();
        writeln!(f, "london\t1 1 1").unwrap();
        let e = StringEmbedder::from_lookup_file(f.path(), NgramHasher::default()).unwrap();
        assert_eq!(e.dim(), 3);
        assert_eq!(e.embed("paris").vector, vec![0.5, 2.0, -1.0]);
        let miss = e.embed("berlin").vector;
        assert_eq!(miss.len(), 3);
        assert!((miss.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lookup_width_mismatch_reports_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a\t1 2").unwrap();
        writeln!(f, "b\t1 2 3").unwrap();
        let err = StringEmbedder::from_lookup_file(f.path(), NgramHasher::default()).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }));
    }
}
