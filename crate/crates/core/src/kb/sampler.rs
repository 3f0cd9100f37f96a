//! Pre-training batches: entity sampling, fact trimming and positives.

use indexmap::IndexMap;
use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::StringEmbedder;
use crate::encoder::{build_cell_pair, CellPairSequence, ColumnSpec};
use crate::error::{Error, Result};
use crate::kb::store::{KnowledgeStore, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    /// Entities per batch, `N_b`.
    pub entities: usize,
    /// Facts per row, `F`.
    pub facts: usize,
    /// Most facts of a single relation in one row.
    pub max_dup: usize,
    /// Chance of replacing two facts instead of one.
    pub two_replacements: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            entities: 256,
            facts: 8,
            max_dup: 2,
            two_replacements: 0.5,
        }
    }
}

/// Anchors at even indices, their positives at the following odd index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainBatch {
    pub entities: Vec<String>,
    pub facts: Vec<Vec<Triple>>,
    pub rows: Vec<CellPairSequence>,
    pub positive_map: Vec<(usize, usize)>,
}

impl PretrainBatch {
    /// Partner of every row in both directions.
    pub fn partners(&self) -> Vec<usize> {
        let mut p = vec![0; self.rows.len()];
        for &(a, b) in &self.positive_map {
            p[a] = b;
            p[b] = a;
        }
        p
    }
}

/// Entities able to supply `facts` facts with at most `max_dup` per relation.
pub fn sampling_pool(store: &KnowledgeStore, facts: usize, max_dup: usize) -> Vec<usize> {
    (0..store.entity_count())
        .filter(|&e| {
            let mut per_rel: IndexMap<&str, usize> = IndexMap::new();
            for &i in store.entity(e).1 {
                *per_rel.entry(store.facts()[i].relation.as_str()).or_default() += 1;
            }
            per_rel.values().map(|&c| c.min(max_dup)).sum::<usize>() >= facts
        })
        .collect()
}

/// Picks `facts` of an entity's facts, cycling through relations in random
/// order so that each relation contributes once before any contributes twice.
pub fn select_facts<R: Rng + ?Sized>(
    store: &KnowledgeStore,
    entity: usize,
    facts: usize,
    max_dup: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for &i in store.entity(entity).1 {
        groups.entry(store.facts()[i].relation.as_str()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups.shuffle(rng);
    let mut out = Vec::with_capacity(facts);
    'rounds: for round in 0..max_dup {
        for g in &groups {
            if out.len() == facts {
                break 'rounds;
            }
            if let Some(&i) = g.get(round) {
                out.push(store.facts()[i].clone());
            }
        }
    }
    out
}

/// Replaces the tail of one or two facts with another value of the same
/// relation. Positions whose relation has a single value are never chosen.
pub fn make_positive<R: Rng + ?Sized>(
    anchor: &[Triple],
    store: &KnowledgeStore,
    two_replacements: f64,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if anchor.is_empty() {
        return Err(Error::EmptyRow);
    }
    let replaceable: Vec<usize> = (0..anchor.len())
        .filter(|&i| store.relation(&anchor[i].relation).is_some_and(|r| r.pool.len() >= 2))
        .collect();
    let mut positive = anchor.to_vec();
    if replaceable.is_empty() {
        warn!("no replaceable fact for {}; positive duplicates the anchor", anchor[0].head);
        return Ok(positive);
    }
    let wanted = if rng.random::<f64>() < two_replacements { 2 } else { 1 };
    let count = wanted.min(replaceable.len());
    for k in index::sample(rng, replaceable.len(), count) {
        let pos = replaceable[k];
        let pool = &store.relation(&anchor[pos].relation).expect("checked above").pool;
        let candidates: Vec<_> = pool.iter().filter(|t| **t != anchor[pos].tail).collect();
        positive[pos].tail = (*candidates[rng.random_range(0..candidates.len())]).clone();
    }
    Ok(positive)
}

/// Draws batches from a store; the pool and per-relation column specs are
/// computed once.
pub struct BatchSampler<'a> {
    store: &'a KnowledgeStore,
    embedder: &'a StringEmbedder,
    config: BatchConfig,
    pool: Vec<usize>,
    columns: IndexMap<String, ColumnSpec>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(store: &'a KnowledgeStore, embedder: &'a StringEmbedder, config: BatchConfig) -> Result<Self> {
        if config.entities == 0 || config.facts == 0 || config.max_dup == 0 {
            return Err(Error::InvalidArgument(format!("batch sizes must be positive: {config:?}")));
        }
        let pool = sampling_pool(store, config.facts, config.max_dup);
        if pool.len() < config.entities {
            return Err(Error::PoolTooSmall {
                available: pool.len(),
                requested: config.entities,
            });
        }
        let columns = store
            .relations()
            .map(|(name, info)| {
                let mut spec = ColumnSpec::new(name, info.kind.column_kind(), embedder);
                spec.transform = info.transform.clone();
                (name.to_string(), spec)
            })
            .collect();
        Ok(Self {
            store,
            embedder,
            config,
            pool,
            columns,
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// Encoder input for a list of facts.
    pub fn row(&self, index: usize, facts: &[Triple]) -> Result<CellPairSequence> {
        let mut pairs = Vec::with_capacity(facts.len());
        for f in facts {
            let col = &self.columns[f.relation.as_str()];
            let pair = build_cell_pair(col, &f.tail.to_cell(), self.embedder)?
                .ok_or_else(|| Error::Parse(format!("fact {} / {} has no embedding", f.head, f.relation)))?;
            pairs.push(pair);
        }
        Ok(CellPairSequence { row: index, pairs })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PretrainBatch> {
        let c = self.config;
        let chosen = index::sample(rng, self.pool.len(), c.entities);
        let mut batch = PretrainBatch {
            entities: Vec::with_capacity(c.entities),
            facts: Vec::with_capacity(2 * c.entities),
            rows: Vec::with_capacity(2 * c.entities),
            positive_map: Vec::with_capacity(c.entities),
        };
        for k in chosen {
            let e = self.pool[k];
            let anchor = select_facts(self.store, e, c.facts, c.max_dup, rng);
            let positive = make_positive(&anchor, self.store, c.two_replacements, rng)?;
            let a = batch.rows.len();
            batch.rows.push(self.row(a, &anchor)?);
            batch.rows.push(self.row(a + 1, &positive)?);
            batch.facts.push(anchor);
            batch.facts.push(positive);
            batch.positive_map.push((a, a + 1));
            batch.entities.push(self.store.entity(e).0.to_string());
        }
        Ok(batch)
    }
}

/// One-off batch draw.
pub fn sample_batch<R: Rng + ?Sized>(
    store: &KnowledgeStore,
    embedder: &StringEmbedder,
    config: BatchConfig,
    rng: &mut R,
) -> Result<PretrainBatch> {
    BatchSampler::new(store, embedder, config)?.sample(rng)
}
