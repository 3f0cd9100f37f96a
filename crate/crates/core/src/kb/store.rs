//! Triple storage, indexing and per-relation transforms.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::embed::{DatetimeValue, PowerTransform};
use crate::encoder::{CellValue, ColumnKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TailKind {
    #[serde(rename = "str")]
    Str,
    #[serde(rename = "num")]
    Num,
    #[serde(rename = "dt")]
    Dt,
}

impl TailKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "str" => Some(Self::Str),
            "num" => Some(Self::Num),
            "dt" => Some(Self::Dt),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Str => "str",
            Self::Num => "num",
            Self::Dt => "dt",
        }
    }

    pub fn column_kind(self) -> ColumnKind {
        match self {
            Self::Str => ColumnKind::CategoricalString,
            Self::Num => ColumnKind::Numerical,
            Self::Dt => ColumnKind::Datetime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tail {
    Text(String),
    Number(f64),
    Datetime(DatetimeValue),
}

impl Tail {
    pub fn kind(&self) -> TailKind {
        match self {
            Tail::Text(_) => TailKind::Str,
            Tail::Number(_) => TailKind::Num,
            Tail::Datetime(_) => TailKind::Dt,
        }
    }

    /// Numeric value fed to the relation transform, if any.
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Tail::Text(_) => None,
            Tail::Number(x) => Some(*x),
            Tail::Datetime(d) => Some(d.fractional_year()),
        }
    }

    pub fn to_cell(&self) -> CellValue {
        match self {
            Tail::Text(s) => CellValue::Text(s.clone()),
            Tail::Number(x) => CellValue::Number(*x),
            Tail::Datetime(d) => CellValue::Datetime(*d),
        }
    }

    fn key(&self) -> TailKey {
        match self {
            Tail::Text(s) => TailKey::Text(s.clone()),
            Tail::Number(x) => TailKey::Number(x.to_bits()),
            Tail::Datetime(d) => TailKey::Datetime(*d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum TailKey {
    Text(String),
    Number(u64),
    Datetime(DatetimeValue),
}

/// One fact `(head, relation, tail)`; the tail kind is carried by [`Tail`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: Tail,
}

impl Triple {
    pub fn tail_kind(&self) -> TailKind {
        self.tail.kind()
    }
}

/// Per-relation data: kind, distinct tails and fitted transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationInfo {
    pub kind: TailKind,
    /// Distinct tails in first-seen order.
    pub pool: Vec<Tail>,
    /// Present for numeric and datetime relations.
    pub transform: Option<PowerTransform>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub entities: usize,
    pub relations: usize,
    pub facts: usize,
}

/// Facts indexed by head entity and by relation.
#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    facts: Vec<Triple>,
    by_entity: IndexMap<String, Vec<usize>>,
    relations: IndexMap<String, RelationInfo>,
}

/// Parses one non-comment line of the triple format.
pub fn parse_triple_line(line: &str) -> std::result::Result<Triple, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let (head, relation, tail, kind) = (fields[0].trim(), fields[1].trim(), fields[2].trim(), fields[3].trim());
    if head.is_empty() || relation.is_empty() {
        return Err("empty head or relation".into());
    }
    let kind = TailKind::parse(kind).ok_or_else(|| format!("unknown kind {kind:?} (expected str, num or dt)"))?;
    let tail = match kind {
        TailKind::Str if tail.is_empty() => return Err("empty string tail".into()),
        TailKind::Str => Tail::Text(tail.to_string()),
        TailKind::Num => match tail.parse::<f64>() {
            Ok(x) if x.is_finite() => Tail::Number(x),
            _ => return Err(format!("{tail:?} is not a finite decimal number")),
        },
        TailKind::Dt => Tail::Datetime(tail.parse().map_err(|e: Error| e.to_string())?),
    };
    Ok(Triple {
        head: head.to_string(),
        relation: relation.to_string(),
        tail,
    })
}

impl KnowledgeStore {
    /// Indexes facts and fits a transform for every numeric or datetime
    /// relation. Relations whose tails mix kinds are rejected.
    pub fn from_triples(facts: Vec<Triple>) -> Result<Self> {
        let mut by_entity: IndexMap<String, Vec<usize>> = IndexMap::new();
        let mut kinds: IndexMap<String, Vec<TailKind>> = IndexMap::new();
        for (i, f) in facts.iter().enumerate() {
            by_entity.entry(f.head.clone()).or_default().push(i);
            let ks = kinds.entry(f.relation.clone()).or_default();
            if !ks.contains(&f.tail_kind()) {
                ks.push(f.tail_kind());
            }
        }
        let mixed: Vec<String> = kinds
            .iter()
            .filter(|(_, k)| k.len() > 1)
            .map(|(r, k)| format!("{r} ({})", k.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("/")))
            .collect();
        if !mixed.is_empty() {
            return Err(Error::MixedRelationKinds(mixed));
        }

        let mut relations: IndexMap<String, RelationInfo> = IndexMap::new();
        let mut seen: IndexMap<String, HashSet<TailKey>> = IndexMap::new();
        let mut values: IndexMap<String, Vec<f64>> = IndexMap::new();
        for f in &facts {
            let info = relations.entry(f.relation.clone()).or_insert_with(|| RelationInfo {
                kind: f.tail_kind(),
                pool: Vec::new(),
                transform: None,
            });
            if seen.entry(f.relation.clone()).or_default().insert(f.tail.key()) {
                info.pool.push(f.tail.clone());
            }
            if let Some(x) = f.tail.scalar() {
                values.entry(f.relation.clone()).or_default().push(x);
            }
        }
        for (rel, vals) in values {
            let t = PowerTransform::fit_or_identity(&vals, &rel);
            relations.get_mut(&rel).expect("relation indexed").transform = Some(t);
        }
        Ok(Self {
            facts,
            by_entity,
            relations,
        })
    }

    pub fn parse(reader: impl Read) -> Result<Self> {
        let mut facts = Vec::new();
        let mut bad = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match parse_triple_line(line) {
                Ok(t) => facts.push(t),
                Err(reason) => bad.push((idx + 1, reason)),
            }
        }
        if !bad.is_empty() {
            return Err(Error::MalformedLines(bad));
        }
        Self::from_triples(facts)
    }

    /// Reads a `head<TAB>relation<TAB>tail<TAB>kind` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file)
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            entities: self.by_entity.len(),
            relations: self.relations.len(),
            facts: self.facts.len(),
        }
    }

    pub fn facts(&self) -> &[Triple] {
        &self.facts
    }

    pub fn entity_count(&self) -> usize {
        self.by_entity.len()
    }

    pub fn entity(&self, idx: usize) -> (&str, &[usize]) {
        let (name, facts) = self.by_entity.get_index(idx).expect("entity index in range");
        (name, facts)
    }

    pub fn entity_facts(&self, name: &str) -> Option<Vec<&Triple>> {
        self.by_entity
            .get(name)
            .map(|ids| ids.iter().map(|&i| &self.facts[i]).collect())
    }

    pub fn relation(&self, name: &str) -> Option<&RelationInfo> {
        self.relations.get(name)
    }

    pub fn relations(&self) -> impl Iterator<Item = (&str, &RelationInfo)> {
        self.relations.iter().map(|(k, v)| (k.as_str(), v))
    }
}
