//! Turning table cells into (column embedding, cell embedding) pairs.

use serde::{Deserialize, Serialize};

use crate::embed::{DatetimeValue, PowerTransform, StringEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numerical,
    CategoricalString,
    Datetime,
}

/// A feature column: its name, kind, embedded name and optional transform
/// for numerical and datetime values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub embedding: Vec<f64>,
    pub transform: Option<PowerTransform>,
}

impl ColumnSpec {
    /// Embeds the column name with `embedder`.
    pub fn new(name: &str, kind: ColumnKind, embedder: &StringEmbedder) -> Self {
        Self {
            name: name.to_string(),
            kind,
            embedding: embedder.embed(name).vector,
            transform: None,
        }
    }

    pub fn with_transform(mut self, t: PowerTransform) -> Self {
        self.transform = Some(t);
        self
    }

    fn scalar(&self, x: f64) -> f64 {
        match &self.transform {
            Some(t) => t.apply(x),
            None => x,
        }
    }
}

/// Raw content of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellValue {
    Missing,
    Text(String),
    Number(f64),
    Datetime(DatetimeValue),
}

/// One column–cell pair, both in the string-embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPair {
    pub column: Vec<f64>,
    pub cell: Vec<f64>,
}

/// A table row (or knowledge-base entity) as a set of pairs; missing cells
/// are left out.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellPairSequence {
    pub row: usize,
    pub pairs: Vec<CellPair>,
}

impl CellPairSequence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn scaled(column: &[f64], s: f64) -> Vec<f64> {
    column.iter().map(|e| e * s).collect()
}

/// Builds the pair for one cell, or `None` when the cell is missing.
///
/// Strings map to their embedding; numbers and datetimes (as fractional
/// years) are transformed and then scale the column embedding.
pub fn build_cell_pair(col: &ColumnSpec, cell: &CellValue, embedder: &StringEmbedder) -> Result<Option<CellPair>> {
    let cell_vec = match (col.kind, cell) {
        (_, CellValue::Missing) => return Ok(None),
        (ColumnKind::CategoricalString, CellValue::Text(s)) => {
            let e = embedder.embed(s);
            if e.missing {
                return Ok(None);
            }
            e.vector
        }
        (ColumnKind::CategoricalString, CellValue::Number(x)) => embedder.embed(&x.to_string()).vector,
        (ColumnKind::CategoricalString, CellValue::Datetime(d)) => embedder.embed(&d.to_string()).vector,
        (ColumnKind::Numerical, CellValue::Number(x)) => {
            if !x.is_finite() {
                return Ok(None);
            }
            scaled(&col.embedding, col.scalar(*x))
        }
        (ColumnKind::Numerical, CellValue::Text(s)) => {
            let x: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("column {:?}: {s:?} is not a number", col.name)))?;
            scaled(&col.embedding, col.scalar(x))
        }
        (ColumnKind::Datetime, CellValue::Datetime(d)) => scaled(&col.embedding, col.scalar(d.fractional_year())),
        (ColumnKind::Datetime, CellValue::Text(s)) => {
            let d: DatetimeValue = s.parse()?;
            scaled(&col.embedding, col.scalar(d.fractional_year()))
        }
        (ColumnKind::Numerical | ColumnKind::Datetime, other) => {
            return Err(Error::Parse(format!(
                "column {:?} of kind {:?} cannot hold {other:?}",
                col.name, col.kind
            )))
        }
    };
    if cell_vec.len() != col.embedding.len() {
        return Err(Error::shape(
            "build_cell_pair",
            format!("cell width {} vs column width {}", cell_vec.len(), col.embedding.len()),
        ));
    }
    Ok(Some(CellPair {
        column: col.embedding.clone(),
        cell: cell_vec,
    }))
}

/// Builds a row from parallel column specs and cells.
pub fn build_row(row: usize, columns: &[ColumnSpec], cells: &[CellValue], embedder: &StringEmbedder) -> Result<CellPairSequence> {
    if columns.len() != cells.len() {
        return Err(Error::shape("build_row", format!("{} columns, {} cells", columns.len(), cells.len())));
    }
    let mut pairs = Vec::with_capacity(cells.len());
    for (col, cell) in columns.iter().zip(cells) {
        if let Some(p) = build_cell_pair(col, cell, embedder)? {
            pairs.push(p);
        }
    }
    Ok(CellPairSequence { row, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::NgramHasher;

    fn embedder() -> StringEmbedder {
        StringEmbedder::hashed(16, NgramHasher::default()).unwrap()
    }

    fn numeric_col(e: &StringEmbedder) -> ColumnSpec {
        ColumnSpec::new("population", ColumnKind::Numerical, e)
    }

    #[test]
    fn zero_scalar_annihilates() {
        let e = embedder();
        let p = build_cell_pair(&numeric_col(&e), &CellValue::Number(0.0), &e).unwrap().unwrap();
        assert!(p.cell.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn numeric_scales_column_embedding() {
        let e = embedder();
        let col = numeric_col(&e);
        let p = build_cell_pair(&col, &CellValue::Number(2.0), &e).unwrap().unwrap();
        for (x, c) in p.cell.iter().zip(&col.embedding) {
            assert_eq!(*x, 2.0 * c);
        }
        assert_eq!(p.column, col.embedding);
    }

    #[test]
    fn transform_applied_before_scaling() {
        let e = embedder();
        let t = PowerTransform {
            relation: "population".into(),
            lambda: 1.0,
            mean: 4.0,
            std: 2.0,
        };
        let col = numeric_col(&e).with_transform(t);
        // (8 - 4) / 2 = 2
        let p = build_cell_pair(&col, &CellValue::Number(8.0), &e).unwrap().unwrap();
        for (x, c) in p.cell.iter().zip(&col.embedding) {
            assert!((x - 2.0 * c).abs() < 1e-15);
        }
    }

    #[test]
    fn categorical_uses_string_embedding() {
        let e = embedder();
        let col = ColumnSpec::new("Language", ColumnKind::CategoricalString, &e);
        let p = build_cell_pair(&col, &CellValue::Text("English".into()), &e).unwrap().unwrap();
        assert_eq!(p.cell, e.embed("English").vector);
    }

    #[test]
    fn datetime_uses_fractional_year() {
        let e = embedder();
        let col = ColumnSpec::new("founded", ColumnKind::Datetime, &e);
        let p = build_cell_pair(&col, &CellValue::Text("2000-01-01".into()), &e).unwrap().unwrap();
        for (x, c) in p.cell.iter().zip(&col.embedding) {
            assert_eq!(*x, 2000.0 * c);
        }
    }

    #[test]
    fn missing_cells_are_absent() {
        let e = embedder();
        let cat = ColumnSpec::new("name", ColumnKind::CategoricalString, &e);
        assert!(build_cell_pair(&cat, &CellValue::Missing, &e).unwrap().is_none());
        assert!(build_cell_pair(&cat, &CellValue::Text("  ".into()), &e).unwrap().is_none());
        let row = build_row(0, &[numeric_col(&e), cat], &[CellValue::Number(1.0), CellValue::Missing], &e).unwrap();
        assert_eq!(row.len(), 1);
    }

    #[test]
    fn unparseable_numeric_is_error() {
        let e = embedder();
        let err = build_cell_pair(&numeric_col(&e), &CellValue::Text("lots".into()), &e);
        assert!(matches!(err, Err(Error::Parse(_))));
    }
}
