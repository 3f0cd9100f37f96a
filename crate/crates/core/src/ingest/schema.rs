//! Column-type inference and target extraction.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::embed::DatetimeValue;
use crate::encoder::ColumnKind;
use crate::error::{Error, Result};
use crate::ingest::table::{is_missing, Table};

/// Share of non-missing values that must parse for a typed column.
pub const PARSE_RATE: f64 = 0.95;
/// Columns with more distinct values than this are flagged.
pub const HIGH_CARDINALITY: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

impl TaskKind {
    pub fn metric(self) -> &'static str {
        match self {
            Self::Regression => "r2",
            Self::BinaryClassification => "auroc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub kind: ColumnKind,
    pub distinct: usize,
    pub high_cardinality: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    /// Feature columns in table order; the target is not among them.
    pub columns: Vec<ColumnInfo>,
    pub target: Option<String>,
    pub task: Option<TaskKind>,
    /// For classification, the label mapped to 1.
    pub positive_label: Option<String>,
}

pub fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

pub fn parse_datetime(s: &str) -> Option<DatetimeValue> {
    s.parse().ok()
}

/// Kind and distinct count of one column's raw values.
pub fn infer_column<'a>(values: impl Iterator<Item = &'a str>) -> (ColumnKind, usize) {
    let present: Vec<&str> = values.filter(|v| !is_missing(v)).map(str::trim).collect();
    let distinct = present.iter().collect::<HashSet<_>>().len();
    if present.is_empty() {
        return (ColumnKind::CategoricalString, 0);
    }
    let need = PARSE_RATE * present.len() as f64;
    let numeric = present.iter().filter(|v| parse_number(v).is_some()).count();
    if numeric as f64 >= need {
        return (ColumnKind::Numerical, distinct);
    }
    let dates = present.iter().filter(|v| parse_datetime(v).is_some()).count();
    if dates as f64 >= need {
        return (ColumnKind::Datetime, distinct);
    }
    (ColumnKind::CategoricalString, distinct)
}

/// Infers feature kinds. Without an explicit task, a target with two
/// distinct values is classification and anything else regression.
pub fn infer_schema(table: &Table, target: Option<&str>, task: Option<TaskKind>) -> Result<TableSchema> {
    let target_idx = target.map(|t| table.column_index(t)).transpose()?;
    let mut columns = Vec::with_capacity(table.headers.len());
    for (i, name) in table.headers.iter().enumerate() {
        if Some(i) == target_idx {
            continue;
        }
        let (kind, distinct) = infer_column(table.column(i));
        columns.push(ColumnInfo {
            name: name.clone(),
            kind,
            distinct,
            high_cardinality: distinct > HIGH_CARDINALITY,
        });
    }
    let (task, positive_label) = match target_idx {
        None => (task, None),
        Some(ti) => {
            let labels: BTreeSet<&str> = table.column(ti).filter(|v| !is_missing(v)).map(str::trim).collect();
            let task = task.unwrap_or(if labels.len() == 2 {
                TaskKind::BinaryClassification
            } else {
                TaskKind::Regression
            });
            let positive = match task {
                TaskKind::Regression => None,
                TaskKind::BinaryClassification => {
                    if labels.len() != 2 {
                        return Err(Error::Schema(format!(
                            "binary target {:?} has {} distinct labels",
                            target.unwrap_or_default(),
                            labels.len()
                        )));
                    }
                    Some(positive_label(&labels).to_string())
                }
            };
            (Some(task), positive)
        }
    };
    Ok(TableSchema {
        columns,
        target: target.map(str::to_string),
        task,
        positive_label,
    })
}

/// `1`, `true` or `yes` when present, otherwise the larger label.
fn positive_label<'a>(labels: &BTreeSet<&'a str>) -> &'a str {
    for cand in ["1", "1.0", "true", "yes"] {
        if let Some(l) = labels.iter().find(|l| l.eq_ignore_ascii_case(cand)) {
            return l;
        }
    }
    labels.iter().next_back().expect("two labels")
}

impl TableSchema {
    /// Numeric target values: regression values, or 0/1 labels.
    pub fn target_values(&self, table: &Table) -> Result<Vec<f64>> {
        let name = self
            .target
            .as_deref()
            .ok_or_else(|| Error::Schema("no target column selected".into()))?;
        let idx = table.column_index(name)?;
        table
            .column(idx)
            .enumerate()
            .map(|(row, v)| {
                if is_missing(v) {
                    return Err(Error::Schema(format!("row {}: missing target", row + 1)));
                }
                match (&self.task, &self.positive_label) {
                    (Some(TaskKind::BinaryClassification), Some(pos)) => Ok(if v.trim() == pos { 1.0 } else { 0.0 }),
                    _ => parse_number(v).ok_or_else(|| Error::Schema(format!("row {}: target {v:?} is not a number", row + 1))),
                }
            })
            .collect()
    }

    /// Indices of the feature columns in `table`.
    pub fn feature_indices(&self, table: &Table) -> Result<Vec<usize>> {
        self.columns.iter().map(|c| table.column_index(&c.name)).collect()
    }
}
