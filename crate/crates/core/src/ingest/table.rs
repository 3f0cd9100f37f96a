//! Raw CSV tables.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cells kept as strings; typing happens in schema inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Empty cells and `NA`, `NaN`, `null` in any case.
pub fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || ["na", "nan", "null"].iter().any(|m| t.eq_ignore_ascii_case(m))
}

impl Table {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if headers.is_empty() {
            return Err(Error::Schema("table has no header".into()));
        }
        let mut seen = HashSet::new();
        let dups: Vec<&str> = headers.iter().filter(|h| !seen.insert(h.as_str())).map(String::as_str).collect();
        if !dups.is_empty() {
            return Err(Error::Schema(format!("duplicate column names: {}", dups.join(", "))));
        }
        if headers.iter().any(|h| h.trim().is_empty()) {
            return Err(Error::Schema("empty column name in header".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != headers.len()) {
            return Err(Error::Schema(format!(
                "row {} has {} cells, header has {}",
                i + 1,
                rows[i].len(),
                headers.len()
            )));
        }
        Ok(Self { headers, rows })
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::Schema("empty file: no header row".into()));
        }
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Self::new(headers, rows)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("no column named {name:?}")))
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[idx].as_str())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            headers: self.headers.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_fields() {
        let t = Table::from_reader("name,notes\n\"Smith, J\",\"said \"\"hi\"\"\"\n".as_bytes()).unwrap();
        assert_eq!(t.rows[0], vec!["Smith, J".to_string(), "said \"hi\"".to_string()]);
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        assert!(matches!(Table::from_reader("a,b,a\n1,2,3\n".as_bytes()), Err(Error::Schema(_))));
        assert!(Table::from_reader("".as_bytes()).is_err());
    }

    #[test]
    fn missing_tokens() {
        for s in ["", " ", "NA", "na", "NaN", "NULL", "null"] {
            assert!(is_missing(s), "{s:?}");
        }
        assert!(!is_missing("0"));
        assert!(!is_missing("none"));
    }
}
