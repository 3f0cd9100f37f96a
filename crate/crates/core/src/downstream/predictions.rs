//! Prediction exchange files: CSV `row_id,prediction`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub row_id: usize,
    pub prediction: f64,
}

pub fn write_predictions(path: impl AsRef<Path>, row_ids: &[usize], preds: &[f64]) -> Result<()> {
    if row_ids.len() != preds.len() {
        return Err(Error::shape("write_predictions", format!("{} ids, {} predictions", row_ids.len(), preds.len())));
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for (&row_id, &prediction) in row_ids.iter().zip(preds) {
        w.serialize(PredictionRow { row_id, prediction })?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Predictions ordered as `row_ids`; every id must be present exactly once.
pub fn align_predictions(rows: &[PredictionRow], row_ids: &[usize]) -> Result<Vec<f64>> {
    let mut by_id = std::collections::HashMap::with_capacity(rows.len());
    for r in rows {
        if by_id.insert(r.row_id, r.prediction).is_some() {
            return Err(Error::InvalidArgument(format!("row {} predicted twice", r.row_id)));
        }
    }
    row_ids
        .iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| Error::InvalidArgument(format!("no prediction for row {id}"))))
        .collect()
}
