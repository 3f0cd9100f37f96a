//! Table rows to encoder inputs, and frozen-backbone features.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embed::{PowerTransform, StringEmbedder};
use crate::encoder::{build_row, CellPairSequence, CellValue, ColumnKind, ColumnSpec, EncoderModel, ParamId};
use crate::error::{Error, Result};
use crate::ingest::{is_missing, parse_datetime, parse_number, Table, TableSchema};
use crate::numerics::{Tape, Tensor};
use crate::scalar::Scalar;

/// Feature columns with their embedded names and train-fitted transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEncoding {
    pub columns: Vec<ColumnSpec>,
}

fn cell(kind: ColumnKind, raw: &str) -> CellValue {
    if is_missing(raw) {
        return CellValue::Missing;
    }
    match kind {
        ColumnKind::Numerical => parse_number(raw).map_or(CellValue::Missing, CellValue::Number),
        ColumnKind::Datetime => parse_datetime(raw).map_or(CellValue::Missing, CellValue::Datetime),
        ColumnKind::CategoricalString => CellValue::Text(raw.trim().to_string()),
    }
}

impl TableEncoding {
    /// Embeds column names and fits a power transform per numeric or
    /// datetime column on the `train` rows only.
    pub fn fit(table: &Table, schema: &TableSchema, train: &[usize], embedder: &StringEmbedder) -> Result<Self> {
        let idx = schema.feature_indices(table)?;
        let mut columns = Vec::with_capacity(idx.len());
        for (info, &ci) in schema.columns.iter().zip(&idx) {
            let mut spec = ColumnSpec::new(&info.name, info.kind, embedder);
            if info.kind != ColumnKind::CategoricalString {
                let values: Vec<f64> = train
                    .iter()
                    .filter_map(|&r| match cell(info.kind, &table.rows[r][ci]) {
                        CellValue::Number(x) => Some(x),
                        CellValue::Datetime(d) => Some(d.fractional_year()),
                        _ => None,
                    })
                    .collect();
                spec.transform = Some(PowerTransform::fit_or_identity(&values, &info.name));
            }
            columns.push(spec);
        }
        Ok(Self { columns })
    }

    pub fn width(&self) -> usize {
        self.columns.first().map_or(0, |c| c.embedding.len())
    }

    /// Encoder inputs for the given rows; unparseable numbers and dates
    /// count as missing.
    pub fn rows(&self, table: &Table, indices: &[usize], embedder: &StringEmbedder) -> Result<Vec<CellPairSequence>> {
        let idx: Vec<usize> = self
            .columns
            .iter()
            .map(|c| table.column_index(&c.name))
            .collect::<Result<_>>()?;
        indices
            .iter()
            .map(|&r| {
                let cells: Vec<CellValue> = self
                    .columns
                    .iter()
                    .zip(&idx)
                    .map(|(c, &ci)| cell(c.kind, &table.rows[r][ci]))
                    .collect();
                build_row(r, &self.columns, &cells, embedder)
            })
            .collect()
    }

    pub fn all_rows(&self, table: &Table, embedder: &StringEmbedder) -> Result<Vec<CellPairSequence>> {
        let all: Vec<usize> = (0..table.len()).collect();
        self.rows(table, &all, embedder)
    }
}

/// Row embeddings of a table plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub n: usize,
    pub q: usize,
    /// Row-major `n×q`.
    pub values: Vec<f64>,
    /// Rows without any non-missing cell; their values are zero.
    pub missing: Vec<bool>,
    pub checkpoint: String,
    pub table: String,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.q..(i + 1) * self.q]
    }

    pub fn any_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    /// Regression design: the features, plus a 0/1 column flagging missing
    /// rows when `with_flag` is set.
    pub fn design(&self, with_flag: bool) -> DMatrix<f64> {
        let cols = self.q + usize::from(with_flag);
        DMatrix::from_fn(self.n, cols, |i, j| {
            if j < self.q {
                self.values[i * self.q + j]
            } else if self.missing[i] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.q);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            q: self.q,
            values,
            missing: indices.iter().map(|&i| self.missing[i]).collect(),
            checkpoint: self.checkpoint.clone(),
            table: self.table.clone(),
        }
    }
}

/// Eval-mode readouts (width `d`) or a Matryoshka projection (width `dim`)
/// for each row, `batch` rows per tape. `overrides` replaces selected
/// backbone parameters.
pub fn embed_with<T: Scalar>(
    model: &EncoderModel<T>,
    rows: &[CellPairSequence],
    dim: usize,
    overrides: &HashMap<ParamId, Arc<Tensor<T>>>,
    batch: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    let d = model.config().d_model;
    if dim != d && !model.matryoshka_dims().contains(&dim) {
        return Err(Error::InvalidArgument(format!(
            "dim {dim} is neither the backbone width {d} nor one of {:?}",
            model.matryoshka_dims()
        )));
    }
    let present: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].is_empty()).collect();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; rows.len()];
    for chunk in present.chunks(batch.max(1)) {
        let subset: Vec<CellPairSequence> = chunk.iter().map(|&i| rows[i].clone()).collect();
        let mut tape = Tape::new();
        let b = model.bind_with(&mut tape, |_| false, overrides);
        let (z, segs) = model.assemble(&mut tape, &b, &subset)?;
        let mut h = model.encode(&mut tape, &b, z, &segs, None)?;
        if dim != d {
            h = model.project_one(&mut tape, &b, h, dim)?;
        }
        for (k, v) in tape.value(h).data().chunks(dim).enumerate() {
            out[chunk[k]] = Some(v.iter().map(|x| x.to_f64_lossy()).collect());
        }
    }
    Ok(out)
}

/// Frozen-backbone features of `rows` at width `dim`.
pub fn featurize<T: Scalar>(
    model: &EncoderModel<T>,
    rows: &[CellPairSequence],
    dim: usize,
    checkpoint: &str,
    table: &str,
) -> Result<FeatureMatrix> {
    let emb = embed_with(model, rows, dim, &HashMap::new(), 64)?;
    Ok(assemble_features(emb, dim, checkpoint, table))
}

pub(crate) fn assemble_features(emb: Vec<Option<Vec<f64>>>, q: usize, checkpoint: &str, table: &str) -> FeatureMatrix {
    let n = emb.len();
    let mut values = Vec::with_capacity(n * q);
    let mut missing = Vec::with_capacity(n);
    for e in emb {
        match e {
            Some(v) => {
                values.extend(v);
                missing.push(false);
            }
            None => {
                values.extend(std::iter::repeat_n(0.0, q));
                missing.push(true);
            }
        }
    }
    let count = missing.iter().filter(|&&m| m).count();
    if count > 0 {
        warn!("{count} row(s) of {table} have no non-missing cells; using zero features with a missing flag");
    }
    FeatureMatrix {
        n,
        q,
        values,
        missing,
        checkpoint: checkpoint.to_string(),
        table: table.to_string(),
    }
}

const CACHE_MAGIC: &[u8; 8] = b"TKFEAT01";

fn io(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("feature cache: {e}"))
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32).map_err(io)?;
    w.write_all(s.as_bytes()).map_err(io)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(io)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Binary cache: magic, `n`, `q` (u64), checkpoint id, table id, missing
/// flags (u8 each), values (f64 little-endian, row-major).
pub fn write_features(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_u64::<LittleEndian>(f.n as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(f.q as u64).map_err(io)?;
    put_str(&mut w, &f.checkpoint)?;
    put_str(&mut w, &f.table)?;
    for &m in &f.missing {
        w.write_u8(u8::from(m)).map_err(io)?;
    }
    for &v in &f.values {
        w.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a feature cache", path.display())));
    }
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let q = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let checkpoint = get_str(&mut r)?;
    let table = get_str(&mut r)?;
    let missing = (0..n)
        .map(|_| r.read_u8().map(|b| b != 0).map_err(io))
        .collect::<Result<Vec<_>>>()?;
    let values = (0..n * q)
        .map(|_| r.read_f64::<LittleEndian>().map_err(io))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        n,
        q,
        values,
        missing,
        checkpoint,
        table,
    })
}
