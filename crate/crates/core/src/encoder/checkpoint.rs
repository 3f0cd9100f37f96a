//! Binary checkpoint container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "TARTEKIT"                      8 bytes magic
//! version                         u32
//! layers heads d_model d_ff d_lm  u32 × 5
//! proj_hidden                     u32
//! n_dims, dims...                 u32, u32 × n_dims
//! dropout                         f64
//! n_params                        u32
//!   name_len, name                u32, utf-8 bytes
//!   rank, extents                 u32, u64 × rank
//!   values                        f64 × product(extents)
//! has_training_state              u8
//!   step, lr                      u64, f64
//!   beta1 beta2 eps weight_decay  f64 × 4
//!   per parameter: first moment, second moment (f64 × len each)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::encoder::model::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"TARTEKIT";
pub const FORMAT_VERSION: u32 = 1;

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_u32::<LittleEndian>(v).map_err(ck)
}

fn put_f64s<T: Scalar>(w: &mut impl Write, xs: &[T]) -> Result<()> {
    for x in xs {
        w.write_f64::<LittleEndian>(x.to_f64_lossy()).map_err(ck)?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>().map_err(ck)? as usize)
}

fn get_f64s<T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    (0..n)
        .map(|_| r.read_f64::<LittleEndian>().map(T::of).map_err(ck))
        .collect()
}

pub fn write_checkpoint<T: Scalar>(
    w: &mut impl Write,
    model: &EncoderModel<T>,
    training: Option<&OptimizerState<T>>,
) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC).map_err(ck)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(ck)?;
    for v in [c.layers, c.heads, c.d_model, c.d_ff, c.d_lm, c.proj_hidden, c.matryoshka_dims.len()] {
        put_u32(w, v)?;
    }
    for &d in &c.matryoshka_dims {
        put_u32(w, d)?;
    }
    w.write_f64::<LittleEndian>(c.dropout).map_err(ck)?;

    let store = model.store();
    put_u32(w, store.len())?;
    for (_, name, t) in store.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes()).map_err(ck)?;
        put_u32(w, t.shape().len())?;
        for &s in t.shape() {
            w.write_u64::<LittleEndian>(s as u64).map_err(ck)?;
        }
        put_f64s(w, t.data())?;
    }

    match training {
        None => w.write_u8(0).map_err(ck)?,
        Some(st) => {
            if st.first_moment.len() != store.len() {
                return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
            }
            w.write_u8(1).map_err(ck)?;
            w.write_u64::<LittleEndian>(st.step).map_err(ck)?;
            let AdamWConfig {
                beta1,
                beta2,
                eps,
                weight_decay,
            } = st.config;
            for v in [st.lr, beta1, beta2, eps, weight_decay] {
                w.write_f64::<LittleEndian>(v).map_err(ck)?;
            }
            for (m, v) in st.first_moment.iter().zip(&st.second_moment) {
                put_f64s(w, m)?;
                put_f64s(w, v)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<(EncoderModel<T>, Option<OptimizerState<T>>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(ck)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut head = [0usize; 7];
    for h in head.iter_mut() {
        *h = get_u32(r)?;
    }
    let [layers, heads, d_model, d_ff, d_lm, proj_hidden, n_dims] = head;
    let matryoshka_dims = (0..n_dims).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let dropout = r.read_f64::<LittleEndian>().map_err(ck)?;
    let config = EncoderConfig {
        layers,
        heads,
        d_model,
        d_ff,
        d_lm,
        matryoshka_dims,
        proj_hidden,
        dropout,
    };
    let mut model = EncoderModel::<T>::new(config, 0)?;

    let n_params = get_u32(r)?;
    if n_params != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "{n_params} parameter blobs, configuration implies {}",
            model.store().len()
        )));
    }
    for _ in 0..n_params {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(ck)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize).map_err(ck))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = get_f64s::<T>(r, count)?;
        let id = model
            .store()
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        model.store_mut().set(id, Tensor::new(&shape, data)?)?;
    }

    let training = match r.read_u8().map_err(ck)? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>().map_err(ck)?;
            let mut v = [0f64; 5];
            for x in v.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(ck)?;
            }
            let config = AdamWConfig {
                beta1: v[1],
                beta2: v[2],
                eps: v[3],
                weight_decay: v[4],
            };
            let params: Vec<&Tensor<T>> = model.store().iter().map(|(_, _, t)| t).collect();
            let mut st = OptimizerState::new(config, &params);
            st.step = step;
            st.lr = v[0];
            for i in 0..params.len() {
                st.first_moment[i] = get_f64s(r, params[i].len())?;
                st.second_moment[i] = get_f64s(r, params[i].len())?;
            }
            Some(st)
        }
        other => return Err(Error::Checkpoint(format!("bad training-state flag {other}"))),
    };
    Ok((model, training))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &EncoderModel<T>,
    training: Option<&OptimizerState<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, training)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(EncoderModel<T>, Option<OptimizerState<T>>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}

/// Short content hash identifying a checkpoint's weights.
pub fn checkpoint_id<T: Scalar>(model: &EncoderModel<T>) -> String {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, model, None).expect("writing to memory");
    hex::encode(&Sha256::digest(&bytes)[..8])
}
