//! The column–cell transformer encoder.
//!
//! A row of `k` pairs becomes a `(k+1)×d` input: a learnable readout vector
//! stacked on top of `ρ_E(E_j) + ρ_X(X_j)` for every pair. The stack runs
//! through pre-norm self-attention blocks without positional encodings, so
//! the readout output does not depend on pair order. Matryoshka heads project
//! the readout to each configured width.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::cells::CellPairSequence;
use crate::encoder::params::{Bound, LayerNorm, Linear, ParamId, ParamStore, Rho};
use crate::error::{Error, Result};
use crate::numerics::{Segment, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Width of the string embeddings feeding the ρ maps.
    pub d_lm: usize,
    pub matryoshka_dims: Vec<usize>,
    /// Hidden width of each Matryoshka head.
    pub proj_hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 24,
            d_model: 768,
            d_ff: 2048,
            d_lm: 300,
            matryoshka_dims: vec![64, 128, 256, 512, 768],
            proj_hidden: 2048,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.d_lm == 0 {
            return bad(format!("all encoder sizes must be positive: {self:?}"));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.matryoshka_dims.iter().any(|&d| d == 0) || (!self.matryoshka_dims.is_empty() && self.proj_hidden == 0) {
            return bad("Matryoshka widths and hidden width must be positive".into());
        }
        let mut dims = self.matryoshka_dims.clone();
        dims.dedup();
        if dims.len() != self.matryoshka_dims.len() || dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("Matryoshka dims must be strictly increasing: {:?}", self.matryoshka_dims));
        }
        Ok(())
    }

    /// Trainable scalar count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (d, lm) = (self.d_model, self.d_lm);
        let linear = |i: usize, o: usize| i * o + o;
        let rho = 2 * lm + linear(lm, d);
        let block = 4 * linear(d, d) + 2 * (2 * d) + linear(d, self.d_ff) + linear(self.d_ff, d);
        let heads: usize = self
            .matryoshka_dims
            .iter()
            .map(|&m| linear(d, self.proj_hidden) + linear(self.proj_hidden, m))
            .sum();
        2 * rho + d + self.layers * block + 2 * d + heads
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// `ρ_E` and `ρ_X`.
    InputMaps,
    Readout,
    /// Attention and feed-forward blocks plus the final norm.
    Transformer,
    Heads,
}

#[derive(Debug, Clone)]
struct Block {
    norm_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Head {
    dim: usize,
    hidden: Linear,
    out: Linear,
}

/// Dropout settings for a training-mode forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Encoder weights.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    store: ParamStore<T>,
    rho_column: Rho,
    rho_cell: Rho,
    readout: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    heads: Vec<Head>,
    groups: Vec<ParamGroup>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Fresh model with seeded initialization.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        let mut mark = |store: &ParamStore<T>, g: ParamGroup| groups.resize(store.len(), g);

        let (d, lm) = (config.d_model, config.d_lm);
        let rho_column = Rho::init(&mut store, "rho_column", lm, d, &mut rng);
        let rho_cell = Rho::init(&mut store, "rho_cell", lm, d, &mut rng);
        mark(&store, ParamGroup::InputMaps);
        let readout = store.add("readout", Tensor::normal(&[1, d], 0.02, &mut rng));
        mark(&store, ParamGroup::Readout);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("block{l}");
                Block {
                    norm_attn: LayerNorm::init(&mut store, &format!("{p}.norm_attn"), d),
                    query: Linear::init(&mut store, &format!("{p}.query"), d, d, &mut rng),
                    key: Linear::init(&mut store, &format!("{p}.key"), d, d, &mut rng),
                    value: Linear::init(&mut store, &format!("{p}.value"), d, d, &mut rng),
                    out: Linear::init(&mut store, &format!("{p}.out"), d, d, &mut rng),
                    norm_ff: LayerNorm::init(&mut store, &format!("{p}.norm_ff"), d),
                    ff_in: Linear::init(&mut store, &format!("{p}.ff_in"), d, config.d_ff, &mut rng),
                    ff_out: Linear::init(&mut store, &format!("{p}.ff_out"), config.d_ff, d, &mut rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::init(&mut store, "final_norm", d);
        mark(&store, ParamGroup::Transformer);
        let heads = config
            .matryoshka_dims
            .iter()
            .map(|&m| Head {
                dim: m,
                hidden: Linear::init(&mut store, &format!("head{m}.hidden"), d, config.proj_hidden, &mut rng),
                out: Linear::init(&mut store, &format!("head{m}.out"), config.proj_hidden, m, &mut rng),
            })
            .collect();
        mark(&store, ParamGroup::Heads);

        Ok(Self {
            config,
            store,
            rho_column,
            rho_cell,
            readout,
            blocks,
            final_norm,
            heads,
            groups,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Exact count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Digest of the readout vector and transformer blocks.
    pub fn transformer_digest(&self) -> String {
        self.store
            .digest(|id| matches!(self.group(id), ParamGroup::Readout | ParamGroup::Transformer))
    }

    pub fn rho_ids(&self) -> Vec<ParamId> {
        self.rho_column.ids().into_iter().chain(self.rho_cell.ids()).collect()
    }

    pub fn matryoshka_dims(&self) -> &[usize] {
        &self.config.matryoshka_dims
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound::all(&self.store, tape, trainable)
    }

    pub fn bind_with(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(ParamId) -> bool,
        overrides: &HashMap<ParamId, Arc<Tensor<T>>>,
    ) -> Bound {
        Bound::new(&self.store, tape, trainable, overrides)
    }

    /// Stacked transformer input for several rows, with one segment per row.
    pub fn assemble(&self, tape: &mut Tape<T>, b: &Bound, rows: &[CellPairSequence]) -> Result<(Var, Vec<Segment>)> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no rows to assemble".into()));
        }
        if rows.iter().any(CellPairSequence::is_empty) {
            return Err(Error::EmptyRow);
        }
        let lm = self.config.d_lm;
        let total: usize = rows.iter().map(CellPairSequence::len).sum();
        let mut columns = Vec::with_capacity(total * lm);
        let mut cells = Vec::with_capacity(total * lm);
        for pair in rows.iter().flat_map(|r| &r.pairs) {
            if pair.column.len() != lm || pair.cell.len() != lm {
                return Err(Error::shape(
                    "assemble_input",
                    format!("pair widths {}/{} vs d_lm {lm}", pair.column.len(), pair.cell.len()),
                ));
            }
            columns.extend(pair.column.iter().map(|&x| T::of(x)));
            cells.extend(pair.cell.iter().map(|&x| T::of(x)));
        }
        let columns = tape.constant(Tensor::new(&[total, lm], columns)?);
        let cells = tape.constant(Tensor::new(&[total, lm], cells)?);
        let col_mapped = self.rho_column.forward(tape, b, columns)?;
        let cell_mapped = self.rho_cell.forward(tape, b, cells)?;
        let pairs = tape.add(col_mapped, cell_mapped)?;

        let readout = b.var(self.readout);
        let mut pieces = Vec::with_capacity(2 * rows.len());
        let mut segments = Vec::with_capacity(rows.len());
        let (mut offset, mut start) = (0, 0);
        for r in rows {
            let k = r.len();
            pieces.push(readout);
            pieces.push(tape.slice_rows(pairs, offset, offset + k)?);
            segments.push(Segment { start, len: k + 1 });
            offset += k;
            start += k + 1;
        }
        Ok((tape.concat_rows(&pieces)?, segments))
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Option<DropoutCtx<'_>>) -> Result<Var> {
        let Some(ctx) = ctx.as_mut() else { return Ok(x) };
        if ctx.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - ctx.rate));
        let shape = tape.shape(x).to_vec();
        let mask: Vec<T> = (0..tape.value(x).len())
            .map(|_| if ctx.rng.random::<f64>() < ctx.rate { T::zero() } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(&shape, mask)?);
        tape.mul(x, mask)
    }

    /// Runs the blocks over stacked rows; returns the readout output of each
    /// segment as an `S×d` matrix. Dropout is active only with `dropout`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        z: Var,
        segments: &[Segment],
        mut dropout: Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let mut x = z;
        for blk in &self.blocks {
            let h = blk.norm_attn.forward(tape, b, x)?;
            let q = blk.query.forward(tape, b, h)?;
            let k = blk.key.forward(tape, b, h)?;
            let v = blk.value.forward(tape, b, h)?;
            let a = tape.attention(q, k, v, segments, self.config.heads)?;
            let a = blk.out.forward(tape, b, a)?;
            let a = self.dropout(tape, a, &mut dropout)?;
            x = tape.add(x, a)?;

            let h = blk.norm_ff.forward(tape, b, x)?;
            let f = blk.ff_in.forward(tape, b, h)?;
            let f = tape.relu(f);
            let f = blk.ff_out.forward(tape, b, f)?;
            let f = self.dropout(tape, f, &mut dropout)?;
            x = tape.add(x, f)?;
        }
        let x = self.final_norm.forward(tape, b, x)?;
        let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
        tape.gather_rows(x, &starts)
    }

    /// Matryoshka projections of an `S×d` readout matrix, keyed by width.
    pub fn project(&self, tape: &mut Tape<T>, b: &Bound, readout: Var) -> Result<Vec<(usize, Var)>> {
        self.heads
            .iter()
            .map(|h| {
                let hidden = h.hidden.forward(tape, b, readout)?;
                Ok((h.dim, h.out.forward(tape, b, hidden)?))
            })
            .collect()
    }

    pub fn project_one(&self, tape: &mut Tape<T>, b: &Bound, readout: Var, dim: usize) -> Result<Var> {
        let h = self
            .heads
            .iter()
            .find(|h| h.dim == dim)
            .ok_or_else(|| Error::InvalidArgument(format!("no Matryoshka head of width {dim}")))?;
        let hidden = h.hidden.forward(tape, b, readout)?;
        h.out.forward(tape, b, hidden)
    }

    /// Transformer input `Z` for one row: `(k+1)×d`.
    pub fn assemble_input(&self, row: &CellPairSequence) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (z, _) = self.assemble(&mut tape, &b, std::slice::from_ref(row))?;
        Ok(tape.value(z).clone())
    }

    /// Readout embedding of one assembled input.
    pub fn encode_row(&self, z: &Tensor<T>, dropout: Option<DropoutCtx<'_>>) -> Result<Vec<T>> {
        z.check_finite("encoder input")?;
        if !z.is_matrix() || z.cols() != self.config.d_model {
            return Err(Error::shape("encode_row", format!("input {:?}", z.shape())));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let seg = [Segment { start: 0, len: z.rows() }];
        let out = self.encode(&mut tape, &b, zv, &seg, dropout)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Eval-mode readout embeddings for many rows, `batch` rows per tape.
    pub fn embed_rows(&self, rows: &[CellPairSequence], batch: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let (z, segs) = self.assemble(&mut tape, &b, chunk)?;
            let r = self.encode(&mut tape, &b, z, &segs, None)?;
            out.extend(tape.value(r).data().chunks(self.config.d_model).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// One projected vector per configured width.
    pub fn project_matryoshka(&self, readout: &[T]) -> Result<BTreeMap<usize, Vec<T>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = tape.constant(Tensor::new(&[1, readout.len()], readout.to_vec())?);
        Ok(self
            .project(&mut tape, &b, h)?
            .into_iter()
            .map(|(dim, v)| (dim, tape.value(v).data().to_vec()))
            .collect())
    }
}
