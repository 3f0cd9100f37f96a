//! Fine-tuning with a frozen transformer: a three-ρ head (and optionally the
//! input ρ maps) trained on bagged train/validation splits with early
//! stopping, learning rate picked by mean validation loss.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::downstream::features::{assemble_features, embed_with, FeatureMatrix};
use crate::encoder::{checkpoint_id, Bound, CellPairSequence, DropoutCtx, EncoderModel, ParamId, ParamStore, Rho};
use crate::error::{Error, Result};
use crate::ingest::{split_indices, TaskKind};
use crate::numerics::{AdamWConfig, OptimizerState, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const MIN_ROWS: usize = 8;
pub const LEARNING_RATES: [f64; 5] = [1e-4, 2.5e-4, 5e-4, 7.5e-4, 1e-3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub bags: usize,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; `None` never
    /// stops early.
    pub patience: Option<usize>,
    pub max_epochs: usize,
    pub learning_rates: Vec<f64>,
    /// Defaults to 16 below 10 000 rows, 256 otherwise.
    pub batch_size: Option<usize>,
    /// Also train the backbone's input ρ maps.
    pub train_input_maps: bool,
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            bags: 5,
            val_fraction: 0.2,
            patience: Some(20),
            max_epochs: 100,
            learning_rates: LEARNING_RATES.to_vec(),
            batch_size: None,
            train_input_maps: true,
            dropout: 0.1,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn batch_size_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(if n < 10_000 { 16 } else { 256 })
    }

    fn validate(&self) -> Result<()> {
        if self.bags == 0 {
            return Err(Error::InvalidArgument("need at least one bagging member".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("validation fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::InvalidArgument(format!("bad learning-rate grid {:?}", self.learning_rates)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Task head: `ρ(d→d)`, `ρ(d→d)`, `ρ(d→1)`.
#[derive(Debug, Clone)]
struct Head {
    blocks: [Rho; 3],
}

impl Head {
    fn init<T: Scalar>(d: usize, seed: u64) -> (Self, ParamStore<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks = [
            Rho::init(&mut store, "head.0", d, d, &mut rng),
            Rho::init(&mut store, "head.1", d, d, &mut rng),
            Rho::init(&mut store, "head.2", d, 1, &mut rng),
        ];
        (Self { blocks }, store)
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for blk in &self.blocks {
            h = blk.forward(tape, b, h)?;
        }
        Ok(h)
    }
}

/// One bagging member.
#[derive(Debug, Clone)]
pub struct Member<T> {
    pub head: ParamStore<T>,
    /// Trained input-map values; empty when the maps were frozen.
    pub input_maps: HashMap<ParamId, Arc<Tensor<T>>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FineTunedModel<T> {
    backbone: EncoderModel<T>,
    checkpoint: String,
    head: Head,
    pub task: TaskKind,
    pub learning_rate: f64,
    /// `(lr, mean best validation loss)` over the grid.
    pub grid: Vec<(f64, f64)>,
    pub members: Vec<Member<T>>,
    target_mean: f64,
    target_std: f64,
    /// Prediction for rows with no usable cell.
    fallback: f64,
}

struct Trainer<'a, T: Scalar> {
    backbone: &'a EncoderModel<T>,
    rows: &'a [CellPairSequence],
    targets: Vec<T>,
    task: TaskKind,
    config: &'a FineTuneConfig,
    head: Head,
    rho_ids: Vec<ParamId>,
    /// Readouts when nothing upstream of the head changes during training.
    cached: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Trainer<'_, T> {
    fn outputs(
        &self,
        tape: &mut Tape<T>,
        head_store: &ParamStore<T>,
        maps: &HashMap<ParamId, Arc<Tensor<T>>>,
        idx: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Bound, Option<Bound>)> {
        let readout = match &self.cached {
            Some(cache) => {
                let d = self.backbone.config().d_model;
                let data: Vec<T> = idx.iter().flat_map(|&i| cache[i].iter().copied()).collect();
                (tape.constant(Tensor::new(&[idx.len(), d], data)?), None)
            }
            None => {
                let trainable = train && self.config.train_input_maps;
                let rho = &self.rho_ids;
                let bb = self.backbone.bind_with(tape, |id| trainable && rho.contains(&id), maps);
                let subset: Vec<CellPairSequence> = idx.iter().map(|&i| self.rows[i].clone()).collect();
                let (z, segs) = self.backbone.assemble(tape, &bb, &subset)?;
                let dropout = (train && self.config.dropout > 0.0).then(|| DropoutCtx {
                    rate: self.config.dropout,
                    rng,
                });
                (self.backbone.encode(tape, &bb, z, &segs, dropout)?, Some(bb))
            }
        };
        let hb = Bound::all(head_store, tape, train);
        let out = self.head.forward(tape, &hb, readout.0)?;
        Ok((out, hb, readout.1))
    }

    fn loss(&self, tape: &mut Tape<T>, out: Var, idx: &[usize]) -> Result<Var> {
        let y: Vec<T> = idx.iter().map(|&i| self.targets[i]).collect();
        match self.task {
            TaskKind::Regression => tape.mse(out, &y),
            TaskKind::BinaryClassification => tape.bce_with_logits(out, &y),
        }
    }

    fn eval_loss(
        &self,
        head_store: &ParamStore<T>,
        maps: &HashMap<ParamId, Arc<Tensor<T>>>,
        idx: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in idx.chunks(256) {
            let mut tape = Tape::new();
            let (out, _, _) = self.outputs(&mut tape, head_store, maps, chunk, false, rng)?;
            let l = self.loss(&mut tape, out, chunk)?;
            total += tape.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
        }
        Ok(total / idx.len() as f64)
    }

    fn train_member(&self, member: usize, usable: &[usize], lr: f64) -> Result<Member<T>> {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(member as u64);
        let n = usable.len();
        let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
        let labels: Option<Vec<f64>> = (self.task == TaskKind::BinaryClassification)
            .then(|| usable.iter().map(|&i| self.targets[i].to_f64_lossy()).collect());
        let (tr, va) = split_indices(n, labels.as_deref(), n - n_val, &mut rng)?;
        let train: Vec<usize> = tr.iter().map(|&k| usable[k]).collect();
        let val: Vec<usize> = va.iter().map(|&k| usable[k]).collect();

        let d = self.backbone.config().d_model;
        let (_, mut head) = Head::init::<T>(d, cfg.seed.wrapping_add(1 + member as u64));
        let head_ids: Vec<ParamId> = head.ids().collect();
        let mut maps: HashMap<ParamId, Arc<Tensor<T>>> = if cfg.train_input_maps {
            self.rho_ids.iter().map(|&id| (id, self.backbone.store().shared(id))).collect()
        } else {
            HashMap::new()
        };
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let mut opt_head = OptimizerState::new(adam, &head_ids.iter().map(|&id| head.get(id)).collect::<Vec<_>>());
        let mut opt_maps = OptimizerState::new(adam, &self.rho_ids.iter().map(|&id| self.backbone.store().get(id)).collect::<Vec<_>>());

        let mut best = (0usize, self.eval_loss(&head, &maps, &val, &mut rng)?, head.clone(), maps.clone());
        let mut since = 0usize;
        let batch = cfg.batch_size_for(n);
        let mut order = train.clone();
        for epoch in 1..=cfg.max_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut tape = Tape::new();
                let (out, hb, bb) = self.outputs(&mut tape, &head, &maps, chunk, true, &mut rng)?;
                let loss = self.loss(&mut tape, out, chunk)?;
                let mut grads = tape.backward(loss)?;
                let head_grads: Vec<Option<Vec<T>>> = head_ids.iter().map(|&id| grads.take(hb.var(id))).collect();
                let map_grads: Option<Vec<Option<Vec<T>>>> =
                    bb.map(|bb| self.rho_ids.iter().map(|&id| grads.take(bb.var(id))).collect());
                drop(tape);
                let refs: Vec<Option<&[T]>> = head_grads.iter().map(|g| g.as_deref()).collect();
                opt_head.step(&mut head.get_many_mut(&head_ids), &refs, lr)?;
                if let (Some(g), true) = (map_grads, cfg.train_input_maps) {
                    let refs: Vec<Option<&[T]>> = g.iter().map(|g| g.as_deref()).collect();
                    let mut tensors: Vec<&mut Tensor<T>> = Vec::with_capacity(self.rho_ids.len());
                    let mut slots: Vec<(ParamId, &mut Arc<Tensor<T>>)> = maps.iter_mut().map(|(k, v)| (*k, v)).collect();
                    slots.sort_by_key(|(k, _)| self.rho_ids.iter().position(|id| id == k));
                    for (_, arc) in slots {
                        tensors.push(Arc::make_mut(arc));
                    }
                    opt_maps.step(&mut tensors, &refs, lr)?;
                }
            }
            let v = self.eval_loss(&head, &maps, &val, &mut rng)?;
            if v < best.1 {
                best = (epoch, v, head.clone(), maps.clone());
                since = 0;
            } else {
                since += 1;
                if cfg.patience.is_some_and(|p| since >= p) {
                    break;
                }
            }
        }
        let (best_epoch, best_val_loss, head, input_maps) = best;
        Ok(Member {
            head,
            input_maps,
            train,
            val,
            best_epoch,
            best_val_loss,
        })
    }
}

/// Fine-tunes a head on `rows` with targets `y` (0/1 for classification).
pub fn fine_tune<T: Scalar>(
    backbone: &EncoderModel<T>,
    rows: &[CellPairSequence],
    y: &[f64],
    task: TaskKind,
    config: &FineTuneConfig,
) -> Result<FineTunedModel<T>> {
    config.validate()?;
    if rows.len() != y.len() {
        return Err(Error::shape("fine_tune", format!("{} rows, {} targets", rows.len(), y.len())));
    }
    let usable: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].is_empty()).collect();
    if usable.len() < MIN_ROWS {
        return Err(Error::TooFewRows {
            n: usable.len(),
            min: MIN_ROWS,
        });
    }
    let ys: Vec<f64> = usable.iter().map(|&i| y[i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (target_mean, target_std) = match task {
        TaskKind::Regression => {
            let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        }
        TaskKind::BinaryClassification => {
            if ys.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument("classification targets must be 0 or 1".into()));
            }
            (0.0, 1.0)
        }
    };
    let targets: Vec<T> = y.iter().map(|&v| T::of((v - target_mean) / target_std)).collect();
    let d = backbone.config().d_model;
    let cached = if !config.train_input_maps && config.dropout == 0.0 {
        let emb = embed_with(backbone, rows, d, &HashMap::new(), 64)?;
        Some(
            emb.into_iter()
                .map(|e| e.unwrap_or_default().into_iter().map(T::of).collect())
                .collect(),
        )
    } else {
        None
    };
    let trainer = Trainer {
        backbone,
        rows,
        targets,
        task,
        config,
        head: Head::init::<T>(d, 0).0,
        rho_ids: backbone.rho_ids(),
        cached,
    };

    let mut grid = Vec::with_capacity(config.learning_rates.len());
    let mut best: Option<(f64, f64, Vec<Member<T>>)> = None;
    for &lr in &config.learning_rates {
        let members = (0..config.bags)
            .map(|b| trainer.train_member(b, &usable, lr))
            .collect::<Result<Vec<_>>>()?;
        let score = members.iter().map(|m| m.best_val_loss).sum::<f64>() / members.len() as f64;
        grid.push((lr, score));
        if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
            best = Some((lr, score, members));
        }
    }
    let (learning_rate, _, members) = best.expect("non-empty grid");
    Ok(FineTunedModel {
        backbone: backbone.clone(),
        checkpoint: checkpoint_id(backbone),
        head: trainer.head,
        task,
        learning_rate,
        grid,
        members,
        target_mean,
        target_std,
        fallback: mean,
    })
}

impl<T: Scalar> FineTunedModel<T> {
    pub fn backbone(&self) -> &EncoderModel<T> {
        &self.backbone
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    /// Predictions of every member: values for regression, probabilities
    /// for classification.
    pub fn member_predictions(&self, rows: &[CellPairSequence]) -> Result<Vec<Vec<f64>>> {
        let d = self.backbone.config().d_model;
        self.members
            .iter()
            .map(|m| {
                let emb = embed_with(&self.backbone, rows, d, &m.input_maps, 64)?;
                let present: Vec<usize> = (0..rows.len()).filter(|&i| emb[i].is_some()).collect();
                let mut out = vec![self.fallback; rows.len()];
                if present.is_empty() {
                    return Ok(out);
                }
                let data: Vec<T> = present
                    .iter()
                    .flat_map(|&i| emb[i].as_ref().expect("present").iter().map(|&v| T::of(v)))
                    .collect();
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(&[present.len(), d], data)?);
                let hb = Bound::all(&m.head, &mut tape, false);
                let o = self.head.forward(&mut tape, &hb, x)?;
                for (k, &i) in present.iter().enumerate() {
                    let z = tape.value(o).data()[k].to_f64_lossy();
                    out[i] = match self.task {
                        TaskKind::Regression => z * self.target_std + self.target_mean,
                        TaskKind::BinaryClassification => 1.0 / (1.0 + (-z).exp()),
                    };
                }
                Ok(out)
            })
            .collect()
    }

    /// Mean over the bag.
    pub fn predict(&self, rows: &[CellPairSequence]) -> Result<Vec<f64>> {
        let per = self.member_predictions(rows)?;
        let b = per.len() as f64;
        Ok((0..rows.len()).map(|i| per.iter().map(|p| p[i]).sum::<f64>() / b).collect())
    }

    /// Readout features under the members' input maps, averaged over the
    /// bag; equal to the backbone's when the maps were not trained.
    pub fn features(&self, rows: &[CellPairSequence], table: &str) -> Result<FeatureMatrix> {
        let d = self.backbone.config().d_model;
        let id = format!("{}+ft", self.checkpoint);
        if self.members.iter().all(|m| m.input_maps.is_empty()) {
            let emb = embed_with(&self.backbone, rows, d, &HashMap::new(), 64)?;
            return Ok(assemble_features(emb, d, &self.checkpoint, table));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; rows.len()];
        for m in &self.members {
            let emb = embed_with(&self.backbone, rows, d, &m.input_maps, 64)?;
            for (a, e) in acc.iter_mut().zip(emb) {
                if let Some(e) = e {
                    match a {
                        Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
                        None => *a = Some(e),
                    }
                }
            }
        }
        let b = self.members.len() as f64;
        for v in acc.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x /= b);
        }
        Ok(assemble_features(acc, d, &id, table))
    }

    /// Readout/transformer digest of the backbone this model was trained on.
    pub fn transformer_digest(&self) -> String {
        self.backbone.transformer_digest()
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MemberFile {
    head: Vec<NamedTensor>,
    input_maps: Vec<NamedTensor>,
    train: Vec<usize>,
    val: Vec<usize>,
    best_epoch: usize,
    best_val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct FineTunedFile {
    checkpoint: String,
    d_model: usize,
    d_lm: usize,
    task: TaskKind,
    learning_rate: f64,
    grid: Vec<(f64, f64)>,
    target_mean: f64,
    target_std: f64,
    fallback: f64,
    members: Vec<MemberFile>,
}

fn named<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|x| x.to_f64_lossy()).collect(),
    }
}

fn tensor<T: Scalar>(n: &NamedTensor) -> Result<Tensor<T>> {
    Tensor::new(&n.shape, n.data.iter().map(|&v| T::of(v)).collect())
}

impl<T: Scalar> FineTunedModel<T> {
    /// Writes heads and trained maps as JSON; the backbone is referenced by
    /// checkpoint id only.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let store = self.backbone.store();
        let file = FineTunedFile {
            checkpoint: self.checkpoint.clone(),
            d_model: self.backbone.config().d_model,
            d_lm: self.backbone.config().d_lm,
            task: self.task,
            learning_rate: self.learning_rate,
            grid: self.grid.clone(),
            target_mean: self.target_mean,
            target_std: self.target_std,
            fallback: self.fallback,
            members: self
                .members
                .iter()
                .map(|m| {
                    let mut maps: Vec<(&ParamId, &Arc<Tensor<T>>)> = m.input_maps.iter().collect();
                    maps.sort_by_key(|(id, _)| **id);
                    MemberFile {
                        head: m.head.iter().map(|(_, name, t)| named(name, t)).collect(),
                        input_maps: maps.into_iter().map(|(id, t)| named(store.name(*id), t)).collect(),
                        train: m.train.clone(),
                        val: m.val.clone(),
                        best_epoch: m.best_epoch,
                        best_val_loss: m.best_val_loss,
                    }
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    /// Reads a model saved by [`FineTunedModel::save`] on top of `backbone`,
    /// which must be the checkpoint it was trained from.
    pub fn load(path: impl AsRef<Path>, backbone: &EncoderModel<T>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: FineTunedFile = serde_json::from_slice(&bytes)?;
        let c = backbone.config();
        if f.d_model != c.d_model || f.d_lm != c.d_lm {
            return Err(Error::InvalidArgument(format!(
                "{}: trained with d_model {} / d_lm {}, backbone has {} / {}",
                path.display(),
                f.d_model,
                f.d_lm,
                c.d_model,
                c.d_lm
            )));
        }
        let id = checkpoint_id(backbone);
        if f.checkpoint != id {
            return Err(Error::InvalidArgument(format!(
                "{} was fine-tuned from checkpoint {}, got {id}",
                path.display(),
                f.checkpoint
            )));
        }
        let (head, template) = Head::init::<T>(c.d_model, 0);
        let members = f
            .members
            .iter()
            .map(|m| {
                let mut store = template.clone();
                for nt in &m.head {
                    let pid = store
                        .id(&nt.name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown head parameter {}", nt.name)))?;
                    store.set(pid, tensor(nt)?)?;
                }
                let mut maps = HashMap::new();
                for nt in &m.input_maps {
                    let pid = backbone
                        .store()
                        .id(&nt.name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown backbone parameter {}", nt.name)))?;
                    maps.insert(pid, Arc::new(tensor(nt)?));
                }
                Ok(Member {
                    head: store,
                    input_maps: maps,
                    train: m.train.clone(),
                    val: m.val.clone(),
                    best_epoch: m.best_epoch,
                    best_val_loss: m.best_val_loss,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone: backbone.clone(),
            checkpoint: id,
            head,
            task: f.task,
            learning_rate: f.learning_rate,
            grid: f.grid,
            members,
            target_mean: f.target_mean,
            target_std: f.target_std,
            fallback: f.fallback,
        })
    }
}
