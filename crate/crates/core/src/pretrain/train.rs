//! The contrastive pre-training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::StringEmbedder;
use crate::encoder::{save_checkpoint, DropoutCtx, EncoderModel, ParamId};
use crate::error::{Error, Result};
use crate::kb::{BatchConfig, BatchSampler, KnowledgeStore, PretrainBatch};
use crate::numerics::{AdamWConfig, Decay, LrSchedule, OptimizerState, Tape, Tensor};
use crate::pretrain::loss::{matryoshka_loss_on_tape, partners_from_map};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch: BatchConfig,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub decay: Decay,
    pub dropout: f64,
    /// Projection widths that enter the loss; each must have a head.
    pub matryoshka_dims: Vec<usize>,
    pub temperature: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchConfig::default(),
            total_steps: 200_000,
            warmup_steps: 2_000,
            lr_min: 1e-8,
            lr_max: 1e-6,
            decay: Decay::Linear,
            dropout: 0.1,
            matryoshka_dims: vec![64, 128, 256, 512, 768],
            temperature: 1.0,
            seed: 0,
            checkpoint_interval: 10_000,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate<T: Scalar>(&self, model: &EncoderModel<T>) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.matryoshka_dims.is_empty() {
            return Err(Error::InvalidArgument("at least one Matryoshka width is required".into()));
        }
        if let Some(d) = self.matryoshka_dims.iter().find(|d| !model.matryoshka_dims().contains(d)) {
            return Err(Error::InvalidArgument(format!(
                "width {d} has no head; model widths are {:?}",
                model.matryoshka_dims()
            )));
        }
        if self.total_steps > 0 {
            self.schedule()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        Ok(LrSchedule::new(self.lr_min, self.lr_max, self.warmup_steps, self.total_steps)?.with_decay(self.decay))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct PretrainOutput {
    /// Appended `step,lr,loss` rows.
    pub trace_csv: Option<PathBuf>,
    /// Checkpoints land here as `step-XXXXXXXX.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport<T> {
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<PathBuf>,
    pub optimizer: OptimizerState<T>,
}

struct TraceWriter(Option<BufWriter<File>>);

impl TraceWriter {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "step,lr,loss").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self(Some(w)))
    }

    fn push(&mut self, row: &TraceRow) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{},{:e},{}", row.step, row.lr, row.loss).map_err(|e| Error::io("loss trace", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("loss trace", e))?;
        }
        Ok(())
    }
}

fn checkpoint<T: Scalar>(
    dir: Option<&Path>,
    step: usize,
    model: &EncoderModel<T>,
    opt: &OptimizerState<T>,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("step-{step:08}.ckpt"));
    save_checkpoint(&path, model, Some(opt))?;
    written.push(path);
    Ok(())
}

/// Contrastive loss of one batch on a fresh tape; returns the tape, loss and
/// parameter handles so callers can differentiate.
pub fn batch_loss<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &PretrainBatch,
    dims: &[usize],
    temperature: f64,
    dropout: Option<DropoutCtx<'_>>,
) -> Result<(Tape<T>, crate::numerics::Var, crate::encoder::Bound)> {
    let partners = partners_from_map(&batch.positive_map, batch.rows.len())?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let (z, segments) = model.assemble(&mut tape, &b, &batch.rows)?;
    let readout = model.encode(&mut tape, &b, z, &segments, dropout)?;
    let projections = dims
        .iter()
        .map(|&d| model.project_one(&mut tape, &b, readout, d))
        .collect::<Result<Vec<_>>>()?;
    let loss = matryoshka_loss_on_tape(&mut tape, &projections, &partners, temperature)?;
    Ok((tape, loss, b))
}

fn norm<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Runs `config.total_steps` AdamW steps of contrastive training on batches
/// drawn from `store`, updating `model` in place.
pub fn pretrain<T: Scalar>(
    store: &KnowledgeStore,
    embedder: &StringEmbedder,
    model: &mut EncoderModel<T>,
    config: &PretrainConfig,
    output: &PretrainOutput,
) -> Result<PretrainReport<T>> {
    config.validate(model)?;
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut opt = {
        let params: Vec<&Tensor<T>> = ids.iter().map(|&id| model.store().get(id)).collect();
        OptimizerState::new(config.optimizer, &params)
    };
    let ckpt_dir = output.checkpoint_dir.as_deref();
    let mut checkpoints = Vec::new();
    let mut trace = Vec::with_capacity(config.total_steps);
    if config.total_steps == 0 {
        checkpoint(ckpt_dir, 0, model, &opt, &mut checkpoints)?;
        return Ok(PretrainReport {
            trace,
            checkpoints,
            optimizer: opt,
        });
    }

    let schedule = config.schedule()?;
    let sampler = BatchSampler::new(store, embedder, config.batch)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d40f);
    let mut writer = TraceWriter::open(output.trace_csv.as_deref())?;

    for step in 0..config.total_steps {
        let lr = schedule.lr_at(step)?;
        let batch = sampler.sample(&mut batch_rng)?;
        let dropout = DropoutCtx {
            rate: config.dropout,
            rng: &mut dropout_rng,
        };
        let (tape, loss, bound) = batch_loss(model, &batch, &config.matryoshka_dims, config.temperature, Some(dropout))?;
        let loss_value = tape.value(loss).data()[0].to_f64_lossy();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Vec<T>>> = ids.iter().map(|&id| grads.take(bound.var(id))).collect();
        drop(tape);

        let nonfinite = grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite()));
        if !loss_value.is_finite() || nonfinite {
            let mut norms: Vec<(f64, &str)> = ids
                .iter()
                .zip(&grads)
                .map(|(&id, g)| (g.as_deref().map_or(0.0, norm), model.store().name(id)))
                .collect();
            norms.sort_by(|a, b| b.0.total_cmp(&a.0));
            let detail = format!(
                "loss {loss_value}; largest gradient norms: {}",
                norms
                    .iter()
                    .take(5)
                    .map(|(n, name)| format!("{name}={n:e}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            writer.flush()?;
            return Err(Error::Diverged { step, lr, detail });
        }

        let grad_refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut params = model.store_mut().get_many_mut(&ids);
        opt.step(&mut params, &grad_refs, lr)?;

        let row = TraceRow {
            step,
            lr,
            loss: loss_value,
        };
        writer.push(&row)?;
        trace.push(row);
        if step % 50 == 0 {
            info!("step {step} lr {lr:e} loss {loss_value:.6}");
        }
        let done = step + 1;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done != config.total_steps {
            checkpoint(ckpt_dir, done, model, &opt, &mut checkpoints)?;
        }
    }
    writer.flush()?;
    checkpoint(ckpt_dir, config.total_steps, model, &opt, &mut checkpoints)?;
    Ok(PretrainReport {
        trace,
        checkpoints,
        optimizer: opt,
    })
}

/// Reads a `step,lr,loss` trace.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
