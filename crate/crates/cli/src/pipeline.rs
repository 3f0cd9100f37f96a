//! Downstream fitting and prediction shared by `fit`, `predict` and
//! `evaluate`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use tartekit::downstream::{
    featurize, fine_tune, fit_ridge_loocv, BoostStage, BoostedModel, FeatureMatrix, FineTunedModel, ResidualSpace,
    TableEncoding,
};
use tartekit::embed::StringEmbedder;
use tartekit::encoder::{checkpoint_id, load_checkpoint, CellPairSequence};
use tartekit::ingest::{infer_schema, Table, TableSchema, TaskKind};
use tartekit::Encoder64;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Ridge with leave-one-out alpha selection on frozen features.
    Ridge,
    /// Bagged task heads on the frozen transformer.
    Finetune,
    /// Ridge on the residuals of external base predictions.
    Boost,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Reg,
    Clf,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Reg => TaskKind::Regression,
            TaskArg::Clf => TaskKind::BinaryClassification,
        }
    }
}

pub struct Backbone {
    pub path: PathBuf,
    pub model: Encoder64,
    pub id: String,
    pub embedder: StringEmbedder,
}

impl Backbone {
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let (model, _) = load_checkpoint::<f64>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let embedder = cfg.embedder(model.config().d_lm)?;
        Ok(Self {
            path: fs::canonicalize(path)?,
            id: checkpoint_id(&model),
            model,
            embedder,
        })
    }

    pub fn dim(&self, requested: Option<usize>) -> usize {
        requested.unwrap_or(self.model.config().d_model)
    }
}

pub struct Data {
    pub name: String,
    pub table: Table,
    pub schema: TableSchema,
}

impl Data {
    pub fn load(path: &Path, target: Option<&str>, task: Option<TaskKind>) -> Result<Self> {
        let table = Table::read_csv(path).with_context(|| format!("reading {}", path.display()))?;
        let schema = infer_schema(&table, target, task)?;
        let name = path.file_stem().map_or_else(|| "table".into(), |s| s.to_string_lossy().into_owned());
        Ok(Self { name, table, schema })
    }

    pub fn task(&self) -> Result<TaskKind> {
        self.schema.task.context("no target column selected")
    }

    pub fn targets(&self) -> Result<Vec<f64>> {
        Ok(self.schema.target_values(&self.table)?)
    }
}

/// A fine-tuned model from an earlier `fit --method finetune`, used as a
/// boosting source.
pub struct Source {
    pub path: PathBuf,
    pub backbone: Backbone,
    pub model: FineTunedModel<f64>,
}

impl Source {
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let spec = FittedModel::read(path)?;
        ensure!(spec.method == Method::Finetune, "{} is a {:?} model, sources must be fine-tuned", path.display(), spec.method);
        let backbone = Backbone::load(&spec.checkpoint, cfg)?;
        let file = spec.finetuned.as_ref().context("fine-tuned model file missing from spec")?;
        let model = FineTunedModel::load(file, &backbone.model)?;
        Ok(Self {
            path: fs::canonicalize(model_file(path))?,
            backbone,
            model,
        })
    }
}

/// Encoding of the target table for one boosting source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceStage {
    pub model: PathBuf,
    pub encoding: TableEncoding,
}

/// What `fit` saves as `model.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub method: Method,
    pub task: TaskKind,
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub dim: usize,
    pub encoding: TableEncoding,
    pub ridge: Option<BoostStage>,
    pub finetuned: Option<PathBuf>,
    pub boost: Option<BoostedModel>,
    pub sources: Vec<SourceStage>,
}

/// `path` itself, or `path/model.json` for a run directory.
pub fn model_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.json")
    } else {
        path.to_path_buf()
    }
}

impl FittedModel {
    pub fn read(path: &Path) -> Result<Self> {
        let file = model_file(path);
        let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", file.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub struct Fitted {
    pub spec: FittedModel,
    pub finetuned: Option<FineTunedModel<f64>>,
    pub sources: Vec<Source>,
}

pub struct FitRequest<'a> {
    pub data: &'a Data,
    pub train: &'a [usize],
    /// Targets of the `train` rows.
    pub y: &'a [f64],
    pub method: Method,
    pub dim: usize,
    /// Base predictions of the `train` rows, for boosting.
    pub base: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Phases {
    pub prepare: f64,
    pub fit: f64,
}

fn clip(task: TaskKind, mut p: Vec<f64>) -> Vec<f64> {
    if task == TaskKind::BinaryClassification {
        p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    p
}

fn source_features(s: &Source, enc: &TableEncoding, table: &Table, rows: &[usize], name: &str) -> Result<FeatureMatrix> {
    let seqs = enc.rows(table, rows, &s.backbone.embedder)?;
    Ok(s.model.features(&seqs, name)?)
}

pub fn fit(bb: &Backbone, cfg: &RunConfig, req: &FitRequest, sources: Vec<Source>) -> Result<(Fitted, Vec<f64>, Phases)> {
    let task = req.data.task()?;
    let (table, name) = (&req.data.table, req.data.name.as_str());
    ensure!(req.y.len() == req.train.len(), "{} targets for {} rows", req.y.len(), req.train.len());
    ensure!(sources.is_empty() || req.method == Method::Boost, "--sources only applies to --method boost");
    let t0 = Instant::now();
    let encoding = TableEncoding::fit(table, &req.data.schema, req.train, &bb.embedder)?;
    let rows: Vec<CellPairSequence> = encoding.rows(table, req.train, &bb.embedder)?;
    let mut spec = FittedModel {
        method: req.method,
        task,
        checkpoint: bb.path.clone(),
        checkpoint_id: bb.id.clone(),
        dim: req.dim,
        encoding,
        ridge: None,
        finetuned: None,
        boost: None,
        sources: Vec::new(),
    };
    let mut phases = Phases::default();
    let (finetuned, preds) = match req.method {
        Method::Ridge => {
            let f = featurize(&bb.model, &rows, req.dim, &bb.id, name)?;
            phases.prepare = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let flag = f.any_missing();
            let x = f.design(flag);
            let ridge = fit_ridge_loocv(&x, req.y, &cfg.alphas)?;
            let preds = clip(task, ridge.predict(&x)?);
            spec.ridge = Some(BoostStage { ridge, missing_flag: flag });
            phases.fit = t1.elapsed().as_secs_f64();
            (None, preds)
        }
        Method::Finetune => {
            phases.prepare = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let ft = fine_tune(&bb.model, &rows, req.y, task, &cfg.finetune)?;
            let preds = ft.predict(&rows)?;
            phases.fit = t1.elapsed().as_secs_f64();
            (Some(ft), preds)
        }
        Method::Boost => {
            let base = req.base.context("--method boost needs --base-preds")?;
            let features = if sources.is_empty() {
                vec![featurize(&bb.model, &rows, req.dim, &bb.id, name)?]
            } else {
                let mut out = Vec::with_capacity(sources.len());
                for s in &sources {
                    let enc = TableEncoding::fit(table, &req.data.schema, req.train, &s.backbone.embedder)?;
                    out.push(source_features(s, &enc, table, req.train, name)?);
                    spec.sources.push(SourceStage {
                        model: s.path.clone(),
                        encoding: enc,
                    });
                }
                out
            };
            phases.prepare = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let refs: Vec<&FeatureMatrix> = features.iter().collect();
            let (model, preds) = BoostedModel::fit(base, &refs, req.y, task, ResidualSpace::Probability, &cfg.alphas)?;
            spec.boost = Some(model);
            phases.fit = t1.elapsed().as_secs_f64();
            (None, preds)
        }
    };
    Ok((
        Fitted {
            spec,
            finetuned,
            sources,
        },
        preds,
        phases,
    ))
}

/// Loads a saved model together with its fine-tuned heads and sources.
pub fn load_fitted(path: &Path, cfg: &RunConfig) -> Result<(Backbone, Fitted)> {
    let spec = FittedModel::read(path)?;
    let bb = Backbone::load(&spec.checkpoint, cfg)?;
    ensure!(
        bb.id == spec.checkpoint_id,
        "checkpoint {} changed since fitting (id {} ≠ {})",
        spec.checkpoint.display(),
        bb.id,
        spec.checkpoint_id
    );
    let finetuned = match &spec.finetuned {
        Some(p) => Some(FineTunedModel::load(p, &bb.model)?),
        None => None,
    };
    let sources = spec.sources.iter().map(|s| Source::load(&s.model, cfg)).collect::<Result<Vec<_>>>()?;
    Ok((
        bb,
        Fitted {
            spec,
            finetuned,
            sources,
        },
    ))
}

pub fn predict(bb: &Backbone, fitted: &Fitted, table: &Table, name: &str, rows: &[usize], base: Option<&[f64]>) -> Result<Vec<f64>> {
    let spec = &fitted.spec;
    let seqs = spec.encoding.rows(table, rows, &bb.embedder)?;
    match spec.method {
        Method::Ridge => {
            let stage = spec.ridge.as_ref().context("ridge model missing")?;
            let f = featurize(&bb.model, &seqs, spec.dim, &bb.id, name)?;
            Ok(clip(spec.task, stage.ridge.predict(&f.design(stage.missing_flag))?))
        }
        Method::Finetune => Ok(fitted.finetuned.as_ref().context("fine-tuned heads missing")?.predict(&seqs)?),
        Method::Boost => {
            let base = base.context("a boosted model needs --base-preds")?;
            let model = spec.boost.as_ref().context("boosting stages missing")?;
            let features = if fitted.sources.is_empty() {
                vec![featurize(&bb.model, &seqs, spec.dim, &bb.id, name)?]
            } else {
                fitted
                    .sources
                    .iter()
                    .zip(&spec.sources)
                    .map(|(s, st)| source_features(s, &st.encoding, table, rows, name))
                    .collect::<Result<Vec<_>>>()?
            };
            let refs: Vec<&FeatureMatrix> = features.iter().collect();
            Ok(model.predict(base, &refs)?)
        }
    }
}

/// Base predictions for `rows` from a `row_id,prediction` file.
pub fn base_predictions(path: Option<&Path>, rows: &[usize]) -> Result<Option<Vec<f64>>> {
    let Some(p) = path else { return Ok(None) };
    let preds = tartekit::downstream::read_predictions(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(Some(tartekit::downstream::align_predictions(&preds, rows)?))
}

pub fn task_metric(task: TaskKind, y: &[f64], p: &[f64]) -> Result<f64> {
    Ok(match task {
        TaskKind::Regression => tartekit::eval::metric_r2(y, p)?,
        TaskKind::BinaryClassification => tartekit::eval::metric_auroc(y, p)?,
    })
}

pub fn require_method_inputs(method: Method, base: Option<&Path>) -> Result<()> {
    if method == Method::Boost && base.is_none() {
        bail!("--method boost needs --base-preds");
    }
    Ok(())
}
