use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use log::info;
use serde::Serialize;

use tartekit::downstream::{featurize, write_features, write_predictions, TableEncoding};
use tartekit::encoder::{save_checkpoint, EncoderModel};
use tartekit::eval::{average_ranks, normalize_scores, pareto_frontier, EvalRecord};
use tartekit::ingest::{make_splits, SplitSpec, TaskKind, TRAIN_SIZES};
use tartekit::kb::KnowledgeStore;
use tartekit::pretrain::{pretrain, PretrainOutput};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::pipeline::{self, Backbone, Data, FitRequest, Source};
use crate::{Command, Common, MethodArgs, TargetArgs};

fn setup(common: &Common, out: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(cfg)
}

fn inputs(m: &mut Manifest, common: &Common, files: &[(&str, &Path)]) -> Result<()> {
    if let Some(c) = &common.config {
        m.input("config", c)?;
    }
    for (name, p) in files {
        m.input(name, p)?;
    }
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::KbStats { kb, common, out } => kb_stats(&kb, &common, out.as_deref()),
        Command::Pretrain { kb, common, out } => run_pretrain(&kb, &common, &out),
        Command::Featurize {
            model,
            data,
            target,
            dim,
            common,
            out,
        } => run_featurize(&model, &data, target.as_deref(), dim, &common, &out),
        Command::Fit {
            model,
            data,
            target,
            method,
            common,
            out,
        } => run_fit(&model, &data, &target, &method, &common, &out),
        Command::Predict {
            model,
            data,
            base_preds,
            common,
            out,
        } => run_predict(&model, &data, base_preds.as_deref(), &common, &out),
        Command::Evaluate {
            model,
            data,
            target,
            method,
            dataset,
            name,
            sizes,
            splits,
            common,
            out,
        } => run_evaluate(
            &EvalArgs {
                model,
                data,
                dataset,
                name,
                sizes,
                splits,
            },
            &target,
            &method,
            &common,
            &out,
        ),
        Command::Report { records, common, out } => run_report(&records, &common, &out),
    }
}

fn kb_stats(kb: &Path, common: &Common, out: Option<&Path>) -> Result<()> {
    let store = KnowledgeStore::load(kb)?;
    let s = store.stats();
    println!("entities\t{}\nrelations\t{}\nfacts\t{}", s.entities, s.relations, s.facts);
    if let Some(out) = out {
        let cfg = setup(common, out)?;
        fs::write(out.join("stats.json"), serde_json::to_vec_pretty(&s)?)?;
        let mut m = Manifest::new("kb-stats", &cfg);
        inputs(&mut m, common, &[("kb", kb)])?;
        m.write(out)?;
    }
    Ok(())
}

fn run_pretrain(kb: &Path, common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    let store = KnowledgeStore::load(kb)?;
    let embedder = cfg.embedder(cfg.encoder.d_lm)?;
    let mut model = EncoderModel::<f64>::new(cfg.encoder.clone(), cfg.seed)?;
    let trace = out.join("trace.csv");
    if trace.exists() {
        fs::remove_file(&trace)?;
    }
    let report = pretrain(
        &store,
        &embedder,
        &mut model,
        &cfg.pretrain,
        &PretrainOutput {
            trace_csv: Some(trace),
            checkpoint_dir: Some(out.join("checkpoints")),
        },
    )?;
    let path = out.join("model.ckpt");
    save_checkpoint(&path, &model, Some(&report.optimizer))?;
    let id = tartekit::encoder::checkpoint_id(&model);
    if let Some(last) = report.trace.last() {
        info!("step {} loss {:.5}", last.step, last.loss);
    }
    println!("{}", path.display());
    let mut m = Manifest::new("pretrain", &cfg);
    inputs(&mut m, common, &[("kb", kb)])?;
    m.set("steps", cfg.pretrain.total_steps).set("checkpoint", path.display()).set("checkpoint_id", id);
    m.write(out)
}

fn run_featurize(model: &Path, data: &Path, target: Option<&str>, dim: Option<usize>, common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    let bb = Backbone::load(model, &cfg)?;
    let d = Data::load(data, target, None)?;
    let all: Vec<usize> = (0..d.table.len()).collect();
    let enc = TableEncoding::fit(&d.table, &d.schema, &all, &bb.embedder)?;
    let rows = enc.rows(&d.table, &all, &bb.embedder)?;
    let f = featurize(&bb.model, &rows, bb.dim(dim), &bb.id, &d.name)?;
    let path = out.join("features.bin");
    write_features(&path, &f)?;
    println!("{} rows x {} features -> {}", f.n, f.q, path.display());
    let mut m = Manifest::new("featurize", &cfg);
    inputs(&mut m, common, &[("checkpoint", model), ("data", data)])?;
    m.set("checkpoint_id", &bb.id).set("dim", f.q).set("rows", f.n);
    m.write(out)
}

fn load_sources(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Source>> {
    paths.iter().map(|p| Source::load(p, cfg)).collect()
}

fn run_fit(model: &Path, data: &Path, target: &TargetArgs, method: &MethodArgs, common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    pipeline::require_method_inputs(method.method, method.base_preds.as_deref())?;
    let bb = Backbone::load(model, &cfg)?;
    let d = Data::load(data, Some(&target.target), target.task.map(Into::into))?;
    let y = d.targets()?;
    let all: Vec<usize> = (0..d.table.len()).collect();
    let base = pipeline::base_predictions(method.base_preds.as_deref(), &all)?;
    let sources = load_sources(&method.sources, &cfg)?;
    let req = FitRequest {
        data: &d,
        train: &all,
        y: &y,
        method: method.method,
        dim: bb.dim(method.dim),
        base: base.as_deref(),
    };
    let (mut fitted, preds, _) = pipeline::fit(&bb, &cfg, &req, sources)?;
    if let Some(ft) = &fitted.finetuned {
        let path = fs::canonicalize(out)?.join("finetuned.json");
        ft.save(&path)?;
        fitted.spec.finetuned = Some(path);
    }
    fitted.spec.write(&out.join("model.json"))?;
    write_predictions(out.join("predictions.csv"), &all, &preds)?;
    let fit_metric = pipeline::task_metric(fitted.spec.task, &y, &preds).ok();
    if let Some(v) = fit_metric {
        println!("held-in {} {v:.6}", fitted.spec.task.metric());
    }
    let mut m = Manifest::new("fit", &cfg);
    inputs(&mut m, common, &[("checkpoint", model), ("data", data)])?;
    if let Some(b) = &method.base_preds {
        m.input("base_preds", b)?;
    }
    m.set("checkpoint_id", &bb.id).set("method", format!("{:?}", method.method).to_lowercase());
    m.write(out)
}

fn run_predict(model: &Path, data: &Path, base_preds: Option<&Path>, common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    let (bb, fitted) = pipeline::load_fitted(model, &cfg)?;
    let d = Data::load(data, None, None)?;
    let all: Vec<usize> = (0..d.table.len()).collect();
    let base = pipeline::base_predictions(base_preds, &all)?;
    let preds = pipeline::predict(&bb, &fitted, &d.table, &d.name, &all, base.as_deref())?;
    write_predictions(out.join("predictions.csv"), &all, &preds)?;
    let mut m = Manifest::new("predict", &cfg);
    inputs(&mut m, common, &[("model", &pipeline::model_file(model)), ("data", data)])?;
    m.set("checkpoint_id", &bb.id);
    m.write(out)
}

struct EvalArgs {
    model: PathBuf,
    data: PathBuf,
    dataset: Option<String>,
    name: Option<String>,
    sizes: Vec<usize>,
    splits: usize,
}

#[derive(Serialize)]
struct PhaseRow<'a> {
    dataset: &'a str,
    method: &'a str,
    train_size: usize,
    split: usize,
    prepare: f64,
    fit: f64,
    predict: f64,
}

fn run_evaluate(a: &EvalArgs, target: &TargetArgs, method: &MethodArgs, common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    pipeline::require_method_inputs(method.method, method.base_preds.as_deref())?;
    let bb = Backbone::load(&a.model, &cfg)?;
    let d = Data::load(&a.data, Some(&target.target), target.task.map(Into::into))?;
    let task = d.task()?;
    let y = d.targets()?;
    let n = d.table.len();
    let all: Vec<usize> = (0..n).collect();
    let base_all = pipeline::base_predictions(method.base_preds.as_deref(), &all)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| d.name.clone());
    let label = a.name.clone().unwrap_or_else(|| format!("tartekit-{:?}", method.method).to_lowercase());
    let sizes = if a.sizes.is_empty() { TRAIN_SIZES.to_vec() } else { a.sizes.clone() };
    let usable: Vec<usize> = sizes.iter().copied().filter(|&s| s < n).collect();
    ensure!(!usable.is_empty(), "{n} rows: no train size in {sizes:?} leaves a test set");

    let mut records = csv::Writer::from_path(out.join("records.csv"))?;
    let mut phases = csv::Writer::from_path(out.join("timings.csv"))?;
    for &size in &usable {
        for split in 0..a.splits {
            let spec = SplitSpec {
                train_size: size,
                seed: cfg.seed,
                split_index: split,
            };
            let labels = (task == TaskKind::BinaryClassification).then_some(y.as_slice());
            let (train, test) = make_splits(n, labels, &spec)?;
            let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let y_train = pick(&train, &y);
            let base_train = base_all.as_ref().map(|b| pick(&train, b));
            let sources = load_sources(&method.sources, &cfg)?;
            let req = FitRequest {
                data: &d,
                train: &train,
                y: &y_train,
                method: method.method,
                dim: bb.dim(method.dim),
                base: base_train.as_deref(),
            };
            let (fitted, _, ph) = pipeline::fit(&bb, &cfg, &req, sources)?;
            let t = Instant::now();
            let base_test = base_all.as_ref().map(|b| pick(&test, b));
            let preds = pipeline::predict(&bb, &fitted, &d.table, &d.name, &test, base_test.as_deref())?;
            let predict = t.elapsed().as_secs_f64();
            let value = pipeline::task_metric(task, &pick(&test, &y), &preds)?;
            let rec = EvalRecord {
                dataset: dataset.clone(),
                method: label.clone(),
                train_size: size,
                split,
                metric: task.metric().into(),
                value,
                seconds: ph.prepare + ph.fit + predict,
            };
            rec.validate()?;
            println!("{dataset} {label} n={size} split={split} {}={value:.4}", rec.metric);
            records.serialize(&rec)?;
            phases.serialize(PhaseRow {
                dataset: &dataset,
                method: &label,
                train_size: size,
                split,
                prepare: ph.prepare,
                fit: ph.fit,
                predict,
            })?;
        }
    }
    records.flush()?;
    phases.flush()?;
    let mut m = Manifest::new("evaluate", &cfg);
    inputs(&mut m, common, &[("checkpoint", &a.model), ("data", &a.data)])?;
    m.set("checkpoint_id", &bb.id);
    m.write(out)
}

#[derive(Serialize)]
struct RankRow {
    method: String,
    mean_rank: f64,
}

#[derive(Serialize)]
struct ParetoRow {
    method: String,
    runtime: f64,
    score: f64,
    frontier: bool,
}

fn run_report(paths: &[PathBuf], common: &Common, out: &Path) -> Result<()> {
    let cfg = setup(common, out)?;
    let mut records: Vec<EvalRecord> = Vec::new();
    for p in paths {
        let mut r = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
        for rec in r.deserialize() {
            let rec: EvalRecord = rec?;
            rec.validate()?;
            records.push(rec);
        }
    }
    let scores = normalize_scores(&records)?;
    let ranks = average_ranks(&records);

    let mut w = csv::Writer::from_path(out.join("scores.csv"))?;
    for s in &scores {
        w.serialize(s)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("ranks.csv"))?;
    for (method, mean_rank) in &ranks {
        w.serialize(RankRow {
            method: method.clone(),
            mean_rank: *mean_rank,
        })?;
    }
    w.flush()?;

    // per method: total wall-clock against mean normalized score
    let mut runtime: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &records {
        *runtime.entry(&r.method).or_default() += r.seconds;
    }
    let mut score: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in &scores {
        let e = score.entry(&s.method).or_default();
        e.0 += s.score;
        e.1 += 1;
    }
    let methods: Vec<&str> = runtime.keys().copied().collect();
    let points: Vec<(f64, f64)> = methods
        .iter()
        .map(|m| (runtime[m], score.get(m).map_or(f64::NAN, |(s, c)| s / *c as f64)))
        .collect();
    let frontier = pareto_frontier(&points);
    let mut w = csv::Writer::from_path(out.join("pareto.csv"))?;
    for (i, m) in methods.iter().enumerate() {
        w.serialize(ParetoRow {
            method: m.to_string(),
            runtime: points[i].0,
            score: points[i].1,
            frontier: frontier.contains(&i),
        })?;
    }
    w.flush()?;
    for (m, r) in &ranks {
        println!("{m}\t{r:.3}");
    }
    let mut m = Manifest::new("report", &cfg);
    let files: Vec<(String, &Path)> = paths.iter().enumerate().map(|(i, p)| (format!("records{i}"), p.as_path())).collect();
    let refs: Vec<(&str, &Path)> = files.iter().map(|(n, p)| (n.as_str(), *p)).collect();
    inputs(&mut m, common, &refs)?;
    m.write(out)
}
