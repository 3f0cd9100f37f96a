//! Micro-scale pre-training run on the synthetic knowledge base, shared by
//! the pre-training and acceptance suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tartekit::downstream::{featurize, fit_ridge_loocv, TableEncoding, DEFAULT_ALPHAS};
use tartekit::embed::{NgramHasher, StringEmbedder};
use tartekit::encoder::{CellPairSequence, EncoderConfig, EncoderModel};
use tartekit::eval::metric_r2;
use tartekit::ingest::{infer_schema, split_indices};
use tartekit::kb::{BatchConfig, BatchSampler, KnowledgeStore};
use tartekit::pretrain::{pair_similarity, pretrain, PretrainConfig, PretrainOutput, TraceRow};
use tartekit::Tensor64;

use super::synth;

pub const ENTITIES: usize = 200;
pub const STEPS: usize = 300;
pub const TRAIN_ROWS: usize = 40;

pub fn micro_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 4,
        d_model: 32,
        d_ff: 64,
        d_lm: 32,
        matryoshka_dims: vec![8, 16, 32],
        proj_hidden: 64,
        dropout: 0.1,
    }
}

pub fn embedder() -> StringEmbedder {
    StringEmbedder::hashed(32, NgramHasher::default()).unwrap()
}

pub fn pretrain_config(seed: u64, steps: usize) -> PretrainConfig {
    PretrainConfig {
        batch: BatchConfig {
            entities: 32,
            facts: 4,
            max_dup: 2,
            two_replacements: 0.5,
        },
        total_steps: steps,
        warmup_steps: (steps / 10).max(1),
        lr_min: 1e-6,
        lr_max: 1e-3,
        dropout: 0.1,
        matryoshka_dims: vec![8, 16, 32],
        temperature: 0.05,
        seed,
        checkpoint_interval: 0,
        ..PretrainConfig::default()
    }
}

pub struct ToyWorld {
    pub ents: Vec<synth::Entity>,
    pub store: KnowledgeStore,
    pub embedder: StringEmbedder,
    pub rng: ChaCha8Rng,
}

pub fn world(seed: u64) -> ToyWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = synth::entities(ENTITIES, &mut rng);
    let store = KnowledgeStore::parse(synth::kb_text(&ents).as_bytes()).unwrap();
    ToyWorld {
        ents,
        store,
        embedder: embedder(),
        rng,
    }
}

pub struct ToyOutcome {
    pub trace: Vec<TraceRow>,
    pub leading: f64,
    pub trailing: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub r2_random: f64,
    pub r2_pretrained: f64,
}

/// Pre-trains a micro model for `steps`, then scores held-out pair
/// similarity and frozen-featurizer ridge R² against random weights.
pub fn run(seed: u64, steps: usize) -> ToyOutcome {
    let mut w = world(seed);
    let random = EncoderModel::<f64>::new(micro_config(), seed).unwrap();
    let mut model = random.clone();
    let pc = pretrain_config(seed, steps);
    let report = pretrain(&w.store, &w.embedder, &mut model, &pc, &PretrainOutput::default()).unwrap();
    let k = 50.min(report.trace.len());
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let leading = mean(&report.trace[..k]);
    let trailing = mean(&report.trace[report.trace.len() - k..]);

    let sampler = BatchSampler::new(&w.store, &w.embedder, pc.batch).unwrap();
    let mut held_out = ChaCha8Rng::seed_from_u64(1000 + seed);
    let batch = sampler.sample(&mut held_out).unwrap();
    let readouts = model.embed_rows(&batch.rows, 64).unwrap();
    let z = Tensor64::from_rows(&readouts).unwrap();
    let (pos_sim, neg_sim) = pair_similarity(&z, &batch.positive_map).unwrap();

    let table = synth::table(&w.ents, 0.5, &mut w.rng);
    let schema = infer_schema(&table, Some("target"), None).unwrap();
    let y = schema.target_values(&table).unwrap();
    let (train, test) = split_indices(ENTITIES, None, TRAIN_ROWS, &mut w.rng).unwrap();
    let enc = TableEncoding::fit(&table, &schema, &train, &w.embedder).unwrap();
    let rows = enc.all_rows(&table, &w.embedder).unwrap();
    let r2_random = ridge_r2(&random, &rows, &y, &train, &test);
    let r2_pretrained = ridge_r2(&model, &rows, &y, &train, &test);
    ToyOutcome {
        trace: report.trace,
        leading,
        trailing,
        pos_sim,
        neg_sim,
        r2_random,
        r2_pretrained,
    }
}

pub fn ridge_r2(
    model: &EncoderModel<f64>,
    rows: &[CellPairSequence],
    y: &[f64],
    train: &[usize],
    test: &[usize],
) -> f64 {
    let f = featurize(model, rows, model.config().d_model, "toy", "toy").unwrap();
    let (ftr, fte) = (f.select(train), f.select(test));
    let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let ridge = fit_ridge_loocv(&ftr.design(false), &ytr, &DEFAULT_ALPHAS).unwrap();
    metric_r2(&yte, &ridge.predict(&fte.design(false)).unwrap()).unwrap()
}
