//! Knowledge-base triples and contrastive batch construction.

mod sampler;
mod store;

pub use sampler::{make_positive, sample_batch, sampling_pool, select_facts, BatchConfig, BatchSampler, PretrainBatch};
pub use store::{parse_triple_line, KnowledgeStore, RelationInfo, StoreStats, Tail, TailKind, Triple};
