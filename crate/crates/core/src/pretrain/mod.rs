//! Contrastive pre-training on knowledge-base batches.

mod loss;
mod train;

pub use loss::{
    gaussian_kernel_matrix, gaussian_kernel_on_tape, info_nce, info_nce_on_tape, matryoshka_loss, matryoshka_loss_on_tape,
    median_bandwidth, pair_similarity, partners_from_map, SimilarityMatrix, BANDWIDTH_FLOOR,
};
pub use train::{batch_loss, pretrain, read_trace, PretrainConfig, PretrainOutput, PretrainReport, TraceRow};
