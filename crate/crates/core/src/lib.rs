//! Column–cell transformer encoder for heterogeneous tables, with contrastive
//! pre-training on knowledge-base triples and downstream post-training
//! (frozen featurizer, ridge, fine-tuning, residual boosting).

pub mod downstream;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kb;
pub mod numerics;
pub mod pretrain;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Encoder64 = encoder::EncoderModel<f64>;
pub type Encoder32 = encoder::EncoderModel<f32>;
