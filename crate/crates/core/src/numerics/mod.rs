//! Dense tensors, reverse-mode differentiation, AdamW and the learning-rate
//! schedule.

pub mod optim;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use optim::{AdamWConfig, OptimizerState};
pub use schedule::{Decay, LrSchedule};
pub use tape::{Gradients, Segment, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
