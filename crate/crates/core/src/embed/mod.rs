//! Cell-content embedding: strings, datetimes and numeric power transforms.

pub mod datetime;
pub mod power;
pub mod string;

pub use datetime::DatetimeValue;
pub use power::{fit_power_transform, yeo_johnson, yeo_johnson_inverse, PowerTransform};
pub use string::{NgramHasher, StringEmbedder, StringEmbedding, DEFAULT_DIM};
