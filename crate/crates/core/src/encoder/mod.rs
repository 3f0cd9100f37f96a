//! Row assembly and the transformer encoder.

pub mod cells;
pub mod checkpoint;
pub mod model;
pub mod params;

pub use cells::{build_cell_pair, build_row, CellPair, CellPairSequence, CellValue, ColumnKind, ColumnSpec};
pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint};
pub use model::{DropoutCtx, EncoderConfig, EncoderModel, ParamGroup};
pub use params::{Bound, LayerNorm, Linear, ParamId, ParamStore, Rho};
