//! CSV tables, column typing and train/test splits.

mod schema;
mod split;
mod table;

pub use schema::{
    infer_column, infer_schema, parse_datetime, parse_number, ColumnInfo, TableSchema, TaskKind, HIGH_CARDINALITY, PARSE_RATE,
};
pub use split::{make_splits, split_indices, SplitSpec, SPLITS_PER_SIZE, TRAIN_SIZES};
pub use table::{is_missing, Table};
