//! Post-training on downstream tables: frozen featurizer with ridge,
//! fine-tuning, residual boosting and multi-source specialization.

mod boost;
mod features;
mod finetune;
mod predictions;
mod ridge;

pub use boost::{boost, specialize_and_boost, BoostStage, BoostedModel, ResidualSpace};
pub use features::{embed_with, featurize, read_features, write_features, FeatureMatrix, TableEncoding};
pub use finetune::{fine_tune, FineTuneConfig, FineTunedModel, Member, LEARNING_RATES, MIN_ROWS};
pub use predictions::{align_predictions, read_predictions, write_predictions, PredictionRow};
pub use ridge::{fit_ridge_loocv, fit_ridge_loocv_with, loo_residuals, LooRoute, RidgeModel, DEFAULT_ALPHAS};
