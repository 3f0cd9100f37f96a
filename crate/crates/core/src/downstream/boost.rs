//! Residual boosting: ridge models on backbone features fitted to what a
//! base predictor leaves unexplained, applied in sequence.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::downstream::features::FeatureMatrix;
use crate::downstream::ridge::{fit_ridge_loocv, RidgeModel};
use crate::error::{Error, Result};
use crate::ingest::TaskKind;

/// Where classification residuals live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpace {
    /// `y − p`, corrections added to probabilities, then clipped to [0, 1].
    #[default]
    Probability,
    /// Working residual `(y − p) / p(1−p)` added to the logit.
    Logit,
}

/// One ridge stage: its model and whether it takes a missing-row flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStage {
    pub ridge: RidgeModel,
    pub missing_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub task: TaskKind,
    pub space: ResidualSpace,
    pub stages: Vec<BoostStage>,
}

const P_FLOOR: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BoostedModel {
    fn working(&self, base: &[f64]) -> Vec<f64> {
        match (self.task, self.space) {
            (TaskKind::BinaryClassification, ResidualSpace::Logit) => base.iter().map(|&p| logit(p)).collect(),
            _ => base.to_vec(),
        }
    }

    fn residual(&self, y: f64, current: f64) -> f64 {
        match (self.task, self.space) {
            (TaskKind::BinaryClassification, ResidualSpace::Logit) => {
                let p = sigmoid(current);
                (y - p) / (p * (1.0 - p)).max(1e-3)
            }
            _ => y - current,
        }
    }

    fn finish(&self, current: Vec<f64>) -> Vec<f64> {
        match (self.task, self.space) {
            (TaskKind::Regression, _) => current,
            (TaskKind::BinaryClassification, ResidualSpace::Probability) => {
                current.into_iter().map(|p| p.clamp(0.0, 1.0)).collect()
            }
            (TaskKind::BinaryClassification, ResidualSpace::Logit) => current.into_iter().map(sigmoid).collect(),
        }
    }

    /// Fits one stage per feature matrix, in order, each on the residuals
    /// left by the base and the earlier stages. Returns the model and the
    /// boosted training predictions.
    pub fn fit(
        base_train: &[f64],
        stage_features: &[&FeatureMatrix],
        y_train: &[f64],
        task: TaskKind,
        space: ResidualSpace,
        alphas: &[f64],
    ) -> Result<(Self, Vec<f64>)> {
        if base_train.len() != y_train.len() {
            return Err(Error::shape(
                "boost",
                format!("{} base predictions, {} targets", base_train.len(), y_train.len()),
            ));
        }
        let mut model = Self {
            task,
            space,
            stages: Vec::with_capacity(stage_features.len()),
        };
        let mut current = model.working(base_train);
        for f in stage_features {
            if f.n != y_train.len() {
                return Err(Error::shape("boost", format!("{} feature rows, {} targets", f.n, y_train.len())));
            }
            let missing_flag = f.any_missing();
            let x = f.design(missing_flag);
            let r: Vec<f64> = y_train.iter().zip(&current).map(|(&y, &c)| model.residual(y, c)).collect();
            let ridge = fit_ridge_loocv(&x, &r, alphas)?;
            for (c, v) in current.iter_mut().zip(ridge.predict(&x)?) {
                *c += v;
            }
            model.stages.push(BoostStage { ridge, missing_flag });
        }
        let preds = model.finish(current);
        Ok((model, preds))
    }

    pub fn predict(&self, base: &[f64], stage_features: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        if stage_features.len() != self.stages.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature matrices for {} stages",
                stage_features.len(),
                self.stages.len()
            )));
        }
        let mut current = self.working(base);
        for (stage, f) in self.stages.iter().zip(stage_features) {
            if f.n != base.len() {
                return Err(Error::shape("boost", format!("{} feature rows, {} base predictions", f.n, base.len())));
            }
            let x: DMatrix<f64> = f.design(stage.missing_flag);
            for (c, v) in current.iter_mut().zip(stage.ridge.predict(&x)?) {
                *c += v;
            }
        }
        Ok(self.finish(current))
    }
}

/// Boosting with one backbone featurization: returns the model and test
/// predictions.
pub fn boost(
    base_train: &[f64],
    base_test: &[f64],
    x_train: &FeatureMatrix,
    x_test: &FeatureMatrix,
    y_train: &[f64],
    task: TaskKind,
    alphas: &[f64],
) -> Result<(BoostedModel, Vec<f64>)> {
    let (model, _) = BoostedModel::fit(base_train, &[x_train], y_train, task, ResidualSpace::Probability, alphas)?;
    let pred = model.predict(base_test, &[x_test])?;
    Ok((model, pred))
}

/// Multi-step boosting over source featurizations in the given order; with
/// no sources, the pretrained backbone features are used.
pub fn specialize_and_boost(
    base_train: &[f64],
    base_test: &[f64],
    backbone: (&FeatureMatrix, &FeatureMatrix),
    sources: &[(FeatureMatrix, FeatureMatrix)],
    y_train: &[f64],
    task: TaskKind,
    alphas: &[f64],
) -> Result<(BoostedModel, Vec<f64>)> {
    if sources.is_empty() {
        return boost(base_train, base_test, backbone.0, backbone.1, y_train, task, alphas);
    }
    let train: Vec<&FeatureMatrix> = sources.iter().map(|s| &s.0).collect();
    let test: Vec<&FeatureMatrix> = sources.iter().map(|s| &s.1).collect();
    let (model, _) = BoostedModel::fit(base_train, &train, y_train, task, ResidualSpace::Probability, alphas)?;
    let pred = model.predict(base_test, &test)?;
    Ok((model, pred))
}
