//! ADD / ADD-S pose errors and the accuracy and AUC summaries built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{OrientedPointCloud, Pose, Vec3};

/// Largest pairwise point distance.
pub fn model_diameter(model: &OrientedPointCloud) -> Result<f64> {
    if model.len() < 2 {
        return Err(Error::TooFewPoints(model.len()));
    }
    let pts: Vec<Vec3> = model.positions().copied().collect();
    let mut best: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    Ok(best.sqrt())
}

/// Mean distance between each model point under `pred` and under `gt`.
pub fn add_metric(pred: &Pose, gt: &Pose, model: &OrientedPointCloud) -> f64 {
    let total: f64 = model
        .positions()
        .map(|p| (pred.transform_point(p) - gt.transform_point(p)).norm())
        .sum();
    total / model.len() as f64
}

/// Mean distance from each ground-truth-posed model point to the nearest
/// prediction-posed model point.
pub fn adds_metric(pred: &Pose, gt: &Pose, model: &OrientedPointCloud) -> f64 {
    let moved: Vec<Vec3> = model.positions().map(|p| pred.transform_point(p)).collect();
    let total: f64 = model
        .positions()
        .map(|p| {
            let target = gt.transform_point(p);
            moved
                .iter()
                .map(|m| (m - target).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / model.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub add_error: f64,
    pub adds_error: f64,
    pub diameter: f64,
    pub symmetric: bool,
}

impl EvalRecord {
    pub fn new(scene_id: impl Into<String>, pred: &Pose, gt: &Pose, model: &OrientedPointCloud, diameter: f64, symmetric: bool) -> Self {
        EvalRecord {
            scene_id: scene_id.into(),
            add_error: add_metric(pred, gt, model),
            adds_error: adds_metric(pred, gt, model),
            diameter,
            symmetric,
        }
    }

    fn error(&self, scoring: Scoring) -> f64 {
        match scoring {
            Scoring::Add => self.add_error,
            Scoring::AddS => self.adds_error,
            Scoring::BySymmetry if self.symmetric => self.adds_error,
            Scoring::BySymmetry => self.add_error,
        }
    }
}

/// Which error a record is scored with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    Add,
    AddS,
    /// ADD-S for symmetric objects, ADD otherwise.
    BySymmetry,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Fraction of the object diameter, e.g. `0.1` for "<0.1d".
    Diameter(f64),
    /// Fixed distance in meters.
    Meters(f64),
}

impl Threshold {
    fn value(&self, record: &EvalRecord) -> f64 {
        match *self {
            Threshold::Diameter(f) => f * record.diameter,
            Threshold::Meters(m) => m,
        }
    }
}

/// Fraction of records whose error is strictly below the threshold.
pub fn accuracy(records: &[EvalRecord], threshold: Threshold, scoring: Scoring) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let hits = records.iter().filter(|r| r.error(scoring) < threshold.value(r)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Area under the accuracy-vs-threshold curve on `[0, max_threshold]`,
/// normalized to `[0, 1]`.
///
/// With strict `<` the accuracy curve is a step function, so the integral is
/// exact: each error `e` contributes `max(0, max_threshold − e)`.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if !(max_threshold > 0.0) {
        return Err(Error::InvalidConfig {
            key: "auc_cap".into(),
            reason: "must be positive".into(),
        });
    }
    let area: f64 = errors.iter().map(|e| (max_threshold - e).max(0.0)).sum();
    Ok(area / (errors.len() as f64 * max_threshold))
}

pub fn records_auc(records: &[EvalRecord], max_threshold: f64, scoring: Scoring) -> Result<f64> {
    let errors: Vec<f64> = records.iter().map(|r| r.error(scoring)).collect();
    auc(&errors, max_threshold)
}

/// Per-object summary in the column order of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub object: String,
    pub add_auc: f64,
    pub adds_auc: f64,
    /// ADD(-S) < 0.1 d, ADD-S for symmetric objects.
    pub acc_0p1d: f64,
    /// ADD-S < 2 cm for every object.
    pub acc_2cm: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn from_records(object: impl Into<String>, records: &[EvalRecord], auc_cap: f64) -> Result<Self> {
        Ok(MetricsReport {
            object: object.into(),
            add_auc: records_auc(records, auc_cap, Scoring::Add)?,
            adds_auc: records_auc(records, auc_cap, Scoring::AddS)?,
            acc_0p1d: accuracy(records, Threshold::Diameter(0.1), Scoring::BySymmetry)?,
            acc_2cm: accuracy(records, Threshold::Meters(0.02), Scoring::AddS)?,
            n: records.len(),
        })
    }
}
