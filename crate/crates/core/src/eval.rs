//! Localization metrics and their reports.

use serde::{Deserialize, Serialize};

use crate::data::{Config, Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{angular_error_deg, Pose};
use crate::model::{NeuroLoc, Prediction};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Orientation error convention used in every report.
pub const ORIENTATION_METRIC: &str = "2*acos(|<q_pred, q_true>|) in degrees";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub name: String,
    pub count: usize,
    pub median_position: f64,
    pub mean_position: f64,
    pub max_position: f64,
    pub median_position_l1: f64,
    pub mean_position_l1: f64,
    pub median_orientation_deg: f64,
    pub mean_orientation_deg: f64,
    pub max_orientation_deg: f64,
    /// Euclidean position error per sample.
    pub position_errors: Vec<f64>,
    pub position_errors_l1: Vec<f64>,
    pub orientation_errors_deg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub orientation_metric: String,
    pub splits: Vec<SplitMetrics>,
    /// Wall-clock seconds, only present when requested.
    pub runtime_seconds: Option<f64>,
    pub config: Config,
}

/// Lower-middle element of the sorted values; `None` when empty.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

pub fn split_metrics(name: &str, predicted: &[Pose], truth: &[Pose]) -> Result<SplitMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            predicted.len(),
            truth.len()
        )));
    }
    let mut l2 = Vec::with_capacity(truth.len());
    let mut l1 = Vec::with_capacity(truth.len());
    let mut rot = Vec::with_capacity(truth.len());
    for (p, t) in predicted.iter().zip(truth) {
        let d: Vec<f64> = (0..3).map(|i| p.position[i] - t.position[i]).collect();
        l2.push(d.iter().map(|x| x * x).sum::<f64>().sqrt());
        l1.push(d.iter().map(|x| x.abs()).sum());
        rot.push(angular_error_deg(p.orientation, t.orientation));
    }
    Ok(SplitMetrics {
        name: name.to_string(),
        count: truth.len(),
        median_position: lower_median(&l2).unwrap_or(0.0),
        mean_position: mean(&l2),
        max_position: max(&l2),
        median_position_l1: lower_median(&l1).unwrap_or(0.0),
        mean_position_l1: mean(&l1),
        median_orientation_deg: lower_median(&rot).unwrap_or(0.0),
        mean_orientation_deg: mean(&rot),
        max_orientation_deg: max(&rot),
        position_errors: l2,
        position_errors_l1: l1,
        orientation_errors_deg: rot,
    })
}

fn poses(predictions: &[Prediction]) -> Vec<Pose> {
    predictions
        .iter()
        .map(|p| Pose {
            position: p.position,
            orientation: p.orientation,
        })
        .collect()
}

/// Metrics of `model` on one split.
pub fn evaluate_split(model: &NeuroLoc, name: &str, samples: &[SceneSample]) -> Result<SplitMetrics> {
    let predicted = poses(&model.predict_samples(samples)?);
    let truth: Vec<Pose> = samples.iter().map(|s| s.pose).collect();
    split_metrics(name, &predicted, &truth)
}

/// Metrics on the non-empty splits of `dataset`, train first.
pub fn evaluate(model: &NeuroLoc, dataset: &Dataset) -> Result<MetricsReport> {
    let mut splits = Vec::new();
    for (name, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        if !samples.is_empty() {
            splits.push(evaluate_split(model, name, samples)?);
        }
    }
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        orientation_metric: ORIENTATION_METRIC.to_string(),
        splits,
        runtime_seconds: None,
        config: model.config.clone(),
    })
}

/// `"4.46m, 1.72°"`.
pub fn format_pair(position: f64, degrees: f64) -> String {
    format!("{position:.2}m, {degrees:.2}°")
}

impl MetricsReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}{:>6}  {:<18}{:<18}\n", "split", "n", "median", "mean");
        for s in &self.splits {
            out.push_str(&format!(
                "{:<8}{:>6}  {:<18}{:<18}\n",
                s.name,
                s.count,
                format_pair(s.median_position, s.median_orientation_deg),
                format_pair(s.mean_position, s.mean_orientation_deg)
            ));
        }
        out.push_str(&format!(
            "position: euclidean distance; orientation: {}\n",
            self.orientation_metric
        ));
        if let Some(t) = self.runtime_seconds {
            out.push_str(&format!("runtime: {t:.1}s\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics are always serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("metrics file: {e}")))?;
        if report.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "metrics schema version {} is not supported (expected {METRICS_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;

    fn at(p: [f64; 3]) -> Pose {
        Pose::new(p, UnitQuaternion::IDENTITY).unwrap()
    }

    #[test]
    fn median_takes_lower_middle() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let truth = vec![at([1.0, 2.0, 3.0]), at([0.0, 0.0, 0.0])];
        let m = split_metrics("train", &truth, &truth).unwrap();
        assert_eq!(format_pair(m.median_position, m.median_orientation_deg), "0.00m, 0.00°");
    }

    #[test]
    fn pythagorean_offset() {
        let m = split_metrics("test", &[at([3.0, 4.0, 0.0])], &[at([0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(m.median_position, 5.0);
        assert_eq!(m.median_position_l1, 7.0);
    }

    #[test]
    fn table_formatting() {
        assert_eq!(format_pair(4.46, 1.72), "4.46m, 1.72°");
        assert_eq!(format_pair(4.456, 1.7249), "4.46m, 1.72°");
    }

    #[test]
    fn json_roundtrip_and_table_agree() {
        let truth = vec![at([0.0; 3]), at([1.0, 0.0, 0.0]), at([0.0, 2.0, 0.0])];
        let q = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], 0.3).unwrap();
        let pred = vec![
            at([0.1, 0.0, 0.0]),
            Pose::new([1.0, 0.5, 0.0], q).unwrap(),
            at([0.0, 2.0, 0.3]),
        ];
        let report = MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            orientation_metric: ORIENTATION_METRIC.into(),
            splits: vec![split_metrics("test", &pred, &truth).unwrap()],
            runtime_seconds: Some(1.25),
            config: Config::default(),
        };
        let back = MetricsReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
        let s = &back.splits[0];
        let table = report.to_table();
        assert!(table.contains(&format_pair(s.median_position, s.median_orientation_deg)));
        assert!(table.contains(&format_pair(s.mean_position, s.mean_orientation_deg)));
        assert!(MetricsReport::from_json(
            &report
                .to_json()
                .replace("\"schema_version\": 1", "\"schema_version\": 2")
        )
        .is_err());
    }
}
