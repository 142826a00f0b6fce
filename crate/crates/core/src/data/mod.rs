//! Datasets, file formats and configuration.

mod checkpoint;
mod config;
mod pose_file;
mod synth;
mod trajectory_csv;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, FORMAT_VERSION, MANIFEST_FILE, PAYLOAD_FILE};
pub use config::{Config, EncoderKind};
pub use pose_file::{parse_pose_matrix, render_pose_matrix};
pub use synth::{synth_scene, FeatureMap, SyntheticSceneConfig, TrajectoryKind, FRAME_INTERVAL};
pub use trajectory_csv::{parse_trajectory_csv, write_trajectory_csv, POSE_COLUMNS};

use crate::geometry::{Pose, Vec3};

/// One observation: input features, ground-truth pose and (once assigned)
/// the center of its grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub features: Vec<f64>,
    pub pose: Pose,
    pub grid_center: Option<Vec3>,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Axis-aligned bounds of the given positions, widened so that no axis is
/// flat.
pub fn bounding_box(samples: &[SceneSample]) -> Option<(Vec3, Vec3)> {
    let first = samples.first()?;
    let mut lo = first.pose.position;
    let mut hi = lo;
    for s in samples {
        for i in 0..3 {
            lo[i] = lo[i].min(s.pose.position[i]);
            hi[i] = hi[i].max(s.pose.position[i]);
        }
    }
    let span = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    for i in 0..3 {
        if hi[i] - lo[i] < 1e-9 {
            let pad = (0.05 * span).max(0.5);
            lo[i] -= pad;
            hi[i] += pad;
        }
    }
    Some((lo, hi))
}
