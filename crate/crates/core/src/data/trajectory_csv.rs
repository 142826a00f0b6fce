//! Trajectory CSV: `timestamp,x,y,z,qw,qx,qy,qz`, optionally followed by
//! feature columns `f0,f1,...`.

use std::io::{Read, Write};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{Pose, UnitQuaternion};

pub const POSE_COLUMNS: [&str; 8] = ["timestamp", "x", "y", "z", "qw", "qx", "qy", "qz"];

fn csv_err(row: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        row,
        msg: e.to_string(),
    }
}

/// Reads samples sorted by timestamp with quaternions normalized onto the
/// `w >= 0` hemisphere. Rows are numbered from 1 (the first data row) in errors.
pub fn parse_trajectory_csv<R: Read>(reader: R) -> Result<Vec<SceneSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(0, e))?.clone();
    let mut pose_idx = [0usize; 8];
    for (slot, name) in pose_idx.iter_mut().zip(POSE_COLUMNS) {
        *slot = header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            msg: format!("missing column `{name}`"),
        })?;
    }
    let mut feature_idx: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            h.strip_prefix('f')
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, col))
        })
        .collect();
    feature_idx.sort_unstable();
    if feature_idx.iter().enumerate().any(|(i, (n, _))| *n != i) {
        return Err(Error::Parse {
            row: 0,
            msg: "feature columns must be f0, f1, ... without gaps".into(),
        });
    }

    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_err(row, e))?;
        let num = |col: usize| -> Result<f64> {
            let text = record.get(col).unwrap_or("");
            text.parse::<f64>()
                .map_err(|_| csv_err(row, format!("cannot parse {text:?} in column `{}`", &header[col])))
        };
        let v: Vec<f64> = pose_idx.iter().map(|&c| num(c)).collect::<Result<_>>()?;
        let q = UnitQuaternion::normalize([v[4], v[5], v[6], v[7]]).map_err(|e| csv_err(row, e))?;
        let pose = Pose::new([v[1], v[2], v[3]], q).map_err(|e| csv_err(row, e))?;
        let features = feature_idx.iter().map(|&(_, c)| num(c)).collect::<Result<Vec<_>>>()?;
        if !v[0].is_finite() || features.iter().any(|f| !f.is_finite()) {
            return Err(csv_err(row, "non-finite value"));
        }
        out.push(SceneSample {
            features,
            pose,
            grid_center: None,
            timestamp: v[0],
        });
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

pub fn write_trajectory_csv<W: Write>(writer: W, samples: &[SceneSample]) -> Result<()> {
    let width = samples.first().map_or(0, |s| s.features.len());
    if samples.iter().any(|s| s.features.len() != width) {
        return Err(Error::Contract(
            "all samples must carry the same number of features".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = POSE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(0, e))?;
    for (i, s) in samples.iter().enumerate() {
        let p = s.pose.position;
        let q = s.pose.orientation;
        let mut rec: Vec<String> = [s.timestamp, p[0], p[1], p[2], q.w, q.x, q.y, q.z]
            .iter()
            .map(|v| v.to_string())
            .collect();
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(i + 1, e))?;
    }
    w.flush().map_err(|e| csv_err(samples.len(), e))?;
    Ok(())
}
