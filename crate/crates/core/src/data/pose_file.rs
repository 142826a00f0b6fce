//! 4×4 homogeneous pose matrices as 16 whitespace-separated numbers,
//! row-major (the 7-Scenes `frame-*.pose.txt` layout).

use crate::error::{Error, Result};
use crate::geometry::{Pose, UnitQuaternion};

const ORTHONORMAL_TOL: f64 = 1e-3;
const BOTTOM_ROW_TOL: f64 = 1e-6;

pub fn parse_pose_matrix(text: &str) -> Result<Pose> {
    let values = text
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                row: i / 4 + 1,
                msg: format!("not a number: {tok:?}"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != 16 {
        return Err(Error::Parse {
            row: 0,
            msg: format!("expected 16 values, found {}", values.len()),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pose matrix".into()));
    }
    let m = |r: usize, c: usize| values[r * 4 + c];

    let bottom = [m(3, 0), m(3, 1), m(3, 2), m(3, 3)];
    let expected = [0.0, 0.0, 0.0, 1.0];
    if bottom
        .iter()
        .zip(&expected)
        .any(|(a, b)| (a - b).abs() > BOTTOM_ROW_TOL)
    {
        return Err(Error::Parse {
            row: 4,
            msg: format!("bottom row {bottom:?} is not (0, 0, 0, 1)"),
        });
    }

    let rot = [
        [m(0, 0), m(0, 1), m(0, 2)],
        [m(1, 0), m(1, 1), m(1, 2)],
        [m(2, 0), m(2, 1), m(2, 2)],
    ];
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| rot[k][i] * rot[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    let det = rot[0][0] * (rot[1][1] * rot[2][2] - rot[1][2] * rot[2][1])
        - rot[0][1] * (rot[1][0] * rot[2][2] - rot[1][2] * rot[2][0])
        + rot[0][2] * (rot[1][0] * rot[2][1] - rot[1][1] * rot[2][0]);
    if worst > ORTHONORMAL_TOL || det <= 0.0 {
        return Err(Error::Geometry(format!(
            "rotation block is not a proper rotation (orthonormality error {worst:.2e}, det {det:.4})"
        )));
    }

    let q = UnitQuaternion::from_rotation_matrix(&rot)?;
    Pose::new([m(0, 3), m(1, 3), m(2, 3)], q)
}

/// Inverse of [`parse_pose_matrix`].
pub fn render_pose_matrix(pose: &Pose) -> String {
    let r = pose.orientation.to_rotation_matrix();
    let p = pose.position;
    let rows = [
        [r[0][0], r[0][1], r[0][2], p[0]],
        [r[1][0], r[1][1], r[1][2], p[1]],
        [r[2][0], r[2][1], r[2][2], p[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    rows.iter()
        .map(|row| row.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angular_error_deg;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn identity_matrix() {
        let p = parse_pose_matrix("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        assert_eq!(p.position, [0.0; 3]);
        assert_eq!(p.orientation, UnitQuaternion::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z_with_translation() {
        let p = parse_pose_matrix("0 -1 0 1  1 0 0 2  0 0 1 3  0 0 0 1").unwrap();
        assert_eq!(p.position, [1.0, 2.0, 3.0]);
        let q = p.orientation.to_array();
        let expect = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        for i in 0..4 {
            assert!((q[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn malformed_inputs() {
        let fifteen = "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0";
        assert!(matches!(parse_pose_matrix(fifteen), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_pose_matrix("1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 x"),
            Err(Error::Parse { .. })
        ));
        let skewed = "1 0.1 0 0  0 1 0 0  0 0 1 0  0 0 0 1";
        assert!(matches!(parse_pose_matrix(skewed), Err(Error::Geometry(_))));
        let reflection = "-1 0 0 0  0 1 0 0  0 0 1 0  0 0 0 1";
        assert!(matches!(parse_pose_matrix(reflection), Err(Error::Geometry(_))));
        let bad_bottom = "1 0 0 0  0 1 0 0  0 0 1 0  0 0 0.1 1";
        assert!(matches!(
            parse_pose_matrix(bad_bottom),
            Err(Error::Parse { row: 4, .. })
        ));
    }

    #[test]
    fn tolerates_small_orthonormality_noise() {
        let p = parse_pose_matrix("1 0.0001 0 0  -0.0001 1 0 0  0 0 1 0  0 0 0 1").unwrap();
        assert!(angular_error_deg(p.orientation, UnitQuaternion::IDENTITY) < 0.01);
    }
}
