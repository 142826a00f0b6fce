//! Quaternion and pose math plus the equidistant 3-D grid quantizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `q = (w, x, y, z)` and moves it onto the `w >= 0` hemisphere.
    pub fn normalize(q: [f64; 4]) -> Result<Self> {
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateQuaternion(n));
        }
        let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Self {
            w: q[0] * s,
            x: q[1] * s,
            y: q[2] * s,
            z: q[3] * s,
        })
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm3(axis);
        if !(n > 1e-12) {
            return Err(Error::Geometry("zero rotation axis".into()));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::normalize([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn negated(self) -> [f64; 4] {
        [-self.w, -self.x, -self.y, -self.z]
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(self, o: Self) -> Self {
        let (a, b) = (self, o);
        let raw = [
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        ];
        Self::normalize(raw).unwrap_or(Self::IDENTITY)
    }

    pub fn conjugate(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Row-major 3×3 rotation matrix.
    pub fn to_rotation_matrix(self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Converts a proper rotation matrix (Shepperd's method). The caller is
    /// responsible for orthonormality.
    pub fn from_rotation_matrix(r: &[[f64; 3]; 3]) -> Result<Self> {
        let trace = r[0][0] + r[1][1] + r[2][2];
        let q = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            [
                0.25 * s,
                (r[2][1] - r[1][2]) / s,
                (r[0][2] - r[2][0]) / s,
                (r[1][0] - r[0][1]) / s,
            ]
        } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
            let s = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
            [
                (r[2][1] - r[1][2]) / s,
                0.25 * s,
                (r[0][1] + r[1][0]) / s,
                (r[0][2] + r[2][0]) / s,
            ]
        } else if r[1][1] > r[2][2] {
            let s = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
            [
                (r[0][2] - r[2][0]) / s,
                (r[0][1] + r[1][0]) / s,
                0.25 * s,
                (r[1][2] + r[2][1]) / s,
            ]
        } else {
            let s = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
            [
                (r[1][0] - r[0][1]) / s,
                (r[0][2] + r[2][0]) / s,
                (r[1][2] + r[2][1]) / s,
                0.25 * s,
            ]
        };
        Self::normalize(q)
    }

    /// Log map `(v/‖v‖)·arccos(w)`, zero for the identity.
    pub fn log(self) -> Vec3 {
        quat_log(self)
    }

    pub fn exp(v: Vec3) -> Self {
        quat_exp(v)
    }
}

/// 6-DoF pose: position plus orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion) -> Result<Self> {
        if position.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("pose position".into()));
        }
        Ok(Self { position, orientation })
    }

    /// Inverse rigid transform; maps camera-to-world into world-to-camera and back.
    pub fn inverse(&self) -> Self {
        let qi = self.orientation.conjugate();
        let r = qi.to_rotation_matrix();
        let p = self.position;
        let t = [
            -(r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2]),
            -(r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2]),
            -(r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]),
        ];
        Self {
            position: t,
            orientation: UnitQuaternion::normalize(qi.to_array()).expect("unit input"),
        }
    }
}

pub(crate) fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Unit-quaternion log map on the `w >= 0` hemisphere.
pub fn quat_log(q: UnitQuaternion) -> Vec3 {
    quat_log_raw(q.to_array()).0
}

/// Log map of a raw (unnormalized) quaternion `(w, x, y, z)` after flipping it
/// onto the `w >= 0` hemisphere. Returns the 3-vector and `sign` used.
///
/// `atan2(|v|, w) / |v|` is scale invariant, so normalizing first is not
/// needed and the small-angle limit stays well conditioned.
pub(crate) fn quat_log_raw(q: [f64; 4]) -> ([f64; 3], f64) {
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let w = sign * q[0];
    let v = [sign * q[1], sign * q[2], sign * q[3]];
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let c = log_scale(s, w);
    ([c * v[0], c * v[1], c * v[2]], sign)
}

/// `atan2(s, w) / s`, with its limit as `s -> 0`.
pub(crate) fn log_scale(s: f64, w: f64) -> f64 {
    if s <= 1e-3 * w {
        let t2 = (s / w) * (s / w);
        (1.0 - t2 / 3.0 + t2 * t2 / 5.0) / w
    } else {
        s.atan2(w) / s
    }
}

/// Inverse of [`quat_log`]: `(cos‖v‖, sin‖v‖·v/‖v‖)`.
pub fn quat_exp(v: Vec3) -> UnitQuaternion {
    let n = norm3(v);
    let (w, k) = if n < 1e-6 {
        // cos n ≈ 1 − n²/2, sin n / n ≈ 1 − n²/6
        (1.0 - n * n / 2.0, 1.0 - n * n / 6.0)
    } else {
        (n.cos(), n.sin() / n)
    };
    let raw = [w, k * v[0], k * v[1], k * v[2]];
    let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
    UnitQuaternion {
        w: raw[0] / norm,
        x: raw[1] / norm,
        y: raw[2] / norm,
        z: raw[3] / norm,
    }
}

/// Rotation angle between two orientations in degrees, in `[0, 180]`.
///
/// Evaluated as `2·atan2(‖r_v‖, |r_w|)` on the relative rotation
/// `r = conj(a)·b`, which equals `2·acos(|⟨a, b⟩|)` for unit input and is
/// exactly zero for `b = ±a`.
pub fn angular_error_deg(a: UnitQuaternion, b: UnitQuaternion) -> f64 {
    let rw = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
    let rv = [
        a.w * b.x - b.w * a.x - (a.y * b.z - a.z * b.y),
        a.w * b.y - b.w * a.y - (a.z * b.x - a.x * b.z),
        a.w * b.z - b.w * a.z - (a.x * b.y - a.y * b.x),
    ];
    2.0 * norm3(rv).atan2(rw.abs()).to_degrees()
}

/// Axis-aligned box split into equal cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub cells: [usize; 3],
    pub cell_size: Vec3,
}

impl GridSpec {
    /// Near-cubic cells with edge `(volume / n)^(1/3)`, rounded per axis.
    pub fn build(min: Vec3, max: Vec3, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Geometry("grid cell count must be at least 1".into()));
        }
        let extent = extent_of(min, max)?;
        let volume = extent[0] * extent[1] * extent[2];
        let side = (volume / n as f64).cbrt();
        let mut cells = [1usize; 3];
        for i in 0..3 {
            cells[i] = ((extent[i] / side).round() as usize).max(1);
        }
        Self::with_cells(min, max, cells)
    }

    pub fn with_cells(min: Vec3, max: Vec3, cells: [usize; 3]) -> Result<Self> {
        let extent = extent_of(min, max)?;
        if cells.contains(&0) {
            return Err(Error::Geometry("cells per axis must be at least 1".into()));
        }
        let cell_size = [
            extent[0] / cells[0] as f64,
            extent[1] / cells[1] as f64,
            extent[2] / cells[2] as f64,
        ];
        Ok(Self {
            min,
            max,
            cells,
            cell_size,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    /// Index of the cell containing `p`, after clamping `p` into the box.
    pub fn cell_index(&self, p: Vec3) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let c = p[i].clamp(self.min[i], self.max[i]);
            let f = ((c - self.min[i]) / self.cell_size[i]).floor();
            idx[i] = (f.max(0.0) as usize).min(self.cells[i] - 1);
        }
        idx
    }

    pub fn center_of(&self, idx: [usize; 3]) -> Vec3 {
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = self.min[i] + (idx[i] as f64 + 0.5) * self.cell_size[i];
        }
        c
    }

    /// Center of the cell containing `p`.
    pub fn center(&self, p: Vec3) -> Vec3 {
        self.center_of(self.cell_index(p))
    }

    /// All cell centers, x fastest.
    pub fn centers(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.cell_count());
        for k in 0..self.cells[2] {
            for j in 0..self.cells[1] {
                for i in 0..self.cells[0] {
                    out.push(self.center_of([i, j, k]));
                }
            }
        }
        out
    }
}

fn extent_of(min: Vec3, max: Vec3) -> Result<Vec3> {
    let e = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    if e.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::Geometry(format!("degenerate bounding box {min:?}..{max:?}")));
    }
    Ok(e)
}

pub fn grid_center(spec: &GridSpec, p: Vec3) -> Vec3 {
    spec.center(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn normalize_examples() {
        assert_eq!(
            UnitQuaternion::normalize([2., 0., 0., 0.]).unwrap(),
            UnitQuaternion::IDENTITY
        );
        assert_eq!(
            UnitQuaternion::normalize([-1., 0., 0., 0.]).unwrap(),
            UnitQuaternion::IDENTITY
        );
        let q = UnitQuaternion::normalize([1., 1., 1., 1.]).unwrap();
        assert_eq!(q.to_array(), [0.5; 4]);
        assert!(matches!(
            UnitQuaternion::normalize([0., 0., 0., 1e-13]),
            Err(Error::DegenerateQuaternion(_))
        ));
    }

    #[test]
    fn log_examples() {
        assert_eq!(quat_log(UnitQuaternion::IDENTITY), [0.0; 3]);
        let qx = UnitQuaternion::normalize([FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0., 0.]).unwrap();
        let l = quat_log(qx);
        assert!((l[0] - FRAC_PI_4).abs() < 1e-15 && l[1] == 0.0 && l[2] == 0.0);
        // arccos form agrees
        assert!((qx.w.clamp(-1.0, 1.0).acos() - l[0]).abs() < 1e-15);
        let neg = UnitQuaternion::normalize(qx.negated()).unwrap();
        assert_eq!(quat_log(neg), l);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(quat_exp([0.0; 3]), UnitQuaternion::IDENTITY);
        let q = quat_exp([FRAC_PI_2, 0., 0.]);
        assert!(q.w.abs() < 1e-15 && (q.x - 1.0).abs() < 1e-15);
        let tiny = quat_exp([1e-8, 0., 0.]);
        assert!((tiny.x - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn angular_error_examples() {
        let id = UnitQuaternion::IDENTITY;
        assert_eq!(angular_error_deg(id, id), 0.0);
        let qx = UnitQuaternion::from_axis_angle([1., 0., 0.], FRAC_PI_2).unwrap();
        let flipped = UnitQuaternion {
            w: -qx.w,
            x: -qx.x,
            y: -qx.y,
            z: -qx.z,
        };
        assert_eq!(angular_error_deg(qx, flipped), 0.0);
        assert!((angular_error_deg(id, qx) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_matrix_roundtrip() {
        let q = UnitQuaternion::from_axis_angle([0.3, -1.0, 0.4], 2.7).unwrap();
        let back = UnitQuaternion::from_rotation_matrix(&q.to_rotation_matrix()).unwrap();
        assert!(angular_error_deg(q, back) < 1e-6);
        assert!((q.dot(back) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = Pose::new(
            [1., 2., 3.],
            UnitQuaternion::from_axis_angle([0., 0., 1.], 0.8).unwrap(),
        )
        .unwrap();
        let back = p.inverse().inverse();
        for i in 0..3 {
            assert!((back.position[i] - p.position[i]).abs() < 1e-12);
        }
        assert!(angular_error_deg(back.orientation, p.orientation) < 1e-6);
    }

    #[test]
    fn grid_build_examples() {
        let unit = GridSpec::build([0.; 3], [1.; 3], 1).unwrap();
        assert_eq!(unit.cells, [1, 1, 1]);
        let cube = GridSpec::build([0.; 3], [2.; 3], 8).unwrap();
        assert_eq!(cube.cells, [2, 2, 2]);
        assert_eq!(cube.cell_size, [1.0; 3]);
        let bar = GridSpec::build([0.; 3], [4., 1., 1.], 4).unwrap();
        assert_eq!(bar.cells, [4, 1, 1]);
        assert!(GridSpec::build([0.; 3], [1., 0., 1.], 4).is_err());
        assert!(GridSpec::build([0.; 3], [1.; 3], 0).is_err());
    }

    #[test]
    fn grid_center_examples() {
        let unit = GridSpec::build([0.; 3], [1.; 3], 1).unwrap();
        assert_eq!(grid_center(&unit, [0.1, 0.9, 0.4]), [0.5; 3]);
        let cube = GridSpec::build([0.; 3], [2.; 3], 8).unwrap();
        assert_eq!(grid_center(&cube, [0.3; 3]), [0.5; 3]);
        assert_eq!(grid_center(&cube, [-5.; 3]), [0.5; 3]);
        assert_eq!(grid_center(&cube, [2.0; 3]), [1.5; 3]);
        assert_eq!(cube.centers().len(), 8);
    }
}
