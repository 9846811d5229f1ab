//! Head pose and pinhole camera model.
//!
//! A pose maps head-frame points into camera coordinates, `x_cam = R·x + T`.
//! The camera looks down +z with x to the right and y down, so pixel
//! `(u, v)` sees direction `((u − cx)/fx, (v − cy)/fy, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPose {
    /// Row-major 3×3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Tracked 2D keypoints, stored but not consumed by rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square image with the head frame's unit cube comfortably in view at
    /// the default camera distance.
    pub fn for_resolution(resolution: u32) -> Self {
        let f = 1.3 * resolution as f64;
        let c = resolution as f64 / 2.0;
        Self { fx: f, fy: f, cx: c, cy: c, width: resolution, height: resolution }
    }
}

/// Per-frame camera: extrinsics from the head pose plus intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePose {
    #[serde(flatten)]
    pub pose: HeadPose,
    pub intrinsics: Intrinsics,
}

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl HeadPose {
    pub fn identity_at(distance: f64) -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, distance],
            keypoints: None,
        }
    }

    /// Rotation `Rz(roll)·Rx(pitch)·Ry(yaw)`, angles in radians.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let ry = [cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy];
        let rx = [1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp];
        let rz = [cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0];
        let rotation = mat_mul(&mat_mul(&rz, &rx), &ry);
        Self { rotation, translation, keypoints: None }
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6])
    }

    /// Checks `|det R − 1|` and `‖R·Rᵀ − I‖∞` against [`ORTHONORMAL_TOL`].
    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(Error::Invalid("pose contains non-finite values".into()));
        }
        let det = self.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Invalid(format!("pose rotation has determinant {det}")));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[i * 3 + k] * r[j * 3 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Invalid(format!(
                        "pose rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {v})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    /// Applies `Rᵀ` (camera direction to head frame).
    pub fn rotate_to_head(&self, d: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
            r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
        ]
    }

    /// Camera center in the head frame, `−Rᵀ·T`.
    pub fn camera_origin(&self) -> Vec3 {
        let o = self.rotate_to_head(self.translation);
        [-o[0], -o[1], -o[2]]
    }
}

impl FramePose {
    /// Pixel coordinates and depth of a head-frame point.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let c = self.pose.to_camera(p);
        let k = &self.intrinsics;
        (k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2])
    }

    /// Ray through the center of pixel `(px, py)`: head-frame origin and unit
    /// direction.
    pub fn pixel_ray(&self, px: u32, py: u32) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let d_cam = [
            (px as f64 + 0.5 - k.cx) / k.fx,
            (py as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        ];
        (self.pose.camera_origin(), normalize(self.pose.rotate_to_head(d_cam)))
    }
}

fn mat_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    out
}

/// Entry and exit distances of a ray through the cube `[−1, 1]³`, if it hits.
pub fn intersect_unit_cube(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-12 {
            if origin[k].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let a = (-1.0 - origin[k]) / dir[k];
        let b = (1.0 - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}
