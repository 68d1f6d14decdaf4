//! Pinhole cameras with world-to-camera extrinsics (COLMAP convention:
//! `x_cam = R · x_world + t`, pixel centres at half-integer coordinates).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross, dot, mat3_mul, mat3_transpose, mat3_vec, normalize, sub, Mat3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` for a rotation matrix.
pub fn matrix_to_quat(m: &Mat3) -> [f64; 4] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            ));
        }
        let rtr = mat3_mul(&mat3_transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                if (v - e).abs() > 1e-6 {
                    return bad("rotation is not orthonormal".into());
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with `up` roughly vertical.
    /// Camera axes: +x right, +y down, +z forward.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let fwd = sub(target, eye);
        if dot(fwd, fwd) < 1e-18 {
            return Err(Error::DegenerateCamera("eye coincides with target".into()));
        }
        let z = normalize(fwd);
        let x_raw = cross(z, up);
        if dot(x_raw, x_raw) < 1e-18 {
            return Err(Error::DegenerateCamera("view direction parallel to up".into()));
        }
        let x = normalize(x_raw);
        let y = cross(z, x);
        let rotation = [x, y, z];
        let t = mat3_vec(&rotation, eye).map(|v| -v);
        Ok(Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: t,
            width,
            height,
        })
    }

    pub fn quaternion(&self) -> [f64; 4] {
        matrix_to_quat(&self.rotation)
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat3_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        mat3_vec(&mat3_transpose(&self.rotation), self.translation).map(|v| -v)
    }

    /// World-space unit ray direction through pixel coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(mat3_vec(&mat3_transpose(&self.rotation), d_cam))
    }

    /// Same pose, intrinsics scaled for a `factor`× larger image.
    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
            ..self.clone()
        }
    }
}

/// Serialized camera record used by manifests and camera path files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera, with_size: bool) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            qvec: cam.quaternion(),
            tvec: cam.translation,
            width: with_size.then_some(cam.width),
            height: with_size.then_some(cam.height),
        }
    }

    /// Build a camera; `size` is used when the record carries no size.
    pub fn to_camera(&self, size: Option<(usize, usize)>) -> Result<Camera> {
        let (width, height) = match (self.width, self.height, size) {
            (Some(w), Some(h), _) => (w, h),
            (_, _, Some(s)) => s,
            _ => return Err(Error::InvalidArgument("camera record without image size".into())),
        };
        let n = self.qvec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!("non-unit quaternion (norm {n})")));
        }
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: quat_to_matrix(self.qvec.map(|v| v / n)),
            translation: self.tvec,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at([3.0, -1.0, 2.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 50.0, 64, 48).unwrap();
        cam.validate().unwrap();
        let p = cam.world_to_camera([0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        let c = cam.center();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        for q in [[1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5], [0.9, -0.1, 0.3, 0.2]] {
            let n = (q.iter().map(|v: &f64| v * v).sum::<f64>()).sqrt();
            let q = q.map(|v| v / n);
            let back = matrix_to_quat(&quat_to_matrix(q));
            for (a, b) in q.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_look_at() {
        assert!(matches!(
            Camera::look_at([0.0; 3], [0.0; 3], [0.0, 1.0, 0.0], 10.0, 8, 8),
            Err(Error::DegenerateCamera(_))
        ));
    }
}
