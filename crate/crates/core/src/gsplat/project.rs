//! EWA projection of 3-D gaussians to screen-space 2-D gaussians.
//!
//! The projection is written once over [`Real`] and evaluated either on
//! plain `f64` (rendering) or on forward-mode [`Jet`]s carrying derivatives
//! with respect to the ten geometric parameters (mean, log-scale,
//! quaternion) for the backward pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::camera::Camera;
use crate::gsplat::Gaussian3D;

/// Isotropic screen-space variance added to every footprint, in px².
pub const BLUR_FLOOR: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn val(self) -> f64;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn val(self) -> f64 {
        self
    }
}

/// Value plus gradient with respect to `N` seeded inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Jet<N> {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Real for Jet<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self {
            v: e,
            d: self.d.map(|x| x * e),
        }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self {
            v: s,
            d: self.d.map(|x| x * 0.5 / s),
        }
    }
    fn val(self) -> f64 {
        self.v
    }
}

/// Screen-space footprint of one gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected<T> {
    pub mean2d: [T; 2],
    /// Symmetric 2-D covariance `(xx, xy, yy)`.
    pub cov2d: [T; 3],
    /// Inverse covariance `(xx, xy, yy)`.
    pub conic: [T; 3],
    pub depth: T,
}

/// Geometric parameters in the order `mean[3], log_scale[3], rotation[4]`.
pub fn project_generic<T: Real>(p: &[T; 10], cam: &Camera) -> Option<Projected<T>> {
    let c = T::cst;
    let r = &cam.rotation;
    let t = cam.translation;
    let cam_pt: [T; 3] = std::array::from_fn(|i| {
        c(r[i][0]) * p[0] + c(r[i][1]) * p[1] + c(r[i][2]) * p[2] + c(t[i])
    });
    let (x, y, z) = (cam_pt[0], cam_pt[1], cam_pt[2]);
    if z.val() <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = (c(cam.fx), c(cam.fy));
    let mean2d = [fx * x / z + c(cam.cx), fy * y / z + c(cam.cy)];

    // Rotation of the normalized quaternion.
    let (qw, qx, qy, qz) = (p[6], p[7], p[8], p[9]);
    let n = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    let (w, qx, qy, qz) = (qw / n, qx / n, qy / n, qz / n);
    let one = c(1.0);
    let two = c(2.0);
    let rg = [
        [one - two * (qy * qy + qz * qz), two * (qx * qy - w * qz), two * (qx * qz + w * qy)],
        [two * (qx * qy + w * qz), one - two * (qx * qx + qz * qz), two * (qy * qz - w * qx)],
        [two * (qx * qz - w * qy), two * (qy * qz + w * qx), one - two * (qx * qx + qy * qy)],
    ];
    let s = [p[3].exp(), p[4].exp(), p[5].exp()];
    // M = Rg · diag(s), so Σ = M Mᵀ.
    let m: [[T; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| rg[i][j] * s[j]));
    // Projection Jacobian J (2×3) times the camera rotation W.
    let z2 = z * z;
    let j = [
        [fx / z, c(0.0), -(fx * x) / z2],
        [c(0.0), fy / z, -(fy * y) / z2],
    ];
    let jw: [[T; 3]; 2] = std::array::from_fn(|i| {
        std::array::from_fn(|k| j[i][0] * c(r[0][k]) + j[i][1] * c(r[1][k]) + j[i][2] * c(r[2][k]))
    });
    // A = (J W) M, cov2d = A Aᵀ
    let a: [[T; 3]; 2] = std::array::from_fn(|i| {
        std::array::from_fn(|k| jw[i][0] * m[0][k] + jw[i][1] * m[1][k] + jw[i][2] * m[2][k])
    });
    let dot = |u: &[T; 3], v: &[T; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cxx = dot(&a[0], &a[0]) + c(BLUR_FLOOR);
    let cxy = dot(&a[0], &a[1]);
    let cyy = dot(&a[1], &a[1]) + c(BLUR_FLOOR);
    let det = cxx * cyy - cxy * cxy;
    let conic = [cyy / det, -cxy / det, cxx / det];
    Some(Projected {
        mean2d,
        cov2d: [cxx, cxy, cyy],
        conic,
        depth: z,
    })
}

fn geometry(g: &Gaussian3D) -> [f64; 10] {
    let mut p = [0.0; 10];
    p[0..3].copy_from_slice(&g.mean);
    p[3..6].copy_from_slice(&g.log_scale);
    p[6..10].copy_from_slice(&g.rotation);
    p
}

/// Project a gaussian; `None` when it lies at or behind the near plane.
pub fn project(g: &Gaussian3D, cam: &Camera) -> Option<Projected<f64>> {
    project_generic(&geometry(g), cam)
}

/// Projection with derivatives of every output w.r.t. the ten geometric parameters.
pub fn project_with_jacobian(g: &Gaussian3D, cam: &Camera) -> Option<Projected<Jet<10>>> {
    let p = geometry(g);
    let jets: [Jet<10>; 10] = std::array::from_fn(|i| Jet::var(p[i], i));
    project_generic(&jets, cam)
}

/// Eigenvalues of a symmetric 2×2 `(xx, xy, yy)`, largest first.
pub fn eigenvalues2(cov: [f64; 3]) -> (f64, f64) {
    let mid = 0.5 * (cov[0] + cov[2]);
    let rad = (0.25 * (cov[0] - cov[2]).powi(2) + cov[1] * cov[1]).sqrt();
    (mid + rad, mid - rad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera() -> Camera {
        Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 16.0,
            cy: 12.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: 32,
            height: 24,
        }
    }

    #[test]
    fn on_axis_maps_to_principal_point() {
        let g = Gaussian3D::isotropic([0.0, 0.0, 3.0], 0.1, 0.5, [1.0; 3]);
        let p = project(&g, &axis_camera()).unwrap();
        assert_eq!(p.mean2d, [16.0, 12.0]);
        assert_eq!(p.depth, 3.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]);
        assert!(project(&g, &axis_camera()).is_none());
        let g = Gaussian3D::isotropic([0.0, 0.0, NEAR_PLANE], 0.1, 0.5, [1.0; 3]);
        assert!(project(&g, &axis_camera()).is_none());
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        let mut g = Gaussian3D::isotropic([0.3, -0.2, 4.0], 0.2, 0.5, [1.0; 3]);
        g.log_scale = [-1.2, -1.6, -2.0];
        g.rotation = [0.8, 0.3, -0.2, 0.4];
        let cam = axis_camera();
        let jet = project_with_jacobian(&g, &cam).unwrap();
        let outputs = |p: &Projected<f64>| [p.mean2d[0], p.mean2d[1], p.conic[0], p.conic[1], p.conic[2]];
        let jo = [jet.mean2d[0], jet.mean2d[1], jet.conic[0], jet.conic[1], jet.conic[2]];
        let base = geometry(&g);
        for k in 0..10 {
            let h = 1e-6;
            let mut plus = base;
            plus[k] += h;
            let mut minus = base;
            minus[k] -= h;
            let fp = outputs(&project_generic(&plus, &cam).unwrap());
            let fm = outputs(&project_generic(&minus, &cam).unwrap());
            for o in 0..5 {
                let fd = (fp[o] - fm[o]) / (2.0 * h);
                let a = jo[o].d[k];
                assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "param {k} output {o}: {a} vs {fd}");
            }
        }
    }
}
