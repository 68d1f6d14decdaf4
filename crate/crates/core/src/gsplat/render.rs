//! Front-to-back alpha compositing of projected gaussians, with the
//! matching reverse pass.

use std::cmp::Ordering;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsplat::project::{eigenvalues2, project, project_with_jacobian};
use crate::gsplat::{Gaussian3D, GaussianScene, PARAMS_PER_GAUSSIAN};
use crate::image::RgbImage;
use crate::tensor::Tensor;

/// Contributions with alpha below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: RgbImage,
    /// Accumulated opacity `1 − T` per pixel, row-major.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Splat {
    /// `(alpha, gaussian falloff, dx, dy)` at the centre of pixel `(x, y)`.
    #[inline]
    fn eval(&self, x: usize, y: usize) -> Option<(f64, f64, f64, f64)> {
        let dx = x as f64 + 0.5 - self.mean[0];
        let dy = y as f64 + 0.5 - self.mean[1];
        let power = -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy;
        if power > 0.0 {
            return None;
        }
        let falloff = power.exp();
        let alpha = self.opacity * falloff;
        (alpha >= ALPHA_MIN).then_some((alpha, falloff, dx, dy))
    }
}

fn param_order(a: &Gaussian3D, b: &Gaussian3D) -> Ordering {
    a.to_flat()
        .iter()
        .zip(b.to_flat().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Visible splats sorted front to back. Ties in depth are broken by the
/// parameters themselves so the order never depends on list position.
fn prepare(scene: &GaussianScene, cam: &Camera) -> Result<Vec<Splat>> {
    if scene.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty scene".into()));
    }
    if let Some(i) = scene.first_non_finite() {
        return Err(Error::NonFinite(format!("gaussian {i} has a non-finite parameter")));
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut splats = Vec::with_capacity(scene.len());
    for (index, g) in scene.gaussians.iter().enumerate() {
        let Some(p) = project(g, cam) else { continue };
        let opacity = g.opacity();
        if opacity * 255.0 <= 1.0 {
            continue;
        }
        // Beyond this radius alpha < 1/255 in every direction.
        let (lmax, _) = eigenvalues2(p.cov2d);
        let radius = (2.0 * (255.0 * opacity).ln() * lmax).sqrt();
        let fx0 = (p.mean2d[0] - radius - 0.5).ceil().max(0.0);
        let fx1 = (p.mean2d[0] + radius - 0.5).floor().min(w - 1.0);
        let fy0 = (p.mean2d[1] - radius - 0.5).ceil().max(0.0);
        let fy1 = (p.mean2d[1] + radius - 0.5).floor().min(h - 1.0);
        if !(fx0 <= fx1 && fy0 <= fy1) {
            continue;
        }
        splats.push(Splat {
            index,
            mean: p.mean2d,
            conic: p.conic,
            opacity,
            color: g.color,
            depth: p.depth,
            x0: fx0 as usize,
            x1: fx1 as usize,
            y0: fy0 as usize,
            y1: fy1 as usize,
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| param_order(&scene.gaussians[a.index], &scene.gaussians[b.index]))
    });
    Ok(splats)
}

struct Composite {
    color: Vec<f64>,
    transmittance: Vec<f64>,
}

fn composite(splats: &[Splat], width: usize, height: usize) -> Composite {
    let mut color = vec![0.0; width * height * 3];
    let mut transmittance = vec![1.0; width * height];
    for s in splats {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let Some((alpha, ..)) = s.eval(x, y) else { continue };
                let p = y * width + x;
                let t = transmittance[p];
                for c in 0..3 {
                    color[p * 3 + c] += s.color[c] * alpha * t;
                }
                transmittance[p] = t * (1.0 - alpha);
            }
        }
    }
    Composite { color, transmittance }
}

pub fn render(scene: &GaussianScene, cam: &Camera) -> Result<RenderOutput> {
    let splats = prepare(scene, cam)?;
    let (w, h) = (cam.width, cam.height);
    let Composite { mut color, transmittance } = composite(&splats, w, h);
    for (p, &t) in transmittance.iter().enumerate() {
        for c in 0..3 {
            color[p * 3 + c] += t * scene.background[c];
        }
    }
    Ok(RenderOutput {
        image: RgbImage::new(w, h, color),
        alpha: transmittance.iter().map(|t| 1.0 - t).collect(),
    })
}

/// Gradients of a scalar loss with respect to every gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradient {
    /// Flat layout matching [`GaussianScene::to_flat`].
    pub params: Vec<f64>,
    /// Norm of the screen-space mean gradient per gaussian (densification signal).
    pub screen_mean_norm: Vec<f64>,
    pub background: [f64; 3],
}

/// Render and back-propagate `d_image` (`[3, h, w]`, the loss gradient with
/// respect to the rendered image) to the scene parameters.
pub fn render_backward(scene: &GaussianScene, cam: &Camera, d_image: &Tensor) -> Result<SceneGradient> {
    let splats = prepare(scene, cam)?;
    let (w, h) = (cam.width, cam.height);
    assert_eq!(d_image.shape(), &[3, h, w], "image gradient shape");
    let hw = w * h;
    let dc = |p: usize, c: usize| d_image.data()[c * hw + p];
    let Composite { transmittance: t_final, .. } = composite(&splats, w, h);

    let mut background = [0.0; 3];
    let mut acc = vec![0.0; hw * 3];
    let mut trans = t_final.clone();
    for p in 0..hw {
        for c in 0..3 {
            background[c] += dc(p, c) * t_final[p];
            acc[p * 3 + c] = t_final[p] * scene.background[c];
        }
    }

    let n = scene.len();
    let mut params = vec![0.0; n * PARAMS_PER_GAUSSIAN];
    let mut screen_mean_norm = vec![0.0; n];
    for s in splats.iter().rev() {
        // d/d(mean2d.x, mean2d.y, conic.xx, conic.xy, conic.yy)
        let mut d_screen = [0.0; 5];
        let mut d_opacity = 0.0;
        let mut d_color = [0.0; 3];
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let Some((alpha, falloff, dx, dy)) = s.eval(x, y) else { continue };
                let p = y * w + x;
                let one_minus = 1.0 - alpha;
                let t_before = trans[p] / one_minus;
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    let g = dc(p, c);
                    d_color[c] += g * alpha * t_before;
                    d_alpha += g * (s.color[c] * t_before - acc[p * 3 + c] / one_minus);
                    acc[p * 3 + c] += s.color[c] * alpha * t_before;
                }
                trans[p] = t_before;
                d_opacity += d_alpha * falloff;
                let d_power = d_alpha * alpha;
                d_screen[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                d_screen[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                d_screen[2] += -0.5 * dx * dx * d_power;
                d_screen[3] += -dx * dy * d_power;
                d_screen[4] += -0.5 * dy * dy * d_power;
            }
        }
        let g = &scene.gaussians[s.index];
        let jet = project_with_jacobian(g, cam).expect("visible splat projects");
        let outs = [jet.mean2d[0], jet.mean2d[1], jet.conic[0], jet.conic[1], jet.conic[2]];
        let base = s.index * PARAMS_PER_GAUSSIAN;
        for (o, &dv) in outs.iter().zip(&d_screen) {
            for k in 0..10 {
                params[base + k] += dv * o.d[k];
            }
        }
        let op = s.opacity;
        params[base + 10] += d_opacity * op * (1.0 - op);
        params[base + 11..base + 14].copy_from_slice(&d_color);
        screen_mean_norm[s.index] = (d_screen[0].powi(2) + d_screen[1].powi(2)).sqrt();
    }
    Ok(SceneGradient {
        params,
        screen_mean_norm,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::Gaussian3D;

    pub(crate) fn front_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: w,
            height: h,
        }
    }

    #[test]
    fn empty_region_shows_background() {
        let scene = GaussianScene {
            gaussians: vec![Gaussian3D::isotropic([5.0, 5.0, 3.0], 0.01, 0.9, [1.0, 0.0, 0.0])],
            background: [0.1, 0.2, 0.3],
        };
        let out = render(&scene, &front_camera(16, 16, 20.0)).unwrap();
        assert!(out.image.data().chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn empty_scene_and_non_finite_rejected() {
        let cam = front_camera(8, 8, 10.0);
        let empty = GaussianScene { gaussians: vec![], background: [0.0; 3] };
        assert!(render(&empty, &cam).is_err());
        let mut g = Gaussian3D::isotropic([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]);
        g.color[1] = f64::NAN;
        let bad = GaussianScene { gaussians: vec![g.clone(), g], background: [0.0; 3] };
        let err = render(&bad, &cam).unwrap_err();
        assert!(err.to_string().contains("gaussian 0"), "{err}");
    }

    #[test]
    fn energy_bound() {
        let gaussians = (0..12)
            .map(|i| {
                let f = i as f64;
                Gaussian3D::isotropic([0.1 * f - 0.5, 0.05 * f - 0.3, 2.0 + 0.1 * f], 0.3, 0.95, [1.0, 1.0, 1.0])
            })
            .collect();
        let scene = GaussianScene { gaussians, background: [0.0; 3] };
        let out = render(&scene, &front_camera(16, 16, 20.0)).unwrap();
        assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        // With white gaussians on black, colour equals the accumulated weight.
        assert!(out.image.data().iter().all(|&v| v <= 1.0 + 1e-12));
    }
}
