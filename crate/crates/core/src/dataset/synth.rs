//! Analytic ray-cast scenes of spheres and boxes with known ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{apply_degradation, points_to_colmap_text, write_colmap_text, DegradationSpec, SceneManifest, ViewEntry};
use crate::error::{Error, Result};
use crate::gsplat::{Gaussian3D, GaussianScene};
use crate::image::RgbImage;
use crate::linalg::{dot, normalize, sub};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, color: [f64; 3] },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3], color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Checkerboard floor at this height, if any.
    pub ground_y: Option<f64>,
    pub ground_colors: [[f64; 3]; 2],
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub look_at: [f64; 3],
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Surface samples per primitive in the ground-truth gaussian scene.
    pub truth_samples: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            primitives: vec![
                Primitive::Sphere { center: [0.0, 0.45, 0.0], radius: 0.45, color: [0.85, 0.2, 0.15] },
                Primitive::Box { min: [0.35, 0.0, -0.6], max: [0.85, 0.5, -0.1], color: [0.2, 0.6, 0.85] },
                Primitive::Sphere { center: [-0.55, 0.25, 0.4], radius: 0.25, color: [0.9, 0.8, 0.25] },
            ],
            background: [0.55, 0.6, 0.7],
            ground_y: Some(0.0),
            ground_colors: [[0.75, 0.75, 0.7], [0.35, 0.3, 0.3]],
            light_dir: [0.4, 1.0, -0.3],
            ambient: 0.3,
            ring_radius: 3.0,
            ring_height: 1.3,
            look_at: [0.0, 0.3, 0.0],
            focal_factor: 1.1,
            truth_samples: 200,
        }
    }
}

impl SynthSpec {
    /// A second layout with different shapes, colours and floor, used as the
    /// scene the base model has never seen.
    pub fn unseen() -> Self {
        Self {
            primitives: vec![
                Primitive::Box { min: [-0.7, 0.0, -0.3], max: [-0.1, 0.7, 0.3], color: [0.3, 0.75, 0.35] },
                Primitive::Sphere { center: [0.45, 0.35, 0.2], radius: 0.35, color: [0.8, 0.45, 0.8] },
                Primitive::Sphere { center: [0.1, 0.2, -0.6], radius: 0.2, color: [0.95, 0.6, 0.2] },
            ],
            background: [0.7, 0.65, 0.55],
            ground_colors: [[0.6, 0.7, 0.75], [0.25, 0.3, 0.35]],
            ..Self::default()
        }
    }

    pub fn single_sphere(color: [f64; 3]) -> Self {
        Self {
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 0.5, color }],
            background: [0.0; 3],
            ground_y: None,
            look_at: [0.0; 3],
            ring_height: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub ids: Vec<String>,
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
    pub truth: GaussianScene,
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    color: [f64; 3],
}

fn intersect(prim: &Primitive, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    match *prim {
        Primitive::Sphere { center, radius, color } => {
            let oc = sub(o, center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > 1e-9 { -b - s } else { -b + s };
            if t <= 1e-9 {
                return None;
            }
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            Some(Hit { t, normal: normalize(sub(p, center)), color })
        }
        Primitive::Box { min, max, color } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for i in 0..3 {
                if d[i].abs() < 1e-15 {
                    if o[i] < min[i] || o[i] > max[i] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis = i;
                }
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            let mut normal = [0.0; 3];
            normal[axis] = -d[axis].signum();
            Some(Hit { t: t0, normal, color })
        }
    }
}

fn shade(spec: &SynthSpec, light: [f64; 3], hit: &Hit) -> [f64; 3] {
    let diffuse = dot(hit.normal, light).max(0.0);
    let k = spec.ambient + (1.0 - spec.ambient) * diffuse;
    hit.color.map(|c| (c * k).clamp(0.0, 1.0))
}

fn trace(spec: &SynthSpec, light: [f64; 3], o: [f64; 3], d: [f64; 3]) -> [f64; 3] {
    let mut best: Option<Hit> = None;
    for p in &spec.primitives {
        if let Some(h) = intersect(p, o, d) {
            if best.as_ref().is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        }
    }
    if let Some(gy) = spec.ground_y {
        if d[1].abs() > 1e-12 {
            let t = (gy - o[1]) / d[1];
            if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.t) {
                let (x, z) = (o[0] + t * d[0], o[2] + t * d[2]);
                let cell = ((x * 2.0).floor() + (z * 2.0).floor()).rem_euclid(2.0) as usize;
                best = Some(Hit { t, normal: [0.0, 1.0, 0.0], color: spec.ground_colors[cell] });
            }
        }
    }
    match best {
        Some(h) => shade(spec, light, &h),
        None => spec.background,
    }
}

/// Render `spec` from `cam` with 2×2 supersampling.
pub fn ray_cast(spec: &SynthSpec, cam: &Camera) -> RgbImage {
    let light = normalize(spec.light_dir);
    let o = cam.center();
    RgbImage::from_fn(cam.width, cam.height, |x, y| {
        let mut acc = [0.0; 3];
        for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let c = trace(spec, light, o, cam.ray_direction(x as f64 + sx, y as f64 + sy));
            for i in 0..3 {
                acc[i] += 0.25 * c[i];
            }
        }
        acc
    })
}

/// `n` cameras evenly spaced on a horizontal ring, starting at `phase` radians.
pub fn camera_ring(spec: &SynthSpec, n: usize, resolution: (usize, usize), phase: f64) -> Result<Vec<Camera>> {
    if spec.ring_radius <= 0.0 {
        return Err(Error::DegenerateCamera(format!("ring radius {} must be positive", spec.ring_radius)));
    }
    let (w, h) = resolution;
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = [
                spec.look_at[0] + spec.ring_radius * a.cos(),
                spec.ring_height,
                spec.look_at[2] + spec.ring_radius * a.sin(),
            ];
            Camera::look_at(eye, spec.look_at, [0.0, 1.0, 0.0], spec.focal_factor * w as f64, w, h)
        })
        .collect()
}

/// Shaded surface samples as small isotropic gaussians.
fn truth_gaussians(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> GaussianScene {
    let light = normalize(spec.light_dir);
    let mut gaussians = Vec::new();
    for prim in &spec.primitives {
        for _ in 0..spec.truth_samples {
            let (p, normal, color, size) = match *prim {
                Primitive::Sphere { center, radius, color } => {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    let n = [r * phi.cos(), z, r * phi.sin()];
                    let p = [0, 1, 2].map(|i| center[i] + radius * n[i]);
                    (p, n, color, radius)
                }
                Primitive::Box { min, max, color } => {
                    let face = rng.random_range(0..6);
                    let axis = face / 2;
                    let mut p = [0, 1, 2].map(|i| rng.random_range(min[i]..max[i]));
                    p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
                    let mut n = [0.0; 3];
                    n[axis] = if face % 2 == 0 { -1.0 } else { 1.0 };
                    let size = (0..3).map(|i| max[i] - min[i]).fold(0.0, f64::max);
                    (p, n, color, size)
                }
            };
            let c = shade(spec, light, &Hit { t: 0.0, normal, color });
            let scale = size * (4.0 / spec.truth_samples as f64).sqrt();
            gaussians.push(Gaussian3D::isotropic(p, scale, 0.9, c));
        }
    }
    GaussianScene { gaussians, background: spec.background }
}

/// Generate `n_views` ring renders of `spec` and its ground-truth gaussians.
pub fn synth_scene(spec: &SynthSpec, n_views: usize, resolution: (usize, usize), seed: u64) -> Result<SynthScene> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 views, got {n_views}")));
    }
    if spec.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene needs at least one primitive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU / n_views as f64);
    let cameras = camera_ring(spec, n_views, resolution, phase)?;
    let images = cameras.iter().map(|c| ray_cast(spec, c)).collect();
    let ids = (0..n_views).map(|i| format!("view_{i:03}")).collect();
    let truth = truth_gaussians(spec, &mut rng);
    Ok(SynthScene { ids, cameras, images, truth })
}

/// Write a scene directory with normal renders, degraded low-light copies
/// (noise seeded per view), COLMAP poses and `manifest.json`.
pub fn write_scene(root: &Path, scene: &SynthScene, degradation: &DegradationSpec) -> Result<SceneManifest> {
    let mut views = Vec::with_capacity(scene.ids.len());
    for (i, ((id, cam), img)) in scene.ids.iter().zip(&scene.cameras).zip(&scene.images).enumerate() {
        let low = apply_degradation(img, &degradation.with_seed(degradation.seed.wrapping_add(i as u64)))?;
        let low_path = root.join("low").join(format!("{id}.png"));
        let normal_path = root.join("normal").join(format!("{id}.png"));
        low.save_png(&low_path)?;
        img.save_png(&normal_path)?;
        views.push(ViewEntry {
            id: id.clone(),
            low: low_path,
            normal: normal_path,
            camera: cam.clone(),
        });
    }
    let named: Vec<_> = views.iter().map(|v| (format!("{}.png", v.id), v.camera.clone())).collect();
    write_colmap_text(&root.join("colmap"), &named)?;
    let points: Vec<_> = scene.truth.gaussians.iter().map(|g| (g.mean, g.color)).collect();
    let pp = root.join("colmap").join("points3D.txt");
    std::fs::write(&pp, points_to_colmap_text(&points)).map_err(|e| Error::io(&pp, e))?;
    let manifest = SceneManifest {
        scene_name: root
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("scene")
            .to_string(),
        resolution: scene.images[0].dims(),
        views,
    };
    // manifest.json stores paths relative to the scene directory
    let mut stored = manifest.clone();
    for v in &mut stored.views {
        v.low = v.low.strip_prefix(root).unwrap_or(&v.low).to_path_buf();
        v.normal = v.normal.strip_prefix(root).unwrap_or(&v.normal).to_path_buf();
    }
    let path = root.join("manifest.json");
    std::fs::write(&path, stored.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_sphere_is_a_red_disc() {
        let spec = SynthSpec::single_sphere([1.0, 0.0, 0.0]);
        let s = synth_scene(&spec, 4, (32, 32), 1).unwrap();
        assert_eq!(s.images.len(), 4);
        for img in &s.images {
            let c = img.pixel(16, 16);
            assert!(c[0] > 0.2 && c[1] == 0.0 && c[2] == 0.0, "{c:?}");
            assert_eq!(img.pixel(0, 0), [0.0; 3]);
        }
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(synth_scene(&spec, 3, (16, 12), 7).unwrap(), synth_scene(&spec, 3, (16, 12), 7).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        let spec = SynthSpec { ring_radius: 0.0, ..SynthSpec::default() };
        let err = synth_scene(&spec, 4, (16, 16), 0).unwrap_err();
        assert!(err.to_string().starts_with("degenerate camera placement"), "{err}");
        assert!(synth_scene(&SynthSpec::default(), 1, (16, 16), 0).is_err());
    }
}
