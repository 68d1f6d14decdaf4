//! Photometric fitting of a gaussian scene to posed images.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsplat::render::{render, render_backward};
use crate::gsplat::{GaussianScene, PARAMS_PER_GAUSSIAN};
use crate::image::RgbImage;
use crate::loss::{image_loss_grad, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub lambda: f64,
    pub densify: bool,
    pub densify_every: usize,
    /// Mean screen-space positional gradient above which a gaussian is cloned.
    pub clone_threshold: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub lr_mean: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub seed: u64,
    /// Where to write the scene when the loss diverges.
    pub dump_dir: Option<PathBuf>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lambda: DEFAULT_LAMBDA,
            densify: true,
            densify_every: 200,
            clone_threshold: 2e-4,
            prune_opacity: 0.01,
            max_gaussians: 4000,
            lr_mean: 2e-3,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-2,
            seed: 0,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub losses: Vec<f64>,
    pub gaussian_counts: Vec<usize>,
}

/// Adam over the flat parameter vector with one learning rate per slot.
struct FlatAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl FlatAdam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lrs: &[f64; PARAMS_PER_GAUSSIAN]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            let lr = lrs[i % PARAMS_PER_GAUSSIAN];
            x[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + 1e-15);
        }
    }

    /// Keep state for `keep` (in order) then append zeroed state for `extra` gaussians.
    fn remap(&mut self, keep: &[usize], extra: usize) {
        let take = |buf: &[f64]| {
            let mut out: Vec<f64> = keep
                .iter()
                .flat_map(|&i| buf[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN].iter().copied())
                .collect();
            out.resize(out.len() + extra * PARAMS_PER_GAUSSIAN, 0.0);
            out
        };
        self.m = take(&self.m);
        self.v = take(&self.v);
    }
}

fn learning_rates(cfg: &OptimizeConfig) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut lrs = [0.0; PARAMS_PER_GAUSSIAN];
    lrs[0..3].fill(cfg.lr_mean);
    lrs[3..6].fill(cfg.lr_scale);
    lrs[6..10].fill(cfg.lr_rotation);
    lrs[10] = cfg.lr_opacity;
    lrs[11..14].fill(cfg.lr_color);
    lrs
}

fn diverged(scene: &GaussianScene, cfg: &OptimizeConfig, iter: usize, what: &str) -> Error {
    let mut msg = format!("{what} at iteration {iter}");
    if let Some(dir) = &cfg.dump_dir {
        let path = dir.join(format!("diverged_scene_{iter}.json"));
        let dumped = std::fs::create_dir_all(dir)
            .map_err(|e| e.to_string())
            .and_then(|_| serde_json::to_vec(scene).map_err(|e| e.to_string()))
            .and_then(|bytes| std::fs::write(&path, bytes).map_err(|e| e.to_string()));
        match dumped {
            Ok(()) => msg.push_str(&format!("; scene dumped to {}", path.display())),
            Err(e) => msg.push_str(&format!("; scene dump failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}

/// Fit `scene` to the posed `views` with stochastic single-view steps.
pub fn optimize(
    scene: &GaussianScene,
    views: &[(RgbImage, Camera)],
    cfg: &OptimizeConfig,
) -> Result<(GaussianScene, OptimizeReport)> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument(format!("optimization needs at least 2 views, got {}", views.len())));
    }
    for (img, cam) in views {
        if img.dims() != (cam.width, cam.height) {
            return Err(Error::Shape(format!(
                "view image {:?} does not match camera {}x{}",
                img.dims(),
                cam.width,
                cam.height
            )));
        }
    }
    let mut scene = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lrs = learning_rates(cfg);
    let mut adam = FlatAdam::new(scene.len() * PARAMS_PER_GAUSSIAN);
    let mut grad_accum = vec![0.0; scene.len()];
    let mut grad_hits = vec![0usize; scene.len()];
    let mut report = OptimizeReport {
        losses: Vec::with_capacity(cfg.iters),
        gaussian_counts: Vec::new(),
    };

    for iter in 0..cfg.iters {
        let (target, cam) = &views[rng.random_range(0..views.len())];
        let out = render(&scene, cam)?;
        let (loss, d_image) = image_loss_grad(&out.image, target, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(diverged(&scene, cfg, iter, "non-finite loss"));
        }
        report.losses.push(loss);
        let grad = render_backward(&scene, cam, &d_image)?;
        let mut flat = scene.to_flat();
        adam.step(&mut flat, &grad.params, &lrs);
        scene.set_flat(&flat);
        for g in &mut scene.gaussians {
            g.normalize_rotation();
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }
        if let Some(i) = scene.first_non_finite() {
            return Err(diverged(&scene, cfg, iter, &format!("gaussian {i} became non-finite")));
        }
        for (i, &n) in grad.screen_mean_norm.iter().enumerate() {
            if n > 0.0 {
                grad_accum[i] += n;
                grad_hits[i] += 1;
            }
        }

        let last = iter + 1 == cfg.iters;
        if cfg.densify && cfg.densify_every > 0 && (iter + 1) % cfg.densify_every == 0 && !last {
            densify(&mut scene, &mut adam, &grad_accum, &grad_hits, cfg);
            grad_accum = vec![0.0; scene.len()];
            grad_hits = vec![0; scene.len()];
            report.gaussian_counts.push(scene.len());
        }
    }
    Ok((scene, report))
}

fn densify(scene: &mut GaussianScene, adam: &mut FlatAdam, accum: &[f64], hits: &[usize], cfg: &OptimizeConfig) {
    let keep: Vec<usize> = (0..scene.len())
        .filter(|&i| scene.gaussians[i].opacity() >= cfg.prune_opacity)
        .collect();
    // Never prune the scene empty.
    let keep = if keep.is_empty() { vec![0] } else { keep };
    let room = cfg.max_gaussians.saturating_sub(keep.len());
    let mut candidates: Vec<(usize, f64)> = keep
        .iter()
        .filter(|&&i| hits[i] > 0)
        .map(|&i| (i, accum[i] / hits[i] as f64))
        .filter(|&(_, g)| g > cfg.clone_threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(room);

    let mut clones = Vec::with_capacity(candidates.len());
    for &(i, _) in &candidates {
        let mut c = scene.gaussians[i].clone();
        // Nudge along the largest axis so the pair can separate.
        let s = c.scale();
        let axis = (0..3).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap_or(0);
        c.mean[axis] += 0.5 * s[axis];
        clones.push(c);
    }
    let mut next: Vec<_> = keep.iter().map(|&i| scene.gaussians[i].clone()).collect();
    next.extend(clones);
    adam.remap(&keep, candidates.len());
    scene.gaussians = next;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::Gaussian3D;

    fn cam(z: f64) -> Camera {
        Camera {
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, z],
            width: 16,
            height: 16,
        }
    }

    #[test]
    fn count_constant_without_densify() {
        let scene = GaussianScene {
            gaussians: vec![Gaussian3D::isotropic([0.0, 0.0, 3.0], 0.5, 0.5, [0.5; 3]); 3],
            background: [0.0; 3],
        };
        let target = RgbImage::filled(16, 16, [0.8, 0.2, 0.1]);
        let views = vec![(target.clone(), cam(0.0)), (target, cam(0.5))];
        let cfg = OptimizeConfig { iters: 20, densify: false, ..Default::default() };
        let (out, report) = optimize(&scene, &views, &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(report.losses.len(), 20);
        for g in &out.gaussians {
            let n: f64 = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn needs_two_views() {
        let scene = GaussianScene {
            gaussians: vec![Gaussian3D::isotropic([0.0, 0.0, 3.0], 0.5, 0.5, [0.5; 3])],
            background: [0.0; 3],
        };
        let views = vec![(RgbImage::filled(16, 16, [0.0; 3]), cam(0.0))];
        assert!(optimize(&scene, &views, &OptimizeConfig::default()).is_err());
    }
}
