//! Orchestration: base training, few-shot adaptation, reconstruction,
//! evaluation and the ablation table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::Camera;
use crate::checkpoint::{Checkpoint, OPTIM_M, OPTIM_V};
use crate::config::{PipelineConfig, Setting};
use crate::dataset::{make_splits, parse_colmap_points, sample_fewshot, SceneManifest, SplitPolicy, SplitSpec};
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::gsplat::{init_scene, optimize, render, GaussianScene, InitMode};
use crate::head::{adapt_on_reflectance, AdaptReport, ReflectionHead};
use crate::image::RgbImage;
use crate::loss::l1_dssim;
use crate::metrics::{brightness_curve_along, psnr, MetricReport, ViewMetrics};
use crate::nn::{cosine_lr, Adam, Params};

pub fn build_enhancer(cfg: &PipelineConfig) -> Result<Enhancer> {
    Enhancer::new(cfg.retinex.clone(), cfg.unet.clone(), cfg.toggles.erid, cfg.toggles.isfga)
}

pub fn build_head(cfg: &PipelineConfig) -> ReflectionHead {
    ReflectionHead::new(cfg.head.hidden)
}

/// Freshly initialised enhancer weights for `cfg.seed`.
pub fn init_enhancer_params(cfg: &PipelineConfig, enhancer: &Enhancer) -> Params {
    let mut p = Params::new();
    enhancer.init(&mut p, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    p
}

pub fn init_head_params(cfg: &PipelineConfig, head: &ReflectionHead) -> Params {
    let mut p = Params::new();
    head.init(&mut p, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead));
    p
}

pub fn splits(cfg: &PipelineConfig, manifest: &SceneManifest) -> Result<SplitSpec> {
    make_splits(&manifest.view_ids(), SplitPolicy::Uniform, cfg.seed)
}

fn load_pairs(manifest: &SceneManifest, ids: &[String]) -> Result<Vec<(RgbImage, RgbImage)>> {
    ids.iter().map(|id| manifest.load_pair(id)).collect()
}

/// Mean PSNR of the enhancer output against the normal-light images.
pub fn validation_psnr(enhancer: &Enhancer, params: &Params, pairs: &[(RgbImage, RgbImage)]) -> Result<f64> {
    let mut total = 0.0;
    for (low, normal) in pairs {
        total += psnr(&enhancer.enhance(low, params)?.0, normal)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// `(step, mean validation PSNR)`; step 0 is the untrained network.
    pub validation: Vec<(u64, f64)>,
}

fn crop_pair(pair: &(RgbImage, RgbImage), crop: usize, rng: &mut ChaCha8Rng) -> (RgbImage, RgbImage) {
    let (w, h) = pair.0.dims();
    let (cw, ch) = (crop.min(w), crop.min(h));
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    (pair.0.crop(x0, y0, cw, ch), pair.1.crop(x0, y0, cw, ch))
}

fn training_checkpoint(cfg: &PipelineConfig, step: u64, params: &Params, adam: &Adam) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_params(cfg.to_toml_string()?, step, params);
    let (m, v) = adam.moments();
    ck.insert_section(OPTIM_M, m);
    ck.insert_section(OPTIM_V, v);
    Ok(ck)
}

/// Train decoupling and restoration on the preprocessing split of `manifest`
/// and write the checkpoint to `out`. Crops are drawn from a generator
/// reseeded every step, so a resumed run matches an uninterrupted one.
pub fn run_train_base(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    resume: Option<&Checkpoint>,
    out: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let enhancer = build_enhancer(cfg)?;
    let split = splits(cfg, manifest)?;
    let train = load_pairs(manifest, &split.preprocess_train)?;
    let val = load_pairs(manifest, &split.reconstruction)?;
    let (mut params, mut adam, start) = match resume {
        Some(ck) => {
            let empty = Params::new();
            let m = ck.section(OPTIM_M).unwrap_or(&empty);
            let v = ck.section(OPTIM_V).unwrap_or(&empty);
            (ck.params(), Adam::from_moments(ck.step, m, v), ck.step as usize)
        }
        None => (init_enhancer_params(cfg, &enhancer), Adam::new(), 0),
    };
    let total = cfg.train.iters;
    let mut losses = Vec::new();
    let mut validation = Vec::new();
    if start == 0 {
        let v = validation_psnr(&enhancer, &params, &val)?;
        info!("step 0: validation PSNR {v:.3} dB");
        validation.push((0, v));
    }
    for step in start..total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64));
        let pair = &train[rng.random_range(0..train.len())];
        let (low, normal) = crop_pair(pair, cfg.train.crop, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(low.to_tensor());
        let y = g.constant(normal.to_tensor());
        let vars = enhancer.forward(&mut g, &params, x)?;
        let loss = l1_dssim(&mut g, vars.output, y, cfg.train.lambda);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let ck = training_checkpoint(cfg, step as u64, &params, &adam)?;
            ck.save(out)?;
            return Err(Error::NonFinite(format!(
                "training loss at step {step}; last good checkpoint (step {step}) written to {}",
                out.display()
            )));
        }
        losses.push(value);
        let grads = g.backward(loss).named();
        adam.step(&mut params, &grads, cosine_lr(cfg.train.lr, step, total, cfg.train.lr_floor));
        let done = step + 1;
        if cfg.train.val_every > 0 && done % cfg.train.val_every == 0 || done == total {
            let v = validation_psnr(&enhancer, &params, &val)?;
            info!("step {done}: loss {value:.5}, validation PSNR {v:.3} dB");
            validation.push((done as u64, v));
        }
        if cfg.train.save_every > 0 && done % cfg.train.save_every == 0 && done < total {
            training_checkpoint(cfg, done as u64, &params, &adam)?.save(out)?;
        }
    }
    let checkpoint = training_checkpoint(cfg, total.max(start) as u64, &params, &adam)?;
    checkpoint.save(out)?;
    Ok(TrainOutcome {
        checkpoint,
        losses,
        validation,
    })
}

/// Enhance `images`, then apply the head when one is given.
pub fn enhance_all(
    enhancer: &Enhancer,
    params: &Params,
    head: Option<(&ReflectionHead, &Params)>,
    images: &[RgbImage],
) -> Result<Vec<RgbImage>> {
    images
        .iter()
        .map(|img| {
            let r0 = enhancer.enhance(img, params)?.0;
            Ok(match head {
                Some((h, hp)) => h.apply(&r0, hp),
                None => r0,
            })
        })
        .collect()
}

/// Fit the head on the few-shot views of `manifest` with the enhancer frozen.
pub fn adapt_scene(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    enhancer: &Enhancer,
    params: &Params,
) -> Result<(Params, AdaptReport)> {
    let split = splits(cfg, manifest)?;
    let fewshot = sample_fewshot(&split, cfg.adapt.k_views)?;
    let pairs = load_pairs(manifest, &fewshot)?;
    let head = build_head(cfg);
    let init = init_head_params(cfg, &head);
    let r0 = pairs
        .iter()
        .map(|(low, normal)| Ok((enhancer.enhance(low, params)?.0, normal.clone())))
        .collect::<Result<Vec<_>>>()?;
    adapt_on_reflectance(&head, &init, &r0, &cfg.adapt)
}

fn metric_report(cfg: &PipelineConfig, label: &str, ids: &[String], outputs: &[RgbImage], targets: &[RgbImage]) -> Result<MetricReport> {
    let per_view = ids
        .iter()
        .zip(outputs.iter().zip(targets))
        .map(|(id, (o, t))| ViewMetrics::compute(id, o, t))
        .collect::<Result<Vec<_>>>()?;
    let curves: Vec<Vec<f64>> = outputs.iter().map(|o| brightness_curve_along(o, cfg.eval.curve_axis)).collect();
    let curve = (0..curves.first().map_or(0, Vec::len))
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect();
    MetricReport::from_views(label, per_view, curve)
}

/// Per-stage wall-clock seconds, in execution order.
pub type Timings = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub scene: String,
    pub setting: String,
    pub seed: u64,
    pub adapted: bool,
    pub rows: Vec<MetricReport>,
    pub timings: Timings,
}

#[derive(Serialize)]
struct DeterministicReport<'a> {
    scene: &'a str,
    setting: &'a str,
    seed: u64,
    adapted: bool,
    rows: &'a [MetricReport],
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report without wall-clock fields; identical for identical runs.
    pub fn deterministic_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DeterministicReport {
            scene: &self.scene,
            setting: &self.setting,
            seed: self.seed,
            adapted: self.adapted,
            rows: &self.rows,
        })?)
    }

    pub fn row(&self, label: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Fit the head on the few-shot views (when the head is enabled).
    pub adapt: bool,
    /// Feed enhanced images to reconstruction; otherwise the raw low-light views.
    pub enhance: bool,
    pub reconstruct: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            adapt: true,
            enhance: true,
            reconstruct: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub report: PipelineReport,
    pub head: Option<Params>,
    pub scene: Option<GaussianScene>,
    pub renders: Vec<(String, RgbImage)>,
}

/// Initial gaussians: `colmap/points3D.txt` next to the poses when present,
/// otherwise uniform in a box around the origin sized by the cameras.
pub fn initial_scene(cfg: &PipelineConfig, root: Option<&Path>, cameras: &[Camera]) -> Result<GaussianScene> {
    let n = cfg.gsplat.init_gaussians.max(1);
    let points_file = root.map(|r| r.join("colmap").join("points3D.txt")).filter(|p| p.exists());
    let mode = match points_file {
        Some(path) => {
            let pts = parse_colmap_points(&path)?;
            let stride = (pts.len() as f64 / n as f64).max(1.0);
            let picked = (0..n.min(pts.len()))
                .map(|i| pts[(i as f64 * stride) as usize].0)
                .collect::<Vec<_>>();
            InitMode::FromPoints { points: picked, colors: None }
        }
        None => {
            let r = cameras
                .iter()
                .map(|c| {
                    let p = c.center();
                    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
                })
                .sum::<f64>()
                / cameras.len().max(1) as f64
                / 3.0;
            InitMode::RandomInBox { min: [-r; 3], max: [r; 3] }
        }
    };
    init_scene(&mode, n, cfg.seed, cfg.gsplat.background)
}

fn split_cameras(manifest: &SceneManifest, ids: &[String]) -> Result<Vec<Camera>> {
    ids.iter().map(|id| manifest.view(id).map(|v| v.camera.clone())).collect()
}

fn fit_scene(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    views: &[(RgbImage, Camera)],
    all_cameras: &[Camera],
) -> Result<GaussianScene> {
    let init = initial_scene(cfg, scene_root(manifest).as_deref(), all_cameras)?;
    let (fitted, rep) = optimize(&init, views, &cfg.gsplat.optimize)?;
    info!(
        "reconstruction: {} gaussians, loss {:.5}",
        fitted.len(),
        rep.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(fitted)
}

/// Fit gaussians to the `reconstruction \ test` views, enhanced with the
/// base weights and optional head, or raw when `base` is `None`.
pub fn reconstruct_scene(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    base: Option<&Params>,
    head_params: Option<&Params>,
) -> Result<GaussianScene> {
    let split = splits(cfg, manifest)?;
    let ids: Vec<String> = split
        .reconstruction
        .iter()
        .filter(|id| !split.test.contains(id))
        .cloned()
        .collect();
    let lows = ids
        .iter()
        .map(|id| manifest.load_pair(id).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let inputs = match base {
        Some(p) => {
            let enhancer = build_enhancer(cfg)?;
            let head = build_head(cfg);
            enhance_all(&enhancer, p, head_params.map(|hp| (&head, hp)), &lows)?
        }
        None => lows,
    };
    let views: Vec<(RgbImage, Camera)> = inputs.into_iter().zip(split_cameras(manifest, &ids)?).collect();
    fit_scene(cfg, manifest, &views, &split_cameras(manifest, &split.reconstruction)?)
}

fn scene_root(manifest: &SceneManifest) -> Option<PathBuf> {
    manifest
        .views
        .first()
        .and_then(|v| v.low.parent())
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
}

/// Few-shot adaptation, enhancement of the reconstruction views, gaussian
/// fitting on `reconstruction \ test` and evaluation on the test views.
///
/// Rows: `low` (raw input), `enhanced` (when enhancing) and `gs` (renders at
/// the test cameras, when reconstructing), all against normal-light images.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    base: &Params,
    opts: PipelineOptions,
    out_dir: Option<&Path>,
) -> Result<PipelineResult> {
    let mut timings: Timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Timings| {
        let s = clock.elapsed().as_secs_f64();
        info!("{name}: {s:.2} s");
        timings.push((name.to_string(), s));
        clock = Instant::now();
    };
    let split = splits(cfg, manifest)?;
    if split.test.is_empty() {
        return Err(Error::InvalidArgument(format!("scene {} has no test views", manifest.scene_name)));
    }
    let enhancer = build_enhancer(cfg)?;
    let head = build_head(cfg);
    let head_params = if opts.enhance && opts.adapt && cfg.toggles.rf_head {
        let (p, rep) = adapt_scene(cfg, manifest, &enhancer, base)?;
        info!("adaptation loss {:.5} -> {:.5}", rep.losses[0], rep.losses[rep.losses.len() - 1]);
        Some(p)
    } else {
        None
    };
    lap("adapt", &mut timings);

    let recon = load_pairs(manifest, &split.reconstruction)?;
    let lows: Vec<RgbImage> = recon.iter().map(|p| p.0.clone()).collect();
    let normals: Vec<RgbImage> = recon.iter().map(|p| p.1.clone()).collect();
    let inputs = if opts.enhance {
        enhance_all(&enhancer, base, head_params.as_ref().map(|p| (&head, p)), &lows)?
    } else {
        lows.clone()
    };
    lap("enhance", &mut timings);

    let test_idx: Vec<usize> = split
        .test
        .iter()
        .map(|id| split.reconstruction.iter().position(|r| r == id).expect("test is a subset"))
        .collect();
    let pick = |v: &[RgbImage]| test_idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let test_normals = pick(&normals);
    let mut rows = vec![metric_report(cfg, "low", &split.test, &pick(&lows), &test_normals)?];
    if opts.enhance {
        rows.push(metric_report(cfg, "enhanced", &split.test, &pick(&inputs), &test_normals)?);
    }

    let mut scene = None;
    let mut renders = Vec::new();
    if opts.reconstruct {
        let cameras = split_cameras(manifest, &split.reconstruction)?;
        let views: Vec<(RgbImage, Camera)> = (0..split.reconstruction.len())
            .filter(|i| !test_idx.contains(i))
            .map(|i| (inputs[i].clone(), cameras[i].clone()))
            .collect();
        let fitted = fit_scene(cfg, manifest, &views, &cameras)?;
        lap("reconstruct", &mut timings);
        for (&i, id) in test_idx.iter().zip(&split.test) {
            renders.push((id.clone(), render(&fitted, &cameras[i])?.image));
        }
        let imgs: Vec<RgbImage> = renders.iter().map(|r| r.1.clone()).collect();
        rows.push(metric_report(cfg, "gs", &split.test, &imgs, &test_normals)?);
        lap("render", &mut timings);
        scene = Some(fitted);
    }
    let report = PipelineReport {
        scene: manifest.scene_name.clone(),
        setting: cfg.setting().map_or_else(|| "custom".to_string(), |s| s.label().to_string()),
        seed: cfg.seed,
        adapted: head_params.is_some(),
        rows,
        timings,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, img) in &renders {
            img.save_png(&dir.join(format!("{id}.png")))?;
        }
        if opts.enhance {
            for (&i, id) in test_idx.iter().zip(&split.test) {
                inputs[i].save_png(&dir.join(format!("{id}_enhanced.png")))?;
            }
        }
        if let Some(s) = &scene {
            crate::checkpoint::save_scene(s, &dir.join("scene.json"))?;
        }
        let path = dir.join("report.json");
        std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(PipelineResult {
        report,
        head: head_params,
        scene,
        renders,
    })
}

/// Test-view metrics with the head disabled and enabled.
pub fn zero_shot_vs_adapted_report(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    base: &Params,
    head_params: &Params,
) -> Result<Vec<MetricReport>> {
    let split = splits(cfg, manifest)?;
    if split.test.is_empty() {
        return Err(Error::InvalidArgument(format!("scene {} has no test views", manifest.scene_name)));
    }
    let pairs = load_pairs(manifest, &split.test)?;
    let enhancer = build_enhancer(cfg)?;
    let head = build_head(cfg);
    let lows: Vec<RgbImage> = pairs.iter().map(|p| p.0.clone()).collect();
    let normals: Vec<RgbImage> = pairs.iter().map(|p| p.1.clone()).collect();
    let r0 = enhance_all(&enhancer, base, None, &lows)?;
    let adapted: Vec<RgbImage> = r0.iter().map(|r| head.apply(r, head_params)).collect();
    Ok(vec![
        metric_report(cfg, "zero_shot", &split.test, &r0, &normals)?,
        metric_report(cfg, "adapted", &split.test, &adapted, &normals)?,
    ])
}

pub fn checkpoint_path(dir: &Path, setting: Setting) -> PathBuf {
    dir.join(format!("setting_{}.ckpt", setting.label()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub report: MetricReport,
    pub seconds: f64,
}

impl AblationRow {
    pub fn parsed_setting(&self) -> Result<Setting> {
        self.setting.parse()
    }
}

/// One enhancement-metric row per setting on the reconstruction views of
/// `manifest`, using `setting_<label>.ckpt` from `ckpt_dir`. Settings with
/// the head are adapted on the few-shot views first.
pub fn run_ablation(
    cfg: &PipelineConfig,
    manifest: &SceneManifest,
    settings: &[Setting],
    ckpt_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let checkpoints = settings
        .iter()
        .map(|&s| {
            let path = checkpoint_path(ckpt_dir, s);
            if !path.exists() {
                return Err(Error::MissingCheckpoint(format!("{} ({})", s.label(), path.display())));
            }
            Ok((s, Checkpoint::load(&path)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut rows = Vec::new();
    for &s in settings {
        let start = Instant::now();
        let scfg = cfg.clone().with_setting(s);
        let base = checkpoints[&s].params();
        let split = splits(&scfg, manifest)?;
        let enhancer = build_enhancer(&scfg)?;
        let head = build_head(&scfg);
        let head_params = if scfg.toggles.rf_head {
            Some(adapt_scene(&scfg, manifest, &enhancer, &base)?.0)
        } else {
            None
        };
        let pairs = load_pairs(manifest, &split.reconstruction)?;
        let lows: Vec<RgbImage> = pairs.iter().map(|p| p.0.clone()).collect();
        let normals: Vec<RgbImage> = pairs.iter().map(|p| p.1.clone()).collect();
        let outs = enhance_all(&enhancer, &base, head_params.as_ref().map(|p| (&head, p)), &lows)?;
        let report = metric_report(&scfg, s.label(), &split.reconstruction, &outs, &normals)?;
        info!("setting {}: PSNR {:.3} dB", s.label(), report.psnr.0);
        rows.push(AblationRow {
            setting: s.label().to_string(),
            report,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Settings {1, 2, 4}: the comparison without the head on the base scene.
pub fn run_ablation_without_head(cfg: &PipelineConfig, base_scene: &SceneManifest, ckpt_dir: &Path) -> Result<Vec<AblationRow>> {
    run_ablation(cfg, base_scene, &Setting::NO_HEAD, ckpt_dir)
}

