use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use merid_core::checkpoint::{load_scene, save_scene, Checkpoint};
use merid_core::config::{PipelineConfig, Setting};
use merid_core::dataset::{load_manifest, synth_scene, write_scene, SceneManifest, SynthSpec};
use merid_core::gsplat::render;
use merid_core::head::ReflectionHead;
use merid_core::metrics::{brightness_curve_along, MetricReport, ViewMetrics};
use merid_core::pipeline::{
    adapt_scene, build_enhancer, build_head, checkpoint_path, reconstruct_scene, run_ablation, run_pipeline,
    run_train_base, zero_shot_vs_adapted_report, PipelineOptions,
};
use merid_core::{CameraRecord, RgbImage};

#[derive(Parser)]
#[command(name = "merid", version, about = "Low-light multi-view enhancement and gaussian splatting")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.iters=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Base,
    Unseen,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired scene (low/, normal/, colmap/, manifest.json).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        kind: SceneKind,
        #[arg(long)]
        views: Option<usize>,
        /// Resolution as WIDTHxHEIGHT.
        #[arg(long)]
        size: Option<String>,
    },
    /// Train decoupling and restoration on a base scene.
    TrainBase {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "full")]
        setting: String,
        /// Defaults to `<paths.checkpoints>/setting_<label>.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit the reflection head to a new scene; writes `<scene>.head`.
    Adapt {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance one image or every image of a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write gain, luminance map, gate heatmaps and band energies here.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
    },
    /// Fit gaussians to the enhanced reconstruction views.
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        weights: Weights,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene file along a camera path (JSON list of camera records).
    Render {
        #[arg(long)]
        scene_file: PathBuf,
        #[arg(long)]
        camera_path: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image size for records without one, WIDTHxHEIGHT.
        #[arg(long)]
        size: Option<String>,
    },
    /// Compare predictions to targets, or zero-shot against adapted on a scene.
    Evaluate {
        #[arg(long, requires = "target")]
        pred: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred", requires_all = ["checkpoint", "head"])]
        scene: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Module ablation on a scene from per-setting checkpoints.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        /// 1, 2, 3, 4 or full; repeatable.
        #[arg(long = "setting")]
        settings: Vec<String>,
        /// Settings 1, 2 and 4 without the head.
        #[arg(long, conflicts_with = "settings")]
        without_head: bool,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt, enhance, reconstruct, render and evaluate a scene end to end.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Zero-shot: skip the head adaptation.
        #[arg(long)]
        no_adapt: bool,
        /// Reconstruct from the raw low-light views.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Weights {
    /// Base checkpoint; without it the raw low-light views are used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    head: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).context("size must be WIDTHxHEIGHT")?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

/// Configuration stored in a checkpoint, with command-line overrides on top.
fn checkpoint_config(cli: &Cli, ck: &Checkpoint) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_toml_str(&ck.config)?.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn scene_manifest(dir: &Path) -> Result<SceneManifest> {
    let json = dir.join("manifest.json");
    if json.exists() {
        let text = std::fs::read_to_string(&json)?;
        return Ok(SceneManifest::from_json(&text, dir)?);
    }
    Ok(load_manifest(dir)?)
}

fn load_head(path: &Path) -> Result<merid_core::nn::Params> {
    let ck = Checkpoint::load(path)?;
    Ok(ck.section("head").cloned().with_context(|| format!("{} has no head section", path.display()))?)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::SynthData { out, kind, views, size } => {
            let cfg = load_config(&cli)?;
            let (spec, degradation) = match kind {
                SceneKind::Base => (SynthSpec::default(), cfg.synth.degradation.clone()),
                SceneKind::Unseen => (SynthSpec::unseen(), cfg.synth.unseen_degradation.clone()),
            };
            let res = match size {
                Some(s) => parse_size(s)?,
                None => (cfg.synth.width, cfg.synth.height),
            };
            let scene = synth_scene(&spec, views.unwrap_or(cfg.synth.views), res, cfg.seed)?;
            let m = write_scene(out, &scene, &degradation.with_seed(degradation.seed.wrapping_add(cfg.seed)))?;
            info!("wrote {} views to {}", m.views.len(), out.display());
        }
        Command::TrainBase { scene, setting, out, resume } => {
            let setting: Setting = setting.parse()?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = match &resume {
                Some(ck) => checkpoint_config(&cli, ck)?,
                None => load_config(&cli)?.with_setting(setting),
            };
            let out = out.clone().unwrap_or_else(|| checkpoint_path(&cfg.paths.checkpoints, setting));
            let manifest = scene_manifest(scene)?;
            let outcome = run_train_base(&cfg, &manifest, resume.as_ref(), &out)?;
            info!("wrote {} at step {}", out.display(), outcome.checkpoint.step);
            write_json(None, &outcome.validation)?;
        }
        Command::Adapt { scene, checkpoint, views, iters, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cfg = checkpoint_config(&cli, &ck)?;
            cfg.adapt.k_views = views.unwrap_or(cfg.adapt.k_views);
            cfg.adapt.iters = iters.unwrap_or(cfg.adapt.iters);
            let manifest = scene_manifest(scene)?;
            let enhancer = build_enhancer(&cfg)?;
            let (head, report) = adapt_scene(&cfg, &manifest, &enhancer, &ck.params())?;
            let out = out.clone().unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("{}.head", manifest.scene_name))
            });
            let mut sidecar = Checkpoint::new(cfg.to_toml_string()?, cfg.adapt.iters as u64);
            sidecar.insert_section("head", head);
            sidecar.save(&out)?;
            info!(
                "adaptation loss {:.5} -> {:.5}; wrote {}",
                report.losses[0],
                report.losses[report.losses.len() - 1],
                out.display()
            );
        }
        Command::Enhance { checkpoint, head, input, output, debug_dir } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&cli, &ck)?;
            let enhancer = build_enhancer(&cfg)?;
            let params = ck.params();
            let head_params = head.as_deref().map(load_head).transpose()?;
            let rh: ReflectionHead = build_head(&cfg);
            let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                std::fs::create_dir_all(output)?;
                image_files(input)?
                    .into_iter()
                    .map(|(stem, p)| (p, output.join(format!("{stem}.png"))))
                    .collect()
            } else {
                vec![(input.clone(), output.clone())]
            };
            for (src, dst) in jobs {
                let low = RgbImage::load(&src)?;
                let (r0, diag) = enhancer.enhance(&low, &params)?;
                let out = match &head_params {
                    Some(hp) => rh.apply(&r0, hp),
                    None => r0,
                };
                out.save_png(&dst)?;
                if let Some(d) = debug_dir {
                    let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    diag.dump(&d.join(stem))?;
                }
                info!("{} -> {}", src.display(), dst.display());
            }
        }
        Command::Reconstruct { scene, weights, out } => {
            let manifest = scene_manifest(scene)?;
            let (cfg, base) = match &weights.checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    (checkpoint_config(&cli, &ck)?, Some(ck.params()))
                }
                None => (load_config(&cli)?, None),
            };
            let head_params = weights.head.as_deref().map(load_head).transpose()?;
            let fitted = reconstruct_scene(&cfg, &manifest, base.as_ref(), head_params.as_ref())?;
            save_scene(&fitted, out)?;
            info!("wrote {} gaussians to {}", fitted.len(), out.display());
        }
        Command::Render { scene_file, camera_path, out, size } => {
            let scene = load_scene(scene_file)?;
            let records: Vec<CameraRecord> = serde_json::from_str(
                &std::fs::read_to_string(camera_path).with_context(|| format!("reading {}", camera_path.display()))?,
            )?;
            let size = size.as_deref().map(parse_size).transpose()?;
            std::fs::create_dir_all(out)?;
            for (i, rec) in records.iter().enumerate() {
                let cam = rec.to_camera(size)?;
                let frame = render(&scene, &cam)?;
                frame.image.save_png(&out.join(format!("frame_{i:04}.png")))?;
            }
            info!("rendered {} frames to {}", records.len(), out.display());
        }
        Command::Evaluate { pred, target, scene, checkpoint, head, out } => {
            if let (Some(pred), Some(target)) = (pred, target) {
                let cfg = load_config(&cli)?;
                let preds = image_files(pred)?;
                let targets = image_files(target)?;
                let mut views = Vec::new();
                let mut pairs = Vec::new();
                for (stem, p) in &preds {
                    let t = targets.get(stem).with_context(|| format!("no target for {stem}"))?;
                    let (a, b) = (RgbImage::load(p)?, RgbImage::load(t)?);
                    views.push(ViewMetrics::compute(stem, &a, &b)?);
                    pairs.push((a, b));
                }
                if pairs.is_empty() {
                    bail!("no images in {}", pred.display());
                }
                let curve = brightness_curve_along(&pairs[0].0, cfg.eval.curve_axis);
                let mut report = MetricReport::from_views("evaluate", views, curve)?;
                let scratch = std::env::temp_dir().join(format!("merid-lpips-{}", std::process::id()));
                std::fs::create_dir_all(&scratch)?;
                report.attach_lpips(&pairs, &cfg.eval.lpips, &scratch)?;
                let _ = std::fs::remove_dir_all(&scratch);
                write_json(out.as_deref(), &report)?;
            } else if let (Some(scene), Some(checkpoint), Some(head)) = (scene, checkpoint, head) {
                let ck = Checkpoint::load(checkpoint)?;
                let cfg = checkpoint_config(&cli, &ck)?;
                let manifest = scene_manifest(scene)?;
                let rows = zero_shot_vs_adapted_report(&cfg, &manifest, &ck.params(), &load_head(head)?)?;
                write_json(out.as_deref(), &rows)?;
            } else {
                bail!("evaluate needs --pred and --target, or --scene, --checkpoint and --head");
            }
        }
        Command::Ablate { scene, settings, without_head, checkpoints, out } => {
            let cfg = load_config(&cli)?;
            let settings: Vec<Setting> = if *without_head {
                Setting::NO_HEAD.to_vec()
            } else if settings.is_empty() {
                Setting::ALL.to_vec()
            } else {
                settings.iter().map(|s| s.parse()).collect::<merid_core::Result<_>>()?
            };
            let dir = checkpoints.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone());
            // Architecture comes from the checkpoints' own configuration.
            let arch = match settings.first().map(|&s| checkpoint_path(&dir, s)).filter(|p| p.exists()) {
                Some(p) => checkpoint_config(&cli, &Checkpoint::load(&p)?)?,
                None => cfg,
            };
            let rows = run_ablation(&arch, &scene_manifest(scene)?, &settings, &dir)?;
            write_json(out.as_deref(), &rows)?;
        }
        Command::Run { scene, checkpoint, no_adapt, raw, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&cli, &ck)?;
            let manifest = scene_manifest(scene)?;
            let opts = PipelineOptions {
                adapt: !no_adapt,
                enhance: !raw,
                reconstruct: true,
            };
            let result = run_pipeline(&cfg, &manifest, &ck.params(), opts, Some(out))?;
            println!("{}", result.report.to_json()?);
        }
    }
    Ok(())
}
