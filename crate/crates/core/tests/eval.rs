mod common;

use std::path::Path;

use common::random_image;
use merid_core::checkpoint::{load_scene, save_scene, Checkpoint};
use merid_core::config::{PipelineConfig, Setting, Toggles};
use merid_core::dataset::{synth_scene, write_scene, DegradationSpec, SceneManifest, SynthSpec};
use merid_core::isfga::UNetConfig;
use merid_core::loss::image_loss;
use merid_core::metrics::*;
use merid_core::pipeline::*;
use merid_core::retinex::RetinexConfig;
use merid_core::{Error, RgbImage};
use proptest::prelude::*;

/// Straightforward SSIM: normalised 11×11 gaussian window over every valid
/// position of every channel.
fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let k = 11;
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (width, height) = a.dims();
    let mut total = 0.0;
    let mut n = 0;
    for c in 0..3 {
        for y in 0..=height - k {
            for x in 0..=width - k {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (p, q) = (a.pixel(x + j, y + i)[c], b.pixel(x + j, y + i)[c]);
                        let wt = w[i * k + j];
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..100_000) {
        let a = random_image(14, 12, 0.0, 1.0, seed);
        let b = random_image(14, 12, 0.0, 1.0, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }
}

#[test]
fn psnr_examples() {
    let a = random_image(12, 12, 0.0, 0.5, 1);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let c = a.map(|v| v + 0.5);
    assert!((psnr(&a, &c).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    assert!(matches!(psnr(&a, &random_image(12, 11, 0.0, 1.0, 2)), Err(Error::Shape(_))));
    assert_eq!(serde_json::to_string(&Psnr(f64::INFINITY)).unwrap(), "\"identical\"");
}

#[test]
fn ssim_matches_reference() {
    let bin = RgbImage::from_fn(17, 15, |x, y| {
        let v = ((x * 7 + y * 3) % 5 < 2) as u8 as f64;
        [v, 1.0 - v, v]
    });
    let inv = bin.map(|v| 1.0 - v);
    let (got, want) = (ssim(&bin, &inv).unwrap(), naive_ssim(&bin, &inv));
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    let (a, b) = (random_image(20, 16, 0.0, 1.0, 3), random_image(20, 16, 0.0, 1.0, 4));
    assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-6);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(dssim(&a, &a).unwrap().abs() < 1e-12);
    assert!(ssim(&random_image(10, 20, 0.0, 1.0, 5), &random_image(10, 20, 0.0, 1.0, 6)).is_err());
}

#[test]
fn loss_examples() {
    let a = random_image(16, 16, 0.0, 1.0, 7);
    assert_eq!(image_loss(&a, &a, 0.2).unwrap(), 0.0);
    let b = random_image(16, 16, 0.0, 1.0, 8);
    let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64;
    assert!((image_loss(&a, &b, 0.0).unwrap() - l1).abs() < 1e-12);
    let mixed = 0.8 * l1 + 0.2 * (1.0 - naive_ssim(&a, &b));
    assert!((image_loss(&a, &b, 0.2).unwrap() - mixed).abs() < 1e-9);
    assert!(image_loss(&a, &b, 1.5).is_err());
}

#[test]
fn brightness_curves() {
    let c = brightness_curve(&RgbImage::filled(9, 4, [0.3; 3]));
    assert_eq!(c.len(), 9);
    assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
    let step = brightness_curve(&RgbImage::from_fn(8, 3, |x, _| [if x < 4 { 0.0 } else { 1.0 }; 3]));
    for (x, v) in step.iter().enumerate() {
        assert!((v - if x < 4 { 0.0 } else { 1.0 }).abs() < 1e-12);
    }
    assert_eq!(brightness_curve_along(&RgbImage::filled(9, 4, [0.3; 3]), CurveAxis::Rows).len(), 4);
}

#[test]
fn lpips_plugin_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    random_image(8, 8, 0.0, 1.0, 1).save_png(&a).unwrap();
    random_image(8, 8, 0.0, 1.0, 2).save_png(&b).unwrap();
    let sh = |script: &str| LpipsProvider::Command { program: "sh".into(), args: vec!["-c".into(), script.into()] };
    let mock = sh("if cmp -s \"$0\" \"$1\"; then echo 0.0; else echo 0.25; fi");
    assert_eq!(lpips_plugin(&a, &a, &mock), LpipsValue::Score(0.0));
    assert_eq!(lpips_plugin(&a, &b, &mock), LpipsValue::Score(0.25));
    assert_eq!(lpips_plugin(&a, &b, &LpipsProvider::Disabled), LpipsValue::Disabled);
    let failing = lpips_plugin(&a, &b, &sh("echo broken >&2; exit 3"));
    assert!(matches!(failing, LpipsValue::Unavailable(ref m) if m.contains("broken")), "{failing:?}");
    let missing = LpipsProvider::Command { program: "/nonexistent/scorer".into(), args: vec![] };
    assert!(matches!(lpips_plugin(&a, &b, &missing), LpipsValue::Unavailable(_)));

    assert_eq!(serde_json::to_string(&LpipsValue::Disabled).unwrap(), "null");
    assert_eq!(serde_json::to_string(&LpipsValue::Score(0.5)).unwrap(), "0.5");
    assert!(serde_json::to_string(&failing).unwrap().starts_with("\"unavailable: "));

    let img = random_image(12, 12, 0.0, 1.0, 3);
    let views = vec![ViewMetrics::compute("v", &img, &img).unwrap()];
    let mut report = MetricReport::from_views("x", views, vec![]).unwrap();
    assert_eq!(report.lpips, LpipsValue::Disabled);
    report.attach_lpips(&[(img.clone(), img)], &mock, dir.path()).unwrap();
    assert_eq!(report.lpips, LpipsValue::Score(0.0));
}

#[test]
fn report_aggregates_are_means() {
    let t = random_image(12, 12, 0.0, 1.0, 9);
    let views: Vec<_> = (0..3).map(|i| ViewMetrics::compute(&format!("v{i}"), &random_image(12, 12, 0.0, 1.0, 10 + i), &t).unwrap()).collect();
    let r = MetricReport::from_views("x", views.clone(), vec![]).unwrap();
    assert!((r.psnr.0 - views.iter().map(|v| v.psnr.0).sum::<f64>() / 3.0).abs() < 1e-12);
    assert!((r.ssim - views.iter().map(|v| v.ssim).sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(MetricReport::from_views("x", vec![], vec![]).is_err());
}

#[test]
fn config_round_trip_and_overrides() {
    let cfg = PipelineConfig::default();
    assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    let o = cfg.with_overrides(&["seed=9", "adapt.iters=5", "toggles.rf_head=false"]).unwrap();
    assert_eq!((o.seed, o.adapt.iters, o.toggles.rf_head), (9, 5, false));
    assert!(matches!(cfg.with_overrides(&["adapt.iterz=5"]), Err(Error::Config(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 3\n[train]\niters = 11\n").unwrap();
    let loaded = PipelineConfig::load(&path).unwrap();
    assert_eq!((loaded.seed, loaded.train.iters, loaded.train.crop), (3, 11, 32));
    let bad = PipelineConfig { toggles: Toggles { erid: false, isfga: true, rf_head: false }, ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn setting_labels_round_trip() {
    for s in Setting::ALL {
        assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
        let row = AblationRow {
            setting: s.label().into(),
            report: MetricReport::from_views(s.label(), vec![ViewMetrics::compute("v", &RgbImage::filled(11, 11, [0.5; 3]), &RgbImage::filled(11, 11, [0.4; 3])).unwrap()], vec![]).unwrap(),
            seconds: 0.0,
        };
        let json: serde_json::Value = serde_json::to_value(&row).unwrap();
        assert_eq!(json["setting"].as_str().unwrap().parse::<Setting>().unwrap(), s);
        assert_eq!(row.parsed_setting().unwrap(), s);
    }
    assert_eq!(Setting::NO_HEAD.map(|s| s.toggles().rf_head), [false; 3]);
}

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        retinex: RetinexConfig { state_channels: 4, hidden: 4, radius: 3, ..Default::default() },
        unet: UNetConfig { widths: vec![4, 4], heads: 2, band_kernels: vec![3], cond_dim: 4, mlp_hidden: 4, window: 4, ..Default::default() },
        ..Default::default()
    };
    cfg.train.iters = 4;
    cfg.train.val_every = 2;
    cfg.train.crop = 16;
    cfg.adapt.iters = 10;
    cfg.gsplat.optimize.iters = 15;
    cfg.gsplat.init_gaussians = 40;
    cfg
}

fn tiny_scene(root: &Path, size: usize) -> SceneManifest {
    let scene = synth_scene(&SynthSpec::default(), 16, (size, size), 0).unwrap();
    let deg = DegradationSpec { gamma: 1.3, attenuation: 0.2, noise_read: 0.01, seed: 5, ..Default::default() };
    write_scene(root, &scene, &deg).unwrap()
}

#[test]
fn training_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_scene(&dir.path().join("s"), 8);
    let mut cfg = tiny_config();
    cfg.train.lambda = 0.0;
    cfg.train.crop = 11;
    let out = dir.path().join("a.ckpt");
    let first = run_train_base(&cfg, &m, None, &out).unwrap();
    assert_eq!(first.losses.len(), 4);
    assert_eq!(first.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 2, 4]);
    let loaded = Checkpoint::load(&out).unwrap();
    assert_eq!(loaded, first.checkpoint);
    assert_eq!(loaded.step, 4);

    cfg.train.lr_floor = 1.0;
    let whole = run_train_base(&cfg.clone(), &m, None, &dir.path().join("w.ckpt")).unwrap();
    let mut short = cfg.clone();
    short.train.iters = 2;
    let half = run_train_base(&short, &m, None, &dir.path().join("h.ckpt")).unwrap();
    let resumed = run_train_base(&cfg, &m, Some(&half.checkpoint), &dir.path().join("r.ckpt")).unwrap();
    assert_eq!(resumed.losses.len(), 2);
    assert_eq!(resumed.losses, whole.losses[2..]);
    assert_eq!(resumed.checkpoint.step, 4);
    assert_eq!(resumed.checkpoint.params(), whole.checkpoint.params());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let cfg = tiny_config();
    let e = build_enhancer(&cfg).unwrap();
    let p = init_enhancer_params(&cfg, &e);
    let mut params = p.clone();
    let h = build_head(&cfg);
    for (n, t) in init_head_params(&cfg, &h).iter() {
        params.insert(n.clone(), t.clone());
    }
    let ck = Checkpoint::from_params(cfg.to_toml_string().unwrap(), 17, &params);
    assert!(ck.section("head").is_some());
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(back.params(), params);
    assert_eq!(PipelineConfig::from_toml_str(&back.config).unwrap(), cfg);

    let mut bytes = ck.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&ck.to_bytes()[..40]).is_err());
}

#[test]
fn pipeline_reports_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_scene(&dir.path().join("s"), 16);
    let cfg = tiny_config();
    let e = build_enhancer(&cfg).unwrap();
    let base = init_enhancer_params(&cfg, &e);
    let out = dir.path().join("out");
    let r1 = run_pipeline(&cfg, &m, &base, PipelineOptions::default(), Some(&out)).unwrap();
    let r2 = run_pipeline(&cfg, &m, &base, PipelineOptions::default(), None).unwrap();
    assert_eq!(r1.report.deterministic_json().unwrap(), r2.report.deterministic_json().unwrap());
    assert!(r1.report.adapted);
    assert_eq!(r1.report.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["low", "enhanced", "gs"]);
    assert_eq!(r1.report.setting, "full");
    let stages: Vec<&str> = r1.report.timings.iter().map(|t| t.0.as_str()).collect();
    assert_eq!(stages, ["adapt", "enhance", "reconstruct", "render"]);
    for id in &splits(&cfg, &m).unwrap().test {
        assert!(out.join(format!("{id}.png")).exists());
        assert!(out.join(format!("{id}_enhanced.png")).exists());
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][2]["label"], "gs");
    assert!(report["rows"][0]["lpips"].is_null());
    assert_eq!(load_scene(&out.join("scene.json")).unwrap(), r1.scene.clone().unwrap());
    let copy = dir.path().join("copy.json");
    save_scene(r1.scene.as_ref().unwrap(), &copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(out.join("scene.json")).unwrap());

    let zero = PipelineOptions { adapt: false, reconstruct: false, ..Default::default() };
    let z = run_pipeline(&cfg, &m, &base, zero, None).unwrap();
    assert!(!z.report.adapted && z.head.is_none() && z.scene.is_none());
    assert_eq!(z.report.rows.len(), 2);

    let identity = init_head_params(&cfg, &build_head(&cfg));
    let rows = zero_shot_vs_adapted_report(&cfg, &m, &base, &identity).unwrap();
    assert_eq!((rows[0].label.as_str(), rows[1].label.as_str()), ("zero_shot", "adapted"));
    assert_eq!(rows[0].psnr, rows[1].psnr);
    assert_eq!(rows[0].ssim, rows[1].ssim);
}

#[test]
fn ablation_needs_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_scene(&dir.path().join("s"), 16);
    let cfg = tiny_config();
    let err = run_ablation(&cfg, &m, &[Setting::S2], dir.path()).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(ref s) if s.starts_with("2 ")), "{err}");
    for s in [Setting::S1, Setting::S3] {
        let c = cfg.clone().with_setting(s);
        let e = build_enhancer(&c).unwrap();
        let p = init_enhancer_params(&c, &e);
        Checkpoint::from_params(c.to_toml_string().unwrap(), 0, &p).save(&checkpoint_path(dir.path(), s)).unwrap();
    }
    let rows = run_ablation(&cfg, &m, &[Setting::S1, Setting::S3], dir.path()).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["1", "3"]);
    assert!(rows.iter().all(|r| r.report.per_view.len() == 4 && r.report.psnr.0.is_finite()));
}
