use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[retinex]
state_channels = 4
hidden = 4
radius = 3

[unet]
widths = [4, 4]
heads = 2
band_kernels = [3]
cond_dim = 4
mlp_hidden = 4
window = 4

[train]
iters = 3
crop = 16
val_every = 0

[adapt]
iters = 4

[gsplat]
init_gaussians = 30

[gsplat.optimize]
iters = 10
"#;

fn merid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merid"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run merid")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = merid(dir, args);
    assert!(out.status.success(), "merid {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = merid(dir, args);
    assert!(!out.status.success(), "merid {args:?} succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn workflow_on_a_tiny_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];
    let with = |args: &[&'static str]| -> Vec<&str> { cfg.iter().chain(args).copied().collect() };

    ok(d, &with(&["synth-data", "--out", "base", "--views", "16", "--size", "16x16"]));
    ok(d, &with(&["synth-data", "--out", "unseen", "--kind", "unseen", "--views", "16", "--size", "16x16"]));
    assert!(d.join("base/manifest.json").exists());
    assert_eq!(std::fs::read_dir(d.join("unseen/low")).unwrap().count(), 16);

    let val = ok(d, &with(&["train-base", "--scene", "base", "--out", "ck/setting_full.ckpt"]));
    let val: Vec<(u64, f64)> = serde_json::from_str(&val).unwrap();
    assert_eq!(val.first().unwrap().0, 0);
    assert_eq!(val.last().unwrap().0, 3);
    ok(d, &with(&["train-base", "--scene", "base", "--setting", "1", "--out", "ck/setting_1.ckpt"]));

    ok(d, &["adapt", "--scene", "unseen", "--checkpoint", "ck/setting_full.ckpt", "--views", "10", "--iters", "3", "--out", "unseen.head"]);
    ok(d, &["enhance", "--checkpoint", "ck/setting_full.ckpt", "--head", "unseen.head", "--input", "unseen/low", "--output", "enhanced", "--debug-dir", "debug"]);
    assert_eq!(std::fs::read_dir(d.join("enhanced")).unwrap().count(), 16);
    assert!(d.join("debug").exists());

    let metrics = ok(d, &["evaluate", "--pred", "enhanced", "--target", "unseen/normal"]);
    let report: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(report["per_view"].as_array().unwrap().len(), 16);
    assert!(report["lpips"].is_null());
    let same: serde_json::Value = serde_json::from_str(&ok(d, &["evaluate", "--pred", "enhanced", "--target", "enhanced"])).unwrap();
    assert_eq!(same["psnr"], "identical");

    let rows = ok(d, &["evaluate", "--scene", "unseen", "--checkpoint", "ck/setting_full.ckpt", "--head", "unseen.head"]);
    let rows: serde_json::Value = serde_json::from_str(&rows).unwrap();
    assert_eq!(rows[0]["label"], "zero_shot");
    assert_eq!(rows[1]["label"], "adapted");

    ok(d, &["reconstruct", "--scene", "unseen", "--checkpoint", "ck/setting_full.ckpt", "--out", "scene.json"]);
    let cams = r#"[{"fx": 18.0, "fy": 18.0, "cx": 8.0, "cy": 8.0, "qvec": [1, 0, 0, 0], "tvec": [0, -0.3, 3.0]},
                   {"fx": 18.0, "fy": 18.0, "cx": 8.0, "cy": 8.0, "qvec": [1, 0, 0, 0], "tvec": [0, -0.3, 3.5]}]"#;
    std::fs::write(d.join("path.json"), cams).unwrap();
    ok(d, &["render", "--scene-file", "scene.json", "--camera-path", "path.json", "--out", "frames", "--size", "16x16"]);
    assert!(d.join("frames/frame_0001.png").exists());

    let table = ok(d, &with(&["ablate", "--scene", "unseen", "--checkpoints", "ck", "--setting", "1", "--setting", "full"]));
    let table: serde_json::Value = serde_json::from_str(&table).unwrap();
    assert_eq!(table[1]["setting"], "full");
    let err = fails(d, &with(&["ablate", "--scene", "unseen", "--checkpoints", "ck", "--setting", "2"]));
    assert!(err.contains("missing checkpoint for setting 2"), "{err}");

    let report = ok(d, &["run", "--scene", "unseen", "--checkpoint", "ck/setting_full.ckpt", "--out", "run", "--seed", "3"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["adapted"], true);
    assert!(d.join("run/report.json").exists());
}

#[test]
fn configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let err = fails(d, &["--set", "train.iterz=3", "synth-data", "--out", "x"]);
    assert!(err.contains("unknown configuration key 'train.iterz'"), "{err}");
    let err = fails(d, &["--config", "missing.toml", "synth-data", "--out", "x"]);
    assert!(err.contains("missing.toml"), "{err}");
    let err = fails(d, &["train-base", "--scene", "nowhere", "--setting", "7"]);
    assert!(err.contains("unknown setting '7'"), "{err}");
    let err = fails(d, &["evaluate"]);
    assert!(err.contains("evaluate needs"), "{err}");
    let err = fails(d, &["synth-data", "--out", "x", "--size", "16by16"]);
    assert!(err.contains("WIDTHxHEIGHT"), "{err}");
}
