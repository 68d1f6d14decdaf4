//! COLMAP text export (`cameras.txt`, `images.txt`) reading and writing.
//!
//! Only the PINHOLE and SIMPLE_PINHOLE models are understood. Format:
//! <https://colmap.github.io/format.html#text-format>

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{quat_to_matrix, Camera};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Intrinsics {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::Colmap(format!("invalid {what} '{tok}'")))
}

fn parse_cameras(text: &str) -> Result<HashMap<u32, Intrinsics>> {
    let mut out = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(Error::Colmap(format!("short camera line '{line}'")));
        }
        let id: u32 = toks[0]
            .parse()
            .map_err(|_| Error::Colmap(format!("invalid camera id '{}'", toks[0])))?;
        let model = toks[1];
        let width = parse_f64(toks[2], "width")? as usize;
        let height = parse_f64(toks[3], "height")? as usize;
        let params = toks[4..]
            .iter()
            .map(|t| parse_f64(t, "camera parameter"))
            .collect::<Result<Vec<_>>>()?;
        let intr = match (model, params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => Intrinsics {
                width,
                height,
                fx: *fx,
                fy: *fy,
                cx: *cx,
                cy: *cy,
            },
            ("SIMPLE_PINHOLE", [f, cx, cy]) => Intrinsics {
                width,
                height,
                fx: *f,
                fy: *f,
                cx: *cx,
                cy: *cy,
            },
            ("PINHOLE" | "SIMPLE_PINHOLE", p) => {
                return Err(Error::Colmap(format!(
                    "camera {id}: {model} expects {} parameters, got {}",
                    if model == "PINHOLE" { 4 } else { 3 },
                    p.len()
                )))
            }
            (other, _) => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        out.insert(id, intr);
    }
    Ok(out)
}

/// Parse COLMAP text exports into cameras keyed by image name.
pub fn parse_colmap_text_str(cameras_txt: &str, images_txt: &str) -> Result<BTreeMap<String, Camera>> {
    let intrinsics = parse_cameras(cameras_txt)?;
    // Header and 2-D point lines alternate; point lines may be empty.
    let mut lines: Vec<&str> = images_txt
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let mut out = BTreeMap::new();
    for chunk in lines.chunks(2) {
        let header = chunk[0].trim();
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() < 10 {
            return Err(Error::Colmap(format!("short image line '{header}'")));
        }
        let mut q = [0.0; 4];
        for (i, v) in q.iter_mut().enumerate() {
            *v = parse_f64(toks[1 + i], "quaternion")?;
        }
        let mut t = [0.0; 3];
        for (i, v) in t.iter_mut().enumerate() {
            *v = parse_f64(toks[5 + i], "translation")?;
        }
        let cam_id: u32 = toks[8]
            .parse()
            .map_err(|_| Error::Colmap(format!("invalid camera id '{}'", toks[8])))?;
        let name = toks[9..].join(" ");
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Colmap(format!(
                "image {name}: non-unit quaternion (norm {norm:.6})"
            )));
        }
        let intr = intrinsics
            .get(&cam_id)
            .ok_or_else(|| Error::Colmap(format!("image {name}: unknown camera id {cam_id}")))?;
        let camera = Camera {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            rotation: quat_to_matrix(q.map(|v| v / norm)),
            translation: t,
            width: intr.width,
            height: intr.height,
        };
        if out.insert(name.clone(), camera).is_some() {
            return Err(Error::Colmap(format!("duplicate image name {name}")));
        }
    }
    Ok(out)
}

pub fn parse_colmap_text(cameras_file: &Path, images_file: &Path) -> Result<BTreeMap<String, Camera>> {
    let cams = std::fs::read_to_string(cameras_file).map_err(|e| Error::io(cameras_file, e))?;
    let imgs = std::fs::read_to_string(images_file).map_err(|e| Error::io(images_file, e))?;
    parse_colmap_text_str(&cams, &imgs)
}

/// Render `(cameras.txt, images.txt)` with one PINHOLE camera per image.
pub fn to_colmap_text(views: &[(String, Camera)]) -> (String, String) {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (i, (name, cam)) in views.iter().enumerate() {
        let id = i + 1;
        // {:?} on f64 prints the shortest string that round-trips exactly.
        writeln!(
            cams,
            "{id} PINHOLE {} {} {:?} {:?} {:?} {:?}",
            cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy
        )
        .unwrap();
        let q = cam.quaternion();
        let t = cam.translation;
        writeln!(
            imgs,
            "{id} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {id} {name}\n",
            q[0], q[1], q[2], q[3], t[0], t[1], t[2]
        )
        .unwrap();
    }
    (cams, imgs)
}

pub fn write_colmap_text(dir: &Path, views: &[(String, Camera)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (cams, imgs) = to_colmap_text(views);
    let cp = dir.join("cameras.txt");
    std::fs::write(&cp, cams).map_err(|e| Error::io(&cp, e))?;
    let ip = dir.join("images.txt");
    std::fs::write(&ip, imgs).map_err(|e| Error::io(&ip, e))?;
    Ok(())
}

/// `points3D.txt` body for `(position, colour in [0,1])` pairs; tracks are left empty.
pub fn points_to_colmap_text(points: &[([f64; 3], [f64; 3])]) -> String {
    let mut out = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for (i, (p, c)) in points.iter().enumerate() {
        let [r, g, b] = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(out, "{} {:?} {:?} {:?} {r} {g} {b} 0", i + 1, p[0], p[1], p[2]).unwrap();
    }
    out
}

/// Positions and colours of a COLMAP `points3D.txt` file.
pub fn parse_colmap_points_str(text: &str) -> Result<Vec<([f64; 3], [f64; 3])>> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Colmap(format!("points3D line {}: expected id, xyz and rgb", n + 1));
        if f.len() < 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let p = [num(1)?, num(2)?, num(3)?];
        let c = [num(4)? / 255.0, num(5)? / 255.0, num(6)? / 255.0];
        points.push((p, c));
    }
    Ok(points)
}

pub fn parse_colmap_points(path: &Path) -> Result<Vec<([f64; 3], [f64; 3])>> {
    parse_colmap_points_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CAMS: &str = "# header\n1 PINHOLE 64 48 50.0 51.0 32.0 24.0\n2 SIMPLE_PINHOLE 64 48 40.0 31.5 23.5\n";

    #[test]
    fn identity_quaternion_gives_identity_rotation() {
        let imgs = "1 1 0 0 0 0.5 -1 2 1 a.png\n\n";
        let cams = parse_colmap_text_str(CAMS, imgs).unwrap();
        let c = &cams["a.png"];
        assert_eq!(c.rotation, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(c.translation, [0.5, -1.0, 2.0]);
        assert_eq!((c.fx, c.fy), (50.0, 51.0));
    }

    #[test]
    fn half_turn_about_x() {
        // Independent oracle: rotating by pi about x maps (x, y, z) to (x, -y, -z),
        // i.e. the matrix whose columns are the images of the basis vectors.
        let (angle, axis) = (std::f64::consts::PI, [1.0, 0.0, 0.0]);
        let rodrigues = |v: [f64; 3]| {
            let (s, c) = angle.sin_cos();
            let kxv = crate::linalg::cross(axis, v);
            let kv = crate::linalg::dot(axis, v);
            [0, 1, 2].map(|i| v[i] * c + kxv[i] * s + axis[i] * kv * (1.0 - c))
        };
        let imgs = "1 0 1 0 0 0 0 0 2 b.png\n1 2 3\n";
        let cams = parse_colmap_text_str(CAMS, imgs).unwrap();
        let r = cams["b.png"].rotation;
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let col = rodrigues(e);
            for i in 0..3 {
                assert!((r[i][j] - col[i]).abs() < 1e-12);
            }
        }
        assert_eq!(cams["b.png"].fx, cams["b.png"].fy);
    }

    #[test]
    fn unsupported_model_is_named() {
        let err = parse_colmap_text_str("1 OPENCV 64 48 1 2 3 4 0 0 0 0\n", "").unwrap_err();
        assert!(err.to_string().contains("OPENCV"), "{err}");
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let imgs = "1 1.01 0 0 0 0 0 0 1 a.png\n\n";
        assert!(parse_colmap_text_str(CAMS, imgs).is_err());
        let ok = "1 1.0005 0 0 0 0 0 0 1 a.png\n\n";
        assert!(parse_colmap_text_str(CAMS, ok).is_ok());
    }

    fn quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter_map("non-zero", |q| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n > 0.1).then(|| q.map(|v| v / n))
        })
    }

    proptest! {
        #[test]
        fn write_parse_round_trip(q in quat(), t in prop::array::uniform3(-5.0f64..5.0)) {
            let cam = Camera {
                fx: 40.0, fy: 42.0, cx: 31.5, cy: 23.0,
                rotation: quat_to_matrix(q), translation: t, width: 64, height: 48,
            };
            let (c, i) = to_colmap_text(&[("v 1.png".to_string(), cam.clone())]);
            let back = &parse_colmap_text_str(&c, &i).unwrap()["v 1.png"];
            let mut frob = 0.0;
            for a in 0..3 { for b in 0..3 { frob += (back.rotation[a][b] - cam.rotation[a][b]).powi(2); } }
            prop_assert!(frob.sqrt() < 1e-6);
            prop_assert_eq!(back.translation, cam.translation);
            prop_assert_eq!((back.fx, back.cy, back.width), (cam.fx, cam.cy, cam.width));
        }
    }

    #[test]
    fn points_round_trip() {
        let pts = vec![([0.5, -1.25, 3.0], [1.0, 0.0, 0.2]), ([1e-3, 2.0, -7.5], [0.0, 1.0, 1.0])];
        let back = parse_colmap_points_str(&points_to_colmap_text(&pts)).unwrap();
        assert_eq!(back.len(), 2);
        for ((p, c), (q, d)) in pts.iter().zip(&back) {
            assert_eq!(p, q);
            assert!(c.iter().zip(d).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0));
        }
        assert!(parse_colmap_points_str("1 0 0").is_err());
    }
}
