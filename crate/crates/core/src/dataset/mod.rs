//! Paired low/normal-light multi-view scenes on disk.
//!
//! Layout:
//! ```text
//! <scene>/low/<view>.png
//! <scene>/normal/<view>.png
//! <scene>/colmap/{cameras,images}.txt
//! <scene>/colmap/points3D.txt   (optional)
//! ```

mod colmap;
mod degrade;
mod resample;
mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub use colmap::{
    parse_colmap_points, parse_colmap_points_str, parse_colmap_text, parse_colmap_text_str, points_to_colmap_text,
    to_colmap_text, write_colmap_text,
};
pub use degrade::{apply_degradation, DegradationSpec, IlluminationField};
pub use resample::downsample;
pub use split::{make_splits, sample_fewshot, split_indices, SplitIndices, SplitPolicy, SplitSpec, DEFAULT_FEWSHOT, MIN_SPLIT_VIEWS};
pub use synth::{synth_scene, write_scene, Primitive, SynthScene, SynthSpec};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub id: String,
    pub low: PathBuf,
    pub normal: PathBuf,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_name: String,
    /// `(width, height)`
    pub resolution: (usize, usize),
    /// Sorted by id.
    pub views: Vec<ViewEntry>,
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    id: String,
    low: PathBuf,
    normal: PathBuf,
    camera: CameraRecord,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    scene: String,
    resolution: [usize; 2],
    views: Vec<ViewJson>,
}

/// Image files in `dir` keyed by file stem.
fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((w as usize, h as usize))
}

impl SceneManifest {
    pub fn view_ids(&self) -> Vec<String> {
        self.views.iter().map(|v| v.id.clone()).collect()
    }

    pub fn view(&self, id: &str) -> Result<&ViewEntry> {
        self.views
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("view {id} not in scene {}", self.scene_name)))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ManifestJson {
            scene: self.scene_name.clone(),
            resolution: [self.resolution.0, self.resolution.1],
            views: self
                .views
                .iter()
                .map(|v| ViewJson {
                    id: v.id.clone(),
                    low: v.low.clone(),
                    normal: v.normal.clone(),
                    camera: CameraRecord::from_camera(&v.camera, false),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parse a manifest document; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<SceneManifest> {
        let doc: ManifestJson = serde_json::from_str(text)?;
        let resolution = (doc.resolution[0], doc.resolution[1]);
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let mut views = doc
            .views
            .into_iter()
            .map(|v| {
                Ok(ViewEntry {
                    camera: v.camera.to_camera(Some(resolution))?,
                    id: v.id,
                    low: resolve(v.low),
                    normal: resolve(v.normal),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        views.sort_by(|a, b| a.id.cmp(&b.id));
        if views.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument("duplicate view ids in manifest".into()));
        }
        Ok(SceneManifest {
            scene_name: doc.scene,
            resolution,
            views,
        })
    }

    pub fn load_pair(&self, id: &str) -> Result<(RgbImage, RgbImage)> {
        let v = self.view(id)?;
        let low = RgbImage::load(&v.low)?;
        let normal = RgbImage::load(&v.normal)?;
        for (img, path) in [(&low, &v.low), (&normal, &v.normal)] {
            if img.dims() != self.resolution {
                return Err(Error::Image {
                    path: path.clone(),
                    message: format!("resolution {:?} differs from the scene's {:?}", img.dims(), self.resolution),
                });
            }
        }
        Ok((low, normal))
    }
}

/// Scan a scene directory into a manifest.
pub fn load_manifest(root: &Path) -> Result<SceneManifest> {
    let low = image_files(&root.join("low"))?;
    let normal = image_files(&root.join("normal"))?;
    if let Some(orphan) = low
        .keys()
        .find(|k| !normal.contains_key(*k))
        .or_else(|| normal.keys().find(|k| !low.contains_key(*k)))
    {
        return Err(Error::UnpairedView(orphan.clone()));
    }
    if low.is_empty() {
        return Err(Error::NoViews(root.to_path_buf()));
    }

    let colmap_dir = root.join("colmap");
    let cams = parse_colmap_text(&colmap_dir.join("cameras.txt"), &colmap_dir.join("images.txt"))?;
    if cams.len() != low.len() {
        return Err(Error::Colmap(format!(
            "images.txt lists {} images but the scene has {} views",
            cams.len(),
            low.len()
        )));
    }
    let by_stem: BTreeMap<String, &Camera> = cams
        .iter()
        .map(|(name, cam)| {
            let stem = Path::new(name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(name)
                .to_string();
            (stem, cam)
        })
        .collect();

    let mut resolution = None;
    let mut views = Vec::with_capacity(low.len());
    for (id, low_path) in low {
        let normal_path = normal[&id].clone();
        let camera = (*by_stem
            .get(&id)
            .ok_or_else(|| Error::Colmap(format!("no pose for view {id}")))?)
        .clone();
        for path in [&low_path, &normal_path] {
            let dims = image_dims(path)?;
            let expected = *resolution.get_or_insert(dims);
            if dims != expected {
                return Err(Error::Image {
                    path: path.clone(),
                    message: format!("resolution {dims:?} differs from {expected:?}"),
                });
            }
        }
        if (camera.width, camera.height) != resolution.unwrap() {
            return Err(Error::Colmap(format!(
                "camera for view {id} is {}x{} but images are {:?}",
                camera.width,
                camera.height,
                resolution.unwrap()
            )));
        }
        views.push(ViewEntry {
            id,
            low: low_path,
            normal: normal_path,
            camera,
        });
    }
    let scene_name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    Ok(SceneManifest {
        scene_name,
        resolution: resolution.expect("at least one view"),
        views,
    })
}
