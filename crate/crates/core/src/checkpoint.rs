//! Binary checkpoints of named parameter sections and versioned scene files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "MERIDCKP" | format_version u32 | config_len u64 | config TOML
//! step u64 | section_count u32
//! per section:  name_len u32 | name | tensor_count u32
//! per tensor:   name_len u32 | name | ndim u32 | dims u64×ndim | data f64×numel
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsplat::GaussianScene;
use crate::nn::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MERIDCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Section holding the first optimizer moments.
pub const OPTIM_M: &str = "optim.m";
pub const OPTIM_V: &str = "optim.v";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// TOML snapshot of the configuration that produced the weights.
    pub config: String,
    pub step: u64,
    pub sections: BTreeMap<String, Params>,
}

/// Section of a parameter: the part of its name before the first dot.
pub fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl Checkpoint {
    pub fn new(config: String, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            step,
            sections: BTreeMap::new(),
        }
    }

    /// Split `params` into sections by name prefix.
    pub fn from_params(config: String, step: u64, params: &Params) -> Self {
        let mut ck = Self::new(config, step);
        ck.insert_params(params);
        ck
    }

    pub fn insert_params(&mut self, params: &Params) {
        for (name, t) in params.iter() {
            self.sections
                .entry(section_of(name).to_string())
                .or_default()
                .insert(name.clone(), t.clone());
        }
    }

    pub fn insert_section(&mut self, name: &str, params: Params) {
        self.sections.insert(name.to_string(), params);
    }

    pub fn section(&self, name: &str) -> Option<&Params> {
        self.sections.get(name)
    }

    /// Model parameters of every section except optimizer state.
    pub fn params(&self) -> Params {
        let mut out = Params::new();
        for (name, p) in &self.sections {
            if name != OPTIM_M && name != OPTIM_V {
                out.extend(p.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.format_version.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, params) in &self.sections {
            put_str(&mut b, name);
            b.extend_from_slice(&(params.len() as u32).to_le_bytes());
            for (tname, t) in params.iter() {
                put_str(&mut b, tname);
                b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    b.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {format_version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        let step = r.u64()?;
        let mut sections = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut params = Params::new();
            for _ in 0..r.u32()? {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                params.insert(tname, Tensor::new(&shape, data));
            }
            sections.insert(name, params);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            format_version,
            config,
            step,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    scene: GaussianScene,
}

pub fn scene_to_json(scene: &GaussianScene) -> Result<String> {
    Ok(serde_json::to_string(&SceneFile {
        format_version: SCENE_FORMAT_VERSION,
        scene: scene.clone(),
    })?)
}

pub fn scene_from_json(text: &str) -> Result<GaussianScene> {
    let f: SceneFile = serde_json::from_str(text)?;
    if f.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported scene format version {}", f.format_version)));
    }
    Ok(f.scene)
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    scene_from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = Params::new();
        p.insert("retinex.f1.weight", Tensor::new(&[2, 1, 1, 1], vec![0.1, -0.0]));
        p.insert("isfga.out.bias", Tensor::new(&[3], vec![f64::MIN_POSITIVE, 1e300, -3.5]));
        p.insert("head.c2.weight", Tensor::new(&[3, 16, 1, 1], (0..48).map(|i| i as f64 / 7.0).collect()));
        Checkpoint::from_params("seed = 3\n".into(), 17, &p)
    }

    #[test]
    fn byte_exact_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.sections.keys().collect::<Vec<_>>(), ["head", "isfga", "retinex"]);
        let neg_zero = back.params().get("retinex.f1.weight").data()[1];
        assert!(neg_zero == 0.0 && neg_zero.is_sign_negative());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version 2"));
    }
}
