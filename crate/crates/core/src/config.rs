//! Pipeline configuration: one TOML document, dotted command-line overrides
//! and the ablation settings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DegradationSpec, IlluminationField};
use crate::error::{Error, Result};
use crate::gsplat::OptimizeConfig;
use crate::head::AdaptConfig;
use crate::isfga::UNetConfig;
use crate::loss::DEFAULT_LAMBDA;
use crate::metrics::{CurveAxis, LpipsProvider};
use crate::retinex::RetinexConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub erid: bool,
    pub isfga: bool,
    pub rf_head: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Setting::Full.toggles()
    }
}

/// Module-level ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setting {
    /// U-Net with plain attention on the raw image.
    S1,
    /// + decoupling.
    S2,
    /// + decoupling + reflection head.
    S3,
    /// + decoupling + gated attention.
    S4,
    Full,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::S1, Setting::S2, Setting::S3, Setting::S4, Setting::Full];
    /// Rows evaluated on the base scene without the head.
    pub const NO_HEAD: [Setting; 3] = [Setting::S1, Setting::S2, Setting::S4];

    pub fn toggles(self) -> Toggles {
        let (erid, isfga, rf_head) = match self {
            Setting::S1 => (false, false, false),
            Setting::S2 => (true, false, false),
            Setting::S3 => (true, false, true),
            Setting::S4 => (true, true, false),
            Setting::Full => (true, true, true),
        };
        Toggles { erid, isfga, rf_head }
    }

    pub fn from_toggles(t: Toggles) -> Option<Setting> {
        Setting::ALL.into_iter().find(|s| s.toggles() == t)
    }

    pub fn label(self) -> &'static str {
        match self {
            Setting::S1 => "1",
            Setting::S2 => "2",
            Setting::S3 => "3",
            Setting::S4 => "4",
            Setting::Full => "full",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown setting '{s}', expected one of 1, 2, 3, 4, full")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    /// Side of the square training crop; larger images are cropped at random.
    pub crop: usize,
    /// Weight of the D-SSIM term.
    pub lambda: f64,
    /// Validation every this many steps (0 disables periodic validation).
    pub val_every: usize,
    /// Checkpoint every this many steps (0 writes only the final one).
    pub save_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 2e-3,
            lr_floor: 0.05,
            crop: 32,
            lambda: DEFAULT_LAMBDA,
            val_every: 250,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub optimize: OptimizeConfig,
    /// Gaussians drawn from the initial point set.
    pub init_gaussians: usize,
    pub background: [f64; 3],
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            optimize: OptimizeConfig::default(),
            init_gaussians: 500,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub lpips: LpipsProvider,
    pub curve_axis: CurveAxis,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lpips: LpipsProvider::Disabled,
            curve_axis: CurveAxis::Columns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDataConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Degradation of the base training scene.
    pub degradation: DegradationSpec,
    /// Degradation of the unseen scene; differs from the base on purpose.
    pub unseen_degradation: DegradationSpec,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            views: 16,
            width: 64,
            height: 64,
            degradation: DegradationSpec {
                gamma: 1.4,
                attenuation: 0.15,
                illumination: IlluminationField::Radial { edge: 0.6 },
                noise_read: 0.01,
                noise_shot: 400.0,
                seed: 0,
            },
            unseen_degradation: DegradationSpec {
                gamma: 1.2,
                attenuation: 0.2,
                illumination: IlluminationField::Linear { left: 0.5, right: 1.0 },
                noise_read: 0.015,
                noise_shot: 300.0,
                seed: 1000,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub toggles: Toggles,
    pub retinex: RetinexConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub adapt: AdaptConfig,
    pub gsplat: ReconstructConfig,
    pub eval: EvalConfig,
    pub synth: SynthDataConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            toggles: Toggles::default(),
            retinex: RetinexConfig::default(),
            unet: UNetConfig::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            adapt: AdaptConfig::default(),
            gsplat: ReconstructConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthDataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `a.b.c = value` inside a TOML table, creating tables as needed.
fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Apply `key=value` overrides. Values are read as TOML literals and
    /// fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_literal(v.trim()))?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        // Unknown keys are silently dropped by serde; compare to catch typos.
        let round: toml::Table = toml::from_str(&cfg.to_toml_string()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let key = o.as_ref().split_once('=').map(|(k, _)| k.trim()).unwrap_or_default();
            if lookup(&round, key).is_none() {
                return Err(Error::Config(format!("unknown configuration key '{key}'")));
            }
        }
        Ok(cfg)
    }

    /// Set the master seed and thread it through every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.adapt.seed = seed;
        self.gsplat.optimize.seed = seed;
        self
    }

    pub fn with_setting(mut self, setting: Setting) -> Self {
        self.toggles = setting.toggles();
        self
    }

    pub fn setting(&self) -> Option<Setting> {
        Setting::from_toggles(self.toggles)
    }

    pub fn validate(&self) -> Result<()> {
        if self.toggles.isfga && !self.toggles.erid {
            return Err(Error::Config("isfga needs erid".into()));
        }
        self.retinex.validate()?;
        self.unet.validate()?;
        self.adapt.validate()?;
        if self.train.iters == 0 || !(self.train.lr > 0.0) || self.train.crop < crate::loss::SSIM_WINDOW {
            return Err(Error::Config(format!(
                "training needs iters ≥ 1, lr > 0 and crop ≥ {}",
                crate::loss::SSIM_WINDOW
            )));
        }
        if !(0.0..=1.0).contains(&self.train.lambda) {
            return Err(Error::Config(format!("train.lambda {} outside [0, 1]", self.train.lambda)));
        }
        Ok(())
    }
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut v = table.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}
