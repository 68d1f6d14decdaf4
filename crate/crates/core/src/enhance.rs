//! Decoupling followed by U-Net restoration: low-light image → `R_0`.

use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{save_heatmap, RgbImage};
use crate::isfga::{block_diagnostics, BlockDiagnostics, BlockToggles, BlockVars, UNet, UNetConfig};
use crate::nn::Params;
use crate::retinex::{GainField, Retinex, RetinexConfig, RetinexVars};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Enhancer {
    pub retinex: Retinex,
    pub unet: UNet,
    /// Explicit decoupling on; otherwise the U-Net sees the raw image.
    pub erid: bool,
}

pub struct EnhancerVars {
    pub output: Var,
    pub retinex: Option<RetinexVars>,
    pub blocks: Vec<(String, BlockVars)>,
}

/// Inspection bundle produced alongside `R_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub gain: Option<GainField>,
    pub luminance_map: Option<Tensor>,
    /// Per-channel spatial mean of the illumination state.
    pub state_means: Vec<f64>,
    pub blocks: Vec<BlockDiagnostics>,
}

#[derive(Serialize)]
struct BandReport<'a> {
    block: &'a str,
    band_energies: &'a [Vec<f64>],
}

impl Diagnostics {
    /// Heatmaps of the gain, luminance map and gates plus band energies as JSON.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(g) = &self.gain {
            save_heatmap(&g.g, g.width, g.height, &dir.join("gain.png"))?;
        }
        if let Some(m) = &self.luminance_map {
            let (c, h, w) = m.chw();
            let mean: Vec<f64> = (0..h * w)
                .map(|p| (0..c).map(|ch| m.channel(ch)[p]).sum::<f64>() / c as f64)
                .collect();
            save_heatmap(&mean, w, h, &dir.join("luminance_map.png"))?;
        }
        for b in &self.blocks {
            if let Some((w, h, plane)) = &b.gate_map {
                save_heatmap(plane, *w, *h, &dir.join(format!("gate_{}.png", b.name)))?;
            }
        }
        let bands: Vec<_> = self
            .blocks
            .iter()
            .map(|b| BandReport {
                block: &b.name,
                band_energies: &b.band_energies,
            })
            .collect();
        let path = dir.join("band_energies.json");
        std::fs::write(&path, serde_json::to_string_pretty(&bands)?).map_err(|e| Error::io(&path, e))
    }
}

impl Enhancer {
    pub fn new(retinex: RetinexConfig, unet: UNetConfig, erid: bool, isfga: bool) -> Result<Self> {
        retinex.validate()?;
        if isfga && !erid {
            return Err(Error::Config("IS-FGA needs the illumination state, enable erid".into()));
        }
        let toggles = if isfga { BlockToggles::FULL } else { BlockToggles::PLAIN };
        let state_channels = retinex.state_channels;
        Ok(Self {
            retinex: Retinex::new(retinex),
            unet: UNet::new(unet, state_channels, toggles)?,
            erid,
        })
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        if self.erid {
            self.retinex.init(params, rng);
        }
        self.unet.init(params, rng);
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, low: Var) -> Result<EnhancerVars> {
        let (r_init, lum_map, state, rv) = if self.erid {
            let rv = self.retinex.forward(g, params, low)?;
            (rv.reflectance, rv.luminance_map, Some(rv.state), Some(rv))
        } else {
            let ones = g.constant(Tensor::full(g.shape(low), 1.0));
            (low, ones, None, None)
        };
        let state = if self.unet.toggles == BlockToggles::PLAIN { None } else { state };
        let (output, blocks) = self.unet.forward(g, params, low, r_init, lum_map, state)?;
        Ok(EnhancerVars {
            output,
            retinex: rv,
            blocks,
        })
    }

    pub fn enhance(&self, low: &RgbImage, params: &Params) -> Result<(RgbImage, Diagnostics)> {
        let mut g = Graph::inference();
        let x = g.constant(low.to_tensor());
        let vars = self.forward(&mut g, params, x)?;
        let out = g.value(vars.output);
        if !out.is_finite() {
            return Err(Error::NonFinite("enhanced image".into()));
        }
        let (w, h) = low.dims();
        let diagnostics = Diagnostics {
            gain: vars.retinex.map(|r| GainField {
                width: w,
                height: h,
                g: g.value(r.gain).data().to_vec(),
            }),
            luminance_map: vars.retinex.map(|r| g.value(r.luminance_map).clone()),
            state_means: vars
                .retinex
                .map(|r| {
                    let s = g.value(r.state);
                    (0..s.chw().0).map(|c| s.channel(c).iter().sum::<f64>() / (h * w) as f64).collect()
                })
                .unwrap_or_default(),
            blocks: block_diagnostics(&g, &vars.blocks),
        };
        Ok((RgbImage::from_tensor(out), diagnostics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            widths: vec![8, 16],
            heads: 2,
            band_kernels: vec![3],
            ..Default::default()
        }
    }

    #[test]
    fn identity_network_returns_reflectance() {
        let e = Enhancer::new(RetinexConfig { radius: 3, ..Default::default() }, small(), true, true).unwrap();
        let mut p = Params::new();
        e.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        e.retinex.set_constant_gain(&mut p, 2.0);
        let low = RgbImage::from_fn(12, 10, |x, y| [0.02 * x as f64, 0.03 * y as f64, 0.1]);
        let (out, diag) = e.enhance(&low, &p).unwrap();
        let d = e.retinex.decouple(&low, &p).unwrap();
        assert_eq!(out, d.reflectance);
        assert_eq!(diag.state_means.len(), 16);
        assert_eq!(e.enhance(&low, &p).unwrap().0, out);
    }

    #[test]
    fn isfga_requires_erid() {
        assert!(Enhancer::new(RetinexConfig::default(), small(), false, true).is_err());
    }

    #[test]
    fn diagnostics_dump() {
        let e = Enhancer::new(RetinexConfig { radius: 3, ..Default::default() }, small(), true, true).unwrap();
        let mut p = Params::new();
        e.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let low = RgbImage::filled(12, 12, [0.1; 3]);
        let (_, diag) = e.enhance(&low, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        diag.dump(dir.path()).unwrap();
        for f in ["gain.png", "luminance_map.png", "gate_enc0.png", "band_energies.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
