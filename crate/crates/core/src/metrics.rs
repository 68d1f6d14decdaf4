//! Image quality metrics and the JSON metric report.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, separable_forward, FilterPad};
use crate::image::RgbImage;
use crate::loss::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::retinex::RGB_TO_YUV;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("metric operands {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean structural similarity over channels and valid 11×11 windows.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let ta = a.to_tensor();
    let tb = b.to_tensor();
    let f = |t: &crate::tensor::Tensor| separable_forward(t, &k, FilterPad::Valid);
    let mu_a = f(&ta);
    let mu_b = f(&tb);
    let e_aa = f(&ta.zip_map(&ta, |x, y| x * y));
    let e_bb = f(&tb.zip_map(&tb, |x, y| x * y));
    let e_ab = f(&ta.zip_map(&tb, |x, y| x * y));
    let n = mu_a.numel();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = e_aa.data()[i] - ma * ma;
        let vb = e_bb.data()[i] - mb * mb;
        let cov = e_ab.data()[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

pub fn dssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurveAxis {
    /// One value per column.
    #[default]
    Columns,
    Rows,
}

/// Mean luminance along `axis`.
pub fn brightness_curve_along(image: &RgbImage, axis: CurveAxis) -> Vec<f64> {
    let (w, h) = image.dims();
    let y = |x: usize, yy: usize| {
        let p = image.pixel(x, yy);
        RGB_TO_YUV[0][0] * p[0] + RGB_TO_YUV[0][1] * p[1] + RGB_TO_YUV[0][2] * p[2]
    };
    match axis {
        CurveAxis::Columns => (0..w).map(|x| (0..h).map(|r| y(x, r)).sum::<f64>() / h as f64).collect(),
        CurveAxis::Rows => (0..h).map(|r| (0..w).map(|x| y(x, r)).sum::<f64>() / w as f64).collect(),
    }
}

/// Per-column mean luminance.
pub fn brightness_curve(image: &RgbImage) -> Vec<f64> {
    brightness_curve_along(image, CurveAxis::Columns)
}

/// External perceptual metric. The command receives the two image paths
/// as its final arguments and must print one number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LpipsProvider {
    #[default]
    Disabled,
    Command { program: String, #[serde(default)] args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpipsValue {
    Disabled,
    Score(f64),
    Unavailable(String),
}

impl Serialize for LpipsValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LpipsValue::Disabled => s.serialize_none(),
            LpipsValue::Score(v) => s.serialize_f64(*v),
            LpipsValue::Unavailable(msg) => s.serialize_str(&format!("unavailable: {msg}")),
        }
    }
}

pub fn lpips_plugin(a: &Path, b: &Path, provider: &LpipsProvider) -> LpipsValue {
    let LpipsProvider::Command { program, args } = provider else {
        return LpipsValue::Disabled;
    };
    let output = match Command::new(program).args(args).arg(a).arg(b).output() {
        Ok(o) => o,
        Err(e) => return LpipsValue::Unavailable(format!("cannot run {program}: {e}")),
    };
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr).trim().to_string();
        return LpipsValue::Unavailable(format!("{program} exited with {}: {stderr}", output.status));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    match stdout.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => LpipsValue::Score(v),
        _ => LpipsValue::Unavailable(format!("{program} printed '{}'", stdout.trim())),
    }
}

/// PSNR that serializes `+∞` as `"identical"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("identical")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub lpips: LpipsValue,
}

impl ViewMetrics {
    pub fn compute(view: &str, output: &RgbImage, target: &RgbImage) -> Result<Self> {
        Ok(Self {
            view: view.to_string(),
            psnr: Psnr(psnr(output, target)?),
            ssim: ssim(output, target)?,
            lpips: LpipsValue::Disabled,
        })
    }
}

/// One labelled row of metrics. Aggregates are means of the per-view values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub lpips: LpipsValue,
    pub per_view: Vec<ViewMetrics>,
    pub brightness_curve: Vec<f64>,
}

impl MetricReport {
    pub fn from_views(label: &str, per_view: Vec<ViewMetrics>, brightness_curve: Vec<f64>) -> Result<Self> {
        if per_view.is_empty() {
            return Err(Error::InvalidArgument(format!("report {label} has no views")));
        }
        let n = per_view.len() as f64;
        let psnr = per_view.iter().map(|v| v.psnr.0).sum::<f64>() / n;
        let ssim = per_view.iter().map(|v| v.ssim).sum::<f64>() / n;
        let scores: Vec<f64> = per_view
            .iter()
            .filter_map(|v| match v.lpips {
                LpipsValue::Score(s) => Some(s),
                _ => None,
            })
            .collect();
        let lpips = if scores.len() == per_view.len() {
            LpipsValue::Score(scores.iter().sum::<f64>() / n)
        } else {
            per_view
                .iter()
                .find_map(|v| match &v.lpips {
                    LpipsValue::Unavailable(m) => Some(LpipsValue::Unavailable(m.clone())),
                    _ => None,
                })
                .unwrap_or(LpipsValue::Disabled)
        };
        Ok(Self {
            label: label.to_string(),
            psnr: Psnr(psnr),
            ssim,
            lpips,
            per_view,
            brightness_curve,
        })
    }

    /// Score every view with an LPIPS provider, writing PNGs under `dir`.
    pub fn attach_lpips(
        &mut self,
        pairs: &[(RgbImage, RgbImage)],
        provider: &LpipsProvider,
        dir: &Path,
    ) -> Result<()> {
        if matches!(provider, LpipsProvider::Disabled) {
            return Ok(());
        }
        for (v, (out, target)) in self.per_view.iter_mut().zip(pairs) {
            let a = dir.join(format!("{}_output.png", v.view));
            let b = dir.join(format!("{}_target.png", v.view));
            out.save_png(&a)?;
            target.save_png(&b)?;
            v.lpips = lpips_plugin(&a, &b, provider);
        }
        let rebuilt = MetricReport::from_views(&self.label, self.per_view.clone(), self.brightness_curve.clone())?;
        self.lpips = rebuilt.lpips;
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        self.psnr.0
    }
}

/// Mean per-column brightness over several images.
pub fn mean_brightness_curve(images: &[RgbImage]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = images.iter().map(brightness_curve).collect();
    let Some(first) = curves.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}
