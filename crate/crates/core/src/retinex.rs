//! Luminance-domain Retinex decoupling with a bounded learnable gain.
//!
//! The gain only scales the Y channel of a BT.601 YUV transform, so chroma
//! passes through unchanged; the illumination state is a small projection of
//! `[L, R′, ln g]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, FilterPad, Graph, Var};
use crate::image::RgbImage;
use crate::linalg::{mat3_inverse, Mat3};
use crate::nn::{Conv2d, Init, Params};
use crate::tensor::Tensor;

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KU: f64 = 0.436 / (1.0 - KB);
const KV: f64 = 0.615 / (1.0 - KR);

/// BT.601 analog RGB → YUV with `U ∝ B − Y` and `V ∝ R − Y`, so grays have
/// exactly zero chroma.
pub const RGB_TO_YUV: Mat3 = [
    [KR, 1.0 - KR - KB, KB],
    [-KU * KR, -KU * (1.0 - KR - KB), KU * (1.0 - KB)],
    [KV * (1.0 - KR), -KV * (1.0 - KR - KB), -KV * KB],
];

pub fn yuv_to_rgb_matrix() -> Mat3 {
    mat3_inverse(&RGB_TO_YUV).expect("YUV matrix is invertible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetinexConfig {
    pub g_min: f64,
    pub g_max: f64,
    /// Low-pass radius in pixels (σ = radius / 2).
    pub radius: usize,
    /// Division guard of the luminance map.
    pub eps: f64,
    pub state_channels: usize,
    pub hidden: usize,
    /// Straight-through band around `[0, 1]` for the reflectance clamp.
    pub clamp_margin: f64,
}

impl Default for RetinexConfig {
    fn default() -> Self {
        Self {
            g_min: 0.3,
            g_max: 6.0,
            radius: 7,
            eps: 1e-4,
            state_channels: 16,
            hidden: 16,
            clamp_margin: 0.1,
        }
    }
}

impl RetinexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_min > 0.0 && self.g_min < self.g_max) {
            return Err(Error::Config(format!(
                "gain bounds must satisfy 0 < g_min < g_max, got {} and {}",
                self.g_min, self.g_max
            )));
        }
        if self.radius == 0 || !(self.eps > 0.0) || self.state_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("retinex radius, eps and widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YuvImage {
    pub width: usize,
    pub height: usize,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn rgb_to_yuv(image: &RgbImage) -> YuvImage {
    let (width, height) = image.dims();
    let n = width * height;
    let (mut y, mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in image.data().chunks(3) {
        let m = &RGB_TO_YUV;
        y.push(m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2]);
        u.push(m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2]);
        v.push(m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2]);
    }
    YuvImage { width, height, y, u, v }
}

/// Inverse transform without the final clamp.
pub fn yuv_to_rgb_unclamped(yuv: &YuvImage) -> RgbImage {
    let m = yuv_to_rgb_matrix();
    let mut data = Vec::with_capacity(yuv.y.len() * 3);
    for i in 0..yuv.y.len() {
        let (y, u, v) = (yuv.y[i], yuv.u[i], yuv.v[i]);
        for row in &m {
            data.push(row[0] * y + row[1] * u + row[2] * v);
        }
    }
    RgbImage::new(yuv.width, yuv.height, data)
}

pub fn yuv_to_rgb(yuv: &YuvImage) -> RgbImage {
    yuv_to_rgb_unclamped(yuv).clamped()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LuminanceDecomposition {
    pub width: usize,
    pub height: usize,
    /// Low-pass luminance.
    pub l: Vec<f64>,
    /// High-frequency residual `Y − L`.
    pub h: Vec<f64>,
}

fn low_pass_kernel(radius: usize) -> Vec<f64> {
    gaussian_kernel(2 * radius + 1, radius as f64 / 2.0)
}

fn check_radius(radius: usize, width: usize, height: usize) -> Result<()> {
    if radius == 0 || radius >= width.min(height) {
        return Err(Error::InvalidArgument(format!(
            "low-pass radius {radius} must be in [1, {})",
            width.min(height)
        )));
    }
    Ok(())
}

pub fn decompose_luminance(y: &[f64], width: usize, height: usize, radius: usize) -> Result<LuminanceDecomposition> {
    if y.len() != width * height {
        return Err(Error::Shape(format!("plane of {} values is not {width}x{height}", y.len())));
    }
    check_radius(radius, width, height)?;
    let plane = Tensor::new(&[1, height, width], y.to_vec());
    let l = crate::graph::separable_forward(&plane, &low_pass_kernel(radius), FilterPad::Replicate).into_data();
    let h = y.iter().zip(&l).map(|(a, b)| a - b).collect();
    Ok(LuminanceDecomposition { width, height, l, h })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainField {
    pub width: usize,
    pub height: usize,
    pub g: Vec<f64>,
}

/// Outputs of the decoupling stage for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupled {
    pub reflectance: RgbImage,
    pub gain: GainField,
    /// `R′ / max(I, eps)` as `[3, h, w]`.
    pub luminance_map: Tensor,
    /// Illumination state `[C_s, h, w]`.
    pub state: Tensor,
    pub decomposition: LuminanceDecomposition,
}

/// Graph handles produced by [`Retinex::forward`].
#[derive(Debug, Clone, Copy)]
pub struct RetinexVars {
    pub y: Var,
    pub low: Var,
    pub high: Var,
    pub gain: Var,
    pub reflectance: Var,
    pub luminance_map: Var,
    pub state: Var,
}

/// The gain network `f_θ` and state projection `h_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Retinex {
    pub cfg: RetinexConfig,
    pub f1: Conv2d,
    pub f2: Conv2d,
    pub h1: Conv2d,
    pub h2: Conv2d,
}

fn matrix_weight(m: &Mat3) -> Tensor {
    Tensor::new(&[3, 3, 1, 1], m.iter().flatten().copied().collect())
}

impl Retinex {
    pub const PREFIX: &'static str = "retinex.";

    pub fn new(cfg: RetinexConfig) -> Self {
        let (hid, cs) = (cfg.hidden, cfg.state_channels);
        Self {
            f1: Conv2d::new("retinex.f1", 2, hid, 3),
            f2: Conv2d::new("retinex.f2", hid, 1, 3),
            h1: Conv2d::new("retinex.h1", 5, hid, 1),
            h2: Conv2d::new("retinex.h2", hid, cs, 1),
            cfg,
        }
    }

    /// Bias of the last gain layer that yields `g ≡ gain` when its weights are zero.
    pub fn bias_for_gain(&self, gain: f64) -> f64 {
        let s = (gain - self.cfg.g_min) / (self.cfg.g_max - self.cfg.g_min);
        (s / (1.0 - s)).ln()
    }

    /// He-initialized layers with the last gain layer set to the identity gain.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.f1.init(params, rng, Init::He);
        self.f2.init(params, rng, Init::Zero);
        self.h1.init(params, rng, Init::He);
        self.h2.init(params, rng, Init::He);
        self.set_constant_gain(params, 1.0);
    }

    /// Zero the last gain layer and set its bias so that `g ≡ gain`.
    pub fn set_constant_gain(&self, params: &mut Params, gain: f64) {
        let b = self.bias_for_gain(gain);
        params.insert(self.f2.weight_name(), Tensor::zeros(&self.f2.weight_shape()));
        params.insert(self.f2.bias_name(), Tensor::full(&[1, 1, 1], b));
    }

    pub fn gain_param_names(&self) -> Vec<String> {
        let mut v = self.f1.param_names();
        v.extend(self.f2.param_names());
        v
    }

    pub fn state_param_names(&self) -> Vec<String> {
        let mut v = self.h1.param_names();
        v.extend(self.h2.param_names());
        v
    }

    /// Gain from the two luminance planes `[1, h, w]` each.
    pub fn gain(&self, g: &mut Graph, params: &Params, low: Var, high: Var) -> Var {
        let x = g.concat(&[low, high]);
        let x = self.f1.forward(g, params, x);
        let x = g.gelu(x);
        let f = self.f2.forward(g, params, x);
        let s = g.sigmoid(f);
        let s = g.scale(s, self.cfg.g_max - self.cfg.g_min);
        let gain = g.add_scalar(s, self.cfg.g_min);
        // Numerical guard only; sigmoid already keeps g inside the bounds.
        g.clamp_st(gain, self.cfg.g_min, self.cfg.g_max, f64::INFINITY)
    }

    /// `h_θ([L, R′, ln g])`.
    pub fn state(&self, g: &mut Graph, params: &Params, low: Var, reflectance: Var, gain: Var) -> Var {
        let log_g = g.ln(gain);
        let x = g.concat(&[low, reflectance, log_g]);
        let x = self.h1.forward(g, params, x);
        let x = g.gelu(x);
        self.h2.forward(g, params, x)
    }

    /// Full decoupling of an RGB tensor `[3, h, w]` held by `image`.
    pub fn forward(&self, g: &mut Graph, params: &Params, image: Var) -> Result<RetinexVars> {
        let (c, h, w) = g.value(image).chw();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        check_radius(self.cfg.radius, w, h)?;
        let to_yuv = g.constant(matrix_weight(&RGB_TO_YUV));
        let yuv = g.conv2d(image, to_yuv, None, 1);
        let y = g.slice_channels(yuv, 0, 1);
        let uv = g.slice_channels(yuv, 1, 2);
        let low = g.separable_filter(y, &low_pass_kernel(self.cfg.radius), FilterPad::Replicate);
        let high = g.sub(y, low);
        let gain = self.gain(g, params, low, high);
        let y_gained = g.mul(y, gain);
        let yuv_gained = g.concat(&[y_gained, uv]);
        let to_rgb = g.constant(matrix_weight(&yuv_to_rgb_matrix()));
        let rgb = g.conv2d(yuv_gained, to_rgb, None, 1);
        let reflectance = g.clamp_st(rgb, 0.0, 1.0, self.cfg.clamp_margin);
        // The guard is a constant of the input, so no gradient flows into it.
        let eps = self.cfg.eps;
        let guard = g.constant(g.value(image).map(|v| v.max(eps)));
        let luminance_map = g.div(reflectance, guard);
        let state = self.state(g, params, low, reflectance, gain);
        Ok(RetinexVars {
            y,
            low,
            high,
            gain,
            reflectance,
            luminance_map,
            state,
        })
    }

    pub fn compute_gain(&self, decomp: &LuminanceDecomposition, params: &Params) -> Result<GainField> {
        let (w, h) = (decomp.width, decomp.height);
        if decomp.l.len() != w * h || decomp.h.len() != w * h {
            return Err(Error::Shape("L and H planes differ in size".into()));
        }
        let mut g = Graph::inference();
        let low = g.constant(Tensor::new(&[1, h, w], decomp.l.clone()));
        let high = g.constant(Tensor::new(&[1, h, w], decomp.h.clone()));
        let gain = self.gain(&mut g, params, low, high);
        Ok(GainField {
            width: w,
            height: h,
            g: g.value(gain).data().to_vec(),
        })
    }

    pub fn decouple(&self, image: &RgbImage, params: &Params) -> Result<Decoupled> {
        let mut g = Graph::inference();
        let x = g.constant(image.to_tensor());
        let vars = self.forward(&mut g, params, x)?;
        let (w, h) = image.dims();
        Ok(Decoupled {
            reflectance: RgbImage::from_tensor(g.value(vars.reflectance)),
            gain: GainField {
                width: w,
                height: h,
                g: g.value(vars.gain).data().to_vec(),
            },
            luminance_map: g.value(vars.luminance_map).clone(),
            state: g.value(vars.state).clone(),
            decomposition: LuminanceDecomposition {
                width: w,
                height: h,
                l: g.value(vars.low).data().to_vec(),
                h: g.value(vars.high).data().to_vec(),
            },
        })
    }
}

/// `R′ = clamp(C⁻¹(Y·g, U, V))`.
pub fn reconstruct_reflectance(yuv: &YuvImage, gain: &GainField) -> Result<RgbImage> {
    if (yuv.width, yuv.height) != (gain.width, gain.height) {
        return Err(Error::Shape("gain field does not match the image".into()));
    }
    let scaled = YuvImage {
        y: yuv.y.iter().zip(&gain.g).map(|(y, g)| y * g).collect(),
        ..yuv.clone()
    };
    Ok(yuv_to_rgb(&scaled))
}

/// `M = R′ / max(I, eps)` per channel, as `[3, h, w]`.
pub fn luminance_map(reflectance: &RgbImage, input: &RgbImage, eps: f64) -> Result<Tensor> {
    if reflectance.dims() != input.dims() {
        return Err(Error::Shape("reflectance and input differ in size".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let r = reflectance.to_tensor();
    let i = input.to_tensor();
    Ok(r.zip_map(&i, |r, i| r / i.max(eps)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (Retinex, Params) {
        let m = Retinex::new(RetinexConfig::default());
        let mut p = Params::new();
        m.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        (m, p)
    }

    #[test]
    fn yuv_reference_values() {
        let white = rgb_to_yuv(&RgbImage::filled(1, 1, [1.0; 3]));
        assert!((white.y[0] - 1.0).abs() < 1e-12 && white.u[0].abs() < 1e-12 && white.v[0].abs() < 1e-12);
        let gray = rgb_to_yuv(&RgbImage::filled(1, 1, [0.5; 3]));
        assert!((gray.y[0] - 0.5).abs() < 1e-12 && gray.u[0].abs() < 1e-12);
        let red = rgb_to_yuv(&RgbImage::filled(1, 1, [1.0, 0.0, 0.0]));
        assert_eq!(red.y[0], 0.299);
        let over = YuvImage { width: 1, height: 1, y: vec![1.5], u: vec![0.0], v: vec![0.0] };
        assert_eq!(yuv_to_rgb(&over).pixel(0, 0), [1.0; 3]);
    }

    #[test]
    fn impulse_low_pass_is_kernel() {
        let (w, h, r) = (15, 15, 3);
        let mut y = vec![0.0; w * h];
        y[7 * w + 7] = 1.0;
        let d = decompose_luminance(&y, w, h, r).unwrap();
        let k = gaussian_kernel(2 * r + 1, r as f64 / 2.0);
        for dy in 0..7 {
            for dx in 0..7 {
                let expect = k[dy] * k[dx];
                let got = d.l[(4 + dy) * w + 4 + dx];
                assert!((got - expect).abs() < 1e-15);
            }
        }
        assert!(y.iter().zip(d.l.iter().zip(&d.h)).all(|(y, (l, h))| l + h == *y));
        assert!(decompose_luminance(&y, w, h, 15).is_err());
    }

    #[test]
    fn identity_gain_is_identity() {
        let (m, p) = model();
        let img = RgbImage::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.3]);
        let d = m.decouple(&img, &p).unwrap();
        assert!(d.gain.g.iter().all(|g| (g - 1.0).abs() < 1e-12));
        assert!(d.reflectance.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gain_bounds_with_saturated_bias() {
        let (m, mut p) = model();
        let d = decompose_luminance(&vec![0.4; 64], 8, 8, 2).unwrap();
        p.insert(m.f2.bias_name(), Tensor::full(&[1, 1, 1], 1e3));
        assert!(m.compute_gain(&d, &p).unwrap().g.iter().all(|&g| g == 6.0));
        p.insert(m.f2.bias_name(), Tensor::full(&[1, 1, 1], -1e3));
        assert!(m.compute_gain(&d, &p).unwrap().g.iter().all(|&g| g == 0.3));
    }

    #[test]
    fn luminance_map_guard() {
        let i = RgbImage::filled(2, 2, [0.0; 3]);
        let r = RgbImage::filled(2, 2, [0.5; 3]);
        let m = luminance_map(&r, &i, 1e-4).unwrap();
        assert!(m.data().iter().all(|&v| (v - 5000.0).abs() < 1e-9));
    }

    #[test]
    fn gray_scaling() {
        let yuv = rgb_to_yuv(&RgbImage::filled(3, 3, [0.2; 3]));
        let g = GainField { width: 3, height: 3, g: vec![3.0; 9] };
        let r = reconstruct_reflectance(&yuv, &g).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }
}
