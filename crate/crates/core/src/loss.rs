//! Differentiable image losses: L1 and structural dissimilarity.

use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, FilterPad, Graph, Var};
use crate::image::RgbImage;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Default D-SSIM weight.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// `mean |a − b|`.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(g: &mut Graph, a: Var, b: Var) -> Var {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let filt = |g: &mut Graph, x: Var| g.separable_filter(x, &k, FilterPad::Valid);
    let mu_a = filt(g, a);
    let mu_b = filt(g, b);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = filt(g, aa);
    let e_bb = filt(g, bb);
    let e_ab = filt(g, ab);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let d1 = g.add(mu_aa, mu_bb);
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, SSIM_C2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean_all(map)
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)`.
pub fn l1_dssim(g: &mut Graph, a: Var, b: Var, lambda: f64) -> Var {
    let l = l1(g, a, b);
    if lambda == 0.0 {
        return l;
    }
    let s = ssim(g, a, b);
    let ds = g.scale(s, -1.0);
    let ds = g.add_scalar(ds, 1.0);
    let l = g.scale(l, 1.0 - lambda);
    let ds = g.scale(ds, lambda);
    g.add(l, ds)
}

fn check_pair(a: &RgbImage, b: &RgbImage, lambda: f64) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("loss operands {:?} vs {:?}", a.dims(), b.dims())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let (w, h) = a.dims();
    if lambda > 0.0 && (w < SSIM_WINDOW || h < SSIM_WINDOW) {
        return Err(Error::Shape(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    Ok(())
}

/// Photometric loss between a rendering and its target.
pub fn image_loss(rendered: &RgbImage, target: &RgbImage, lambda: f64) -> Result<f64> {
    check_pair(rendered, target, lambda)?;
    let mut g = Graph::inference();
    let a = g.constant(rendered.to_tensor());
    let b = g.constant(target.to_tensor());
    let l = l1_dssim(&mut g, a, b, lambda);
    Ok(g.value(l).data()[0])
}

/// Loss value and its gradient with respect to `rendered` (as `[3, h, w]`).
pub fn image_loss_grad(rendered: &RgbImage, target: &RgbImage, lambda: f64) -> Result<(f64, Tensor)> {
    check_pair(rendered, target, lambda)?;
    let mut g = Graph::new();
    let a = g.input(rendered.to_tensor());
    let b = g.constant(target.to_tensor());
    let l = l1_dssim(&mut g, a, b, lambda);
    let value = g.value(l).data()[0];
    let grads = g.backward(l);
    let d = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(&[3, rendered.height(), rendered.width()]));
    Ok((value, d))
}
