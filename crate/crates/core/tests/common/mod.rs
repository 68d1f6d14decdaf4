#![allow(dead_code)]

use std::collections::BTreeMap;

use merid_core::nn::Params;
use merid_core::{RgbImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect())
}

pub fn random_image(w: usize, h: usize, lo: f64, hi: f64, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::new(w, h, (0..w * h * 3).map(|_| r.random_range(lo..hi)).collect())
}

/// Worst relative error between an analytic gradient and central
/// differences of `f` for every scalar of the named parameters.
pub fn fd_check(params: &Params, names: &[String], analytic: &BTreeMap<String, Tensor>, step: f64, f: impl Fn(&Params) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for name in names {
        let n = params.get(name).numel();
        for i in 0..n {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += step;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * step;
            let down = f(&p);
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let scale = numeric.abs().max(exact.abs()).max(1e-5);
            let err = (numeric - exact).abs() / scale;
            assert!(err.is_finite(), "{name}[{i}]: {exact} vs {numeric}");
            if err > worst {
                worst = err;
                at = format!("{name}[{i}]: analytic {exact:e}, numeric {numeric:e}");
            }
        }
    }
    eprintln!("worst relative error {worst:e} at {at}");
    worst
}

/// Fixed linear functional of a tensor used to turn outputs into scalars.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, -1.0, 1.0, seed)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
