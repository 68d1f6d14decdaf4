//! Pointwise reflectance correction and its few-shot fitting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RgbImage;
use crate::loss::l1;
use crate::nn::{cosine_lr, Adam, Conv2d, Init, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionHead {
    pub hidden: usize,
    c1: Conv2d,
    c2: Conv2d,
}

impl Default for ReflectionHead {
    fn default() -> Self {
        Self::new(16)
    }
}

impl ReflectionHead {
    pub const PREFIX: &'static str = "head.";

    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            c1: Conv2d::new("head.c1", 3, hidden, 1),
            c2: Conv2d::new("head.c2", hidden, 3, 1),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.c1.init(params, rng, Init::He);
        self.c2.init(params, rng, Init::Zero);
    }

    /// `R_0 + ψ(R_0)` before clamping.
    pub fn residual(&self, g: &mut Graph, params: &Params, r0: Var) -> Var {
        let x = self.c1.forward(g, params, r0);
        let x = g.gelu(x);
        let x = self.c2.forward(g, params, x);
        g.add(r0, x)
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, r0: Var) -> Var {
        let x = self.residual(g, params, r0);
        g.clamp_st(x, 0.0, 1.0, f64::INFINITY)
    }

    pub fn apply(&self, r0: &RgbImage, params: &Params) -> RgbImage {
        let mut g = Graph::inference();
        let x = g.constant(r0.to_tensor());
        let y = self.forward(&mut g, params, x);
        RgbImage::from_tensor(g.value(y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub k_views: usize,
    pub iters: usize,
    pub step_size: f64,
    /// Final learning rate as a fraction of `step_size`.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k_views: 10,
            iters: 800,
            step_size: 1e-3,
            lr_floor: 0.0,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.k_views == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config("adaptation needs iters ≥ 1, k_views ≥ 1 and a positive step size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub losses: Vec<f64>,
}

/// All pixels of `images` side by side as a `[3, 1, n]` tensor.
fn pixel_strip(images: &[RgbImage]) -> Tensor {
    let n: usize = images.iter().map(|i| i.width() * i.height()).sum();
    let mut data = vec![0.0; 3 * n];
    let mut offset = 0;
    for img in images {
        for (p, px) in img.data().chunks(3).enumerate() {
            for c in 0..3 {
                data[c * n + offset + p] = px[c];
            }
        }
        offset += img.width() * img.height();
    }
    Tensor::new(&[3, 1, n], data)
}

/// Fit the head on `R_0` images already produced by the frozen enhancer.
pub fn adapt_on_reflectance(
    head: &ReflectionHead,
    init: &Params,
    pairs: &[(RgbImage, RgbImage)],
    cfg: &AdaptConfig,
) -> Result<(Params, AdaptReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("adaptation needs at least one view pair".into()));
    }
    for (r0, t) in pairs {
        if r0.dims() != t.dims() {
            return Err(Error::Shape(format!("pair {:?} vs {:?}", r0.dims(), t.dims())));
        }
    }
    // The head is pointwise, so every pixel of every pair is one sample.
    let inputs: Vec<RgbImage> = pairs.iter().map(|p| p.0.clone()).collect();
    let targets: Vec<RgbImage> = pairs.iter().map(|p| p.1.clone()).collect();
    let x = pixel_strip(&inputs);
    let y = pixel_strip(&targets);
    let mut params = init.with_prefix(ReflectionHead::PREFIX);
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = head.forward(&mut g, &params, xv);
        let loss = l1(&mut g, out, yv);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("adaptation loss at iteration {it}")));
        }
        losses.push(value);
        let grads = g.backward(loss).named();
        adam.step(&mut params, &grads, cosine_lr(cfg.step_size, it, cfg.iters, cfg.lr_floor));
    }
    Ok((params, AdaptReport { losses }))
}

/// Enhance the low-light inputs with the frozen enhancer, then fit the head.
/// Only head parameters are returned; `enhancer_params` is never written.
pub fn adapt(
    enhancer: &Enhancer,
    enhancer_params: &Params,
    head: &ReflectionHead,
    head_params: &Params,
    pairs: &[(RgbImage, RgbImage)],
    cfg: &AdaptConfig,
) -> Result<(Params, AdaptReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("adaptation needs at least one view pair".into()));
    }
    let enhanced = pairs
        .iter()
        .map(|(low, normal)| Ok((enhancer.enhance(low, enhancer_params)?.0, normal.clone())))
        .collect::<Result<Vec<_>>>()?;
    adapt_on_reflectance(head, head_params, &enhanced, cfg)
}
