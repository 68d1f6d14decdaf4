//! Named parameter storage, convolution layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not initialized"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.map {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    Zero,
    /// Centre tap 1 per output channel (requires matching in/out groups).
    Identity,
    /// Uniform averaging kernel.
    Box,
}

/// Stride-1, same-padded 2-D convolution. A `k = 1` conv over a `[c, 1, 1]`
/// tensor is a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            k,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            c_in: channels,
            c_out: channels,
            k,
            groups: channels,
            bias: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng, init: Init) {
        let shape = self.weight_shape();
        let n: usize = shape.iter().product();
        let fan_in = shape[1] * self.k * self.k;
        let data = match init {
            Init::He => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::Box => vec![1.0 / (self.k * self.k) as f64; n],
            Init::Identity => {
                let mut d = vec![0.0; n];
                let cin_g = shape[1];
                let cout_g = self.c_out / self.groups;
                assert_eq!(cin_g, cout_g, "identity init needs square groups");
                let centre = (self.k / 2) * self.k + self.k / 2;
                for o in 0..self.c_out {
                    let i = o % cin_g;
                    d[(o * cin_g + i) * self.k * self.k + centre] = 1.0;
                }
                d
            }
        };
        params.insert(self.weight_name(), Tensor::new(&shape, data));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.c_out, 1, 1]));
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var) -> Var {
        let w = g.param(&self.weight_name(), params.get(&self.weight_name()));
        let b = self
            .bias
            .then(|| g.param(&self.bias_name(), params.get(&self.bias_name())));
        g.conv2d(x, w, b, self.groups)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.weight_name()];
        if self.bias {
            names.push(self.bias_name());
        }
        names
    }
}

/// Adam with bias correction; moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments as parameter maps, for checkpointing.
    pub fn moments(&self) -> (Params, Params) {
        let to = |m: &BTreeMap<String, Tensor>| {
            let mut p = Params::new();
            for (k, v) in m {
                p.insert(k.clone(), v.clone());
            }
            p
        };
        (to(&self.m), to(&self.v))
    }

    pub fn from_moments(step: u64, m: &Params, v: &Params) -> Self {
        let to = |p: &Params| p.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        Self {
            step,
            m: to(m),
            v: to(v),
            ..Self::default()
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    base * (floor + (1.0 - floor) * cos)
}
