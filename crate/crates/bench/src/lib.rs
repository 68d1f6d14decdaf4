//! Shared fixtures for the kernel benchmarks.

use merid_core::dataset::{synth_scene, SynthSpec};
use merid_core::enhance::Enhancer;
use merid_core::graph::Graph;
use merid_core::gsplat::{init_scene, GaussianScene, InitMode};
use merid_core::isfga::{BlockToggles, IsfgaBlock, UNetConfig};
use merid_core::nn::Params;
use merid_core::retinex::{Retinex, RetinexConfig};
use merid_core::{Camera, RgbImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// A ring view of the default synthetic scene.
pub fn view(size: usize) -> (RgbImage, Camera) {
    let s = synth_scene(&SynthSpec::default(), 4, (size, size), 0).expect("synthetic scene");
    (s.images[0].clone(), s.cameras[0].clone())
}

/// `n` random gaussians around the origin.
pub fn gaussians(n: usize) -> GaussianScene {
    let mode = InitMode::RandomInBox { min: [-0.8; 3], max: [0.8; 3] };
    init_scene(&mode, n, 0, [0.0; 3]).expect("initial scene")
}

pub fn retinex() -> (Retinex, Params) {
    let m = Retinex::new(RetinexConfig::default());
    let mut p = Params::new();
    m.init(&mut p, &mut rng(0));
    (m, p)
}

pub struct AttentionFixture {
    pub block: IsfgaBlock,
    pub params: Params,
    pub x: Tensor,
    pub state: Tensor,
}

/// Gated block over `channels × size × size` tokens.
pub fn attention(channels: usize, size: usize, toggles: BlockToggles) -> AttentionFixture {
    let cfg = UNetConfig { widths: vec![channels], ..Default::default() };
    let block = IsfgaBlock::new("blk", channels, 16, &cfg, None, toggles);
    let mut params = Params::new();
    block.init(&mut params, &mut rng(1));
    AttentionFixture {
        block,
        params,
        x: random_tensor(&[channels, size, size], 2),
        state: random_tensor(&[16, size, size], 3),
    }
}

impl AttentionFixture {
    pub fn forward(&self) -> Tensor {
        let mut g = Graph::inference();
        let x = g.constant(self.x.clone());
        let s = g.constant(self.state.clone());
        let v = self.block.forward(&mut g, &self.params, x, Some(s)).expect("forward");
        g.value(v.out).clone()
    }
}

pub fn enhancer(widths: Vec<usize>) -> (Enhancer, Params) {
    let unet = UNetConfig { widths, ..Default::default() };
    let e = Enhancer::new(RetinexConfig::default(), unet, true, true).expect("enhancer");
    let mut p = Params::new();
    e.init(&mut p, &mut rng(4));
    (e, p)
}
