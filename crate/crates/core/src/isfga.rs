//! Illumination-state-guided frequency-gated attention and the U-Net built
//! from it.
//!
//! A block projects `X` to `Q, K, V`, splits `V` into convolutional bands,
//! rescales each band by an MLP of its energy and the pooled illumination
//! state, gates the values with a projection of the state and aggregates
//! them with ordinary scaled dot-product attention. `Q` and `K` never see the
//! state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, Params};

/// Reduction axes of the band energy statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnergyStat {
    /// Mean over head-dim and pixels, one value per head.
    #[default]
    PerHead,
    /// Mean over all channels and pixels.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Channel width per scale, finest first.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub band_kernels: Vec<usize>,
    /// Size of the projected illumination condition `phi`.
    pub cond_dim: usize,
    pub mlp_hidden: usize,
    pub energy_stat: EnergyStat,
    /// Window of the attention at scales that do not use full attention.
    pub window: usize,
    /// Number of coarsest scales attending over all tokens.
    pub full_attention_scales: usize,
    /// Upper bound on attention score elements per block.
    pub attention_budget: usize,
    pub clamp_margin: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            heads: 4,
            band_kernels: vec![3, 5, 7],
            cond_dim: 16,
            mlp_hidden: 16,
            energy_stat: EnergyStat::PerHead,
            window: 8,
            full_attention_scales: 2,
            attention_budget: 1 << 24,
            clamp_margin: 0.1,
        }
    }
}

impl UNetConfig {
    pub fn scale_count(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() < 2 {
            return bad("the U-Net needs at least two scales".into());
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("widths {:?} must be non-decreasing", self.widths));
        }
        if self.heads == 0 || self.widths.iter().any(|w| w % self.heads != 0) {
            return bad(format!("widths {:?} must be divisible by {} heads", self.widths, self.heads));
        }
        if self.band_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("band kernels {:?} must be odd", self.band_kernels));
        }
        if self.band_kernels.windows(2).any(|k| k[1] <= k[0]) {
            return bad("band kernels must be strictly increasing".into());
        }
        if self.window == 0 {
            return bad("attention window must be positive".into());
        }
        Ok(())
    }

    /// Attention window at scale `s`; `None` means all tokens.
    pub fn window_at(&self, s: usize) -> Option<usize> {
        (s + self.full_attention_scales < self.scale_count()).then_some(self.window)
    }
}

/// Which parts of the block are active. Both off gives plain attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockToggles {
    pub modulation: bool,
    pub gate: bool,
}

impl BlockToggles {
    pub const FULL: Self = Self { modulation: true, gate: true };
    pub const PLAIN: Self = Self { modulation: false, gate: false };
}

#[derive(Debug, Clone, PartialEq)]
struct Band {
    depthwise: Conv2d,
    pointwise: Conv2d,
    mlp1: Conv2d,
    mlp2: Conv2d,
}

/// One IS-FGA attention block over `channels` features.
#[derive(Debug, Clone, PartialEq)]
pub struct IsfgaBlock {
    pub channels: usize,
    pub heads: usize,
    pub window: Option<usize>,
    pub toggles: BlockToggles,
    energy_stat: EnergyStat,
    budget: usize,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out: Conv2d,
    bands: Vec<Band>,
    phi: Conv2d,
    gate: Conv2d,
}

/// Intermediate handles of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub bands: Vec<Var>,
    /// Per-band energy statistic `[E, 1, 1]`.
    pub energies: Vec<Var>,
    pub v_spec: Var,
    pub gate: Option<Var>,
    pub attended: Var,
    /// `X + W_out(attention)`.
    pub out: Var,
}

impl IsfgaBlock {
    pub fn new(name: &str, channels: usize, state_channels: usize, cfg: &UNetConfig, window: Option<usize>, toggles: BlockToggles) -> Self {
        let energy_dim = match cfg.energy_stat {
            EnergyStat::PerHead => cfg.heads,
            EnergyStat::Global => 1,
        };
        let bands = cfg
            .band_kernels
            .iter()
            .enumerate()
            .map(|(b, &k)| Band {
                depthwise: Conv2d::depthwise(format!("{name}.band{b}.dw"), channels, k),
                pointwise: Conv2d::new(format!("{name}.band{b}.pw"), channels, channels, 1).without_bias(),
                mlp1: Conv2d::new(format!("{name}.band{b}.mlp1"), energy_dim + cfg.cond_dim, cfg.mlp_hidden, 1),
                mlp2: Conv2d::new(format!("{name}.band{b}.mlp2"), cfg.mlp_hidden, channels, 1),
            })
            .collect();
        Self {
            channels,
            heads: cfg.heads,
            window,
            toggles,
            energy_stat: cfg.energy_stat,
            budget: cfg.attention_budget,
            q: Conv2d::new(format!("{name}.q"), channels, channels, 1),
            k: Conv2d::new(format!("{name}.k"), channels, channels, 1),
            v: Conv2d::new(format!("{name}.v"), channels, channels, 1),
            out: Conv2d::new(format!("{name}.out"), channels, channels, 1),
            bands,
            phi: Conv2d::new(format!("{name}.phi"), state_channels, cfg.cond_dim, 1),
            gate: Conv2d::new(format!("{name}.gate"), state_channels, channels, 1),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        for c in [&self.q, &self.k, &self.v, &self.out] {
            c.init(params, rng, Init::He);
        }
        if self.toggles.modulation {
            for b in &self.bands {
                b.depthwise.init(params, rng, Init::Box);
                b.pointwise.init(params, rng, Init::Identity);
                b.mlp1.init(params, rng, Init::He);
                b.mlp2.init(params, rng, Init::Zero);
            }
            self.phi.init(params, rng, Init::He);
        }
        if self.toggles.gate {
            self.gate.init(params, rng, Init::He);
        }
    }

    /// `F_b = pointwise_b(depthwise_b(V))` for every band, with edge-replicate padding.
    pub fn band_decompose(&self, g: &mut Graph, params: &Params, v: Var) -> Result<Vec<Var>> {
        let (_, h, w) = g.value(v).chw();
        self.bands
            .iter()
            .map(|b| {
                if b.depthwise.k > h.min(w) {
                    return Err(Error::Shape(format!(
                        "band kernel {} exceeds the {h}x{w} feature map",
                        b.depthwise.k
                    )));
                }
                let r = b.depthwise.k / 2;
                let padded = g.pad_replicate(v, r);
                let x = b.depthwise.forward(g, params, padded);
                let x = g.crop_window(x, r, r, h, w);
                Ok(b.pointwise.forward(g, params, x))
            })
            .collect()
    }

    /// `phi(F_illu) = GELU(W · mean_spatial(F_illu))`, shape `[P, 1, 1]`.
    pub fn condition(&self, g: &mut Graph, params: &Params, state: Var) -> Var {
        let pooled = g.mean_spatial(state);
        let x = self.phi.forward(g, params, pooled);
        g.gelu(x)
    }

    fn energy(&self, g: &mut Graph, band: Var) -> Var {
        match self.energy_stat {
            EnergyStat::PerHead => g.group_mean(band, self.heads),
            EnergyStat::Global => g.group_mean(band, 1),
        }
    }

    /// `V + Σ_b f_b(E[F_b], phi) ⊙ F_b`, also returning the energies.
    pub fn modulate_values(&self, g: &mut Graph, params: &Params, v: Var, bands: &[Var], state: Var) -> Result<(Var, Vec<Var>)> {
        if bands.len() != self.bands.len() {
            return Err(Error::Shape(format!("expected {} bands, got {}", self.bands.len(), bands.len())));
        }
        for &b in bands {
            if g.shape(b) != g.shape(v) {
                return Err(Error::Shape(format!("band {:?} vs values {:?}", g.shape(b), g.shape(v))));
            }
        }
        let cond = self.condition(g, params, state);
        let mut acc = v;
        let mut energies = Vec::with_capacity(bands.len());
        for (op, &fb) in self.bands.iter().zip(bands) {
            let e = self.energy(g, fb);
            energies.push(e);
            let x = g.concat(&[e, cond]);
            let x = op.mlp1.forward(g, params, x);
            let x = g.gelu(x);
            let coeff = op.mlp2.forward(g, params, x);
            let term = g.mul(coeff, fb);
            acc = g.add(acc, term);
        }
        Ok((acc, energies))
    }

    /// Score elements the attention would materialize at `h × w`.
    pub fn score_elements(&self, h: usize, w: usize) -> usize {
        let n = h * w;
        match self.window {
            None => self.heads * n * n,
            Some(s) => {
                let per = s.min(h) * s.min(w);
                self.heads * n * per
            }
        }
    }

    /// Full block: `X + W_out(softmax(QKᵀ/√d)(V_spec ⊙ gate))`.
    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var, state: Option<Var>) -> Result<BlockVars> {
        let (c, h, w) = g.value(x).chw();
        if c != self.channels {
            return Err(Error::Shape(format!("block expects {} channels, got {c}", self.channels)));
        }
        let elements = self.score_elements(h, w);
        if elements > self.budget {
            return Err(Error::AttentionBudget { elements, budget: self.budget });
        }
        let needs_state = self.toggles.modulation || self.toggles.gate;
        let state = match (state, needs_state) {
            (Some(s), _) => {
                if g.shape(s)[1..] != [h, w] {
                    return Err(Error::Shape(format!("state {:?} not aligned with {h}x{w} features", g.shape(s))));
                }
                Some(s)
            }
            (None, true) => return Err(Error::InvalidArgument("this block needs an illumination state".into())),
            (None, false) => None,
        };
        let q = self.q.forward(g, params, x);
        let k = self.k.forward(g, params, x);
        let v = self.v.forward(g, params, x);
        let (bands, energies, v_spec) = if self.toggles.modulation {
            let bands = self.band_decompose(g, params, v)?;
            let (v_spec, energies) = self.modulate_values(g, params, v, &bands, state.expect("checked"))?;
            (bands, energies, v_spec)
        } else {
            (Vec::new(), Vec::new(), v)
        };
        let (gate, values) = if self.toggles.gate {
            let s = self.gate.forward(g, params, state.expect("checked"));
            let gate = g.sigmoid(s);
            (Some(gate), g.mul(v_spec, gate))
        } else {
            (None, v_spec)
        };
        let attended = g.attention(q, k, values, self.heads, self.window);
        let projected = self.out.forward(g, params, attended);
        let out = g.add(x, projected);
        Ok(BlockVars {
            q,
            k,
            v,
            bands,
            energies,
            v_spec,
            gate,
            attended,
            out,
        })
    }
}

/// Per-block values kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagnostics {
    pub name: String,
    pub band_energies: Vec<Vec<f64>>,
    /// Channel-mean gate map `(width, height, values)`.
    pub gate_map: Option<(usize, usize, Vec<f64>)>,
}

/// U-shaped encoder/decoder predicting a residual on the initial reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub toggles: BlockToggles,
    in_conv: Conv2d,
    encoder: Vec<IsfgaBlock>,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
    decoder: Vec<IsfgaBlock>,
    out_conv: Conv2d,
}

/// Input channels: low-light image, initial reflectance and the squashed luminance map.
pub const UNET_INPUT_CHANNELS: usize = 9;

impl UNet {
    pub const PREFIX: &'static str = "isfga.";

    pub fn new(cfg: UNetConfig, state_channels: usize, toggles: BlockToggles) -> Result<Self> {
        cfg.validate()?;
        let s_count = cfg.scale_count();
        let w = &cfg.widths;
        let encoder = (0..s_count)
            .map(|s| IsfgaBlock::new(&format!("isfga.enc{s}"), w[s], state_channels, &cfg, cfg.window_at(s), toggles))
            .collect();
        let down = (0..s_count - 1)
            .map(|s| Conv2d::new(format!("isfga.down{s}"), w[s], w[s + 1], 3))
            .collect();
        let up = (0..s_count - 1)
            .map(|s| Conv2d::new(format!("isfga.up{s}"), w[s + 1], w[s], 3))
            .collect();
        let fuse = (0..s_count - 1)
            .map(|s| Conv2d::new(format!("isfga.fuse{s}"), 2 * w[s], w[s], 3))
            .collect();
        let decoder = (0..s_count - 1)
            .map(|s| IsfgaBlock::new(&format!("isfga.dec{s}"), w[s], state_channels, &cfg, cfg.window_at(s), toggles))
            .collect();
        Ok(Self {
            in_conv: Conv2d::new("isfga.in", UNET_INPUT_CHANNELS, w[0], 3),
            out_conv: Conv2d::new("isfga.out", w[0], 3, 3),
            encoder,
            down,
            up,
            fuse,
            decoder,
            toggles,
            cfg,
        })
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.in_conv.init(params, rng, Init::He);
        for b in self.encoder.iter().chain(&self.decoder) {
            b.init(params, rng);
        }
        for c in self.down.iter().chain(&self.up).chain(&self.fuse) {
            c.init(params, rng, Init::He);
        }
        self.out_conv.init(params, rng, Init::Zero);
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &IsfgaBlock)> {
        let enc = self.encoder.iter().map(|b| ("enc", b));
        enc.chain(self.decoder.iter().map(|b| ("dec", b)))
    }

    /// Padding multiple: `2^(scales − 1)`.
    pub fn multiple(&self) -> usize {
        1 << (self.cfg.scale_count() - 1)
    }

    /// `low`, `r_init`, `lum_map` are `[3, h, w]`; `state` is `[C_s, h, w]`.
    /// Returns the clamped output and per-block handles (encoder first).
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        low: Var,
        r_init: Var,
        lum_map: Var,
        state: Option<Var>,
    ) -> Result<(Var, Vec<(String, BlockVars)>)> {
        let (_, h, w) = g.value(low).chw();
        let m = self.multiple();
        if h < m || w < m {
            return Err(Error::Shape(format!("{w}x{h} input is smaller than the {m}-pixel U-Net multiple")));
        }
        for v in [r_init, lum_map] {
            if g.shape(v) != [3, h, w] {
                return Err(Error::Shape(format!("U-Net inputs misaligned: {:?} vs [3, {h}, {w}]", g.shape(v))));
            }
        }
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let pad = |g: &mut Graph, v: Var| if ph + pw > 0 { g.pad_reflect(v, ph, pw) } else { v };

        // M ∈ [0, ∞) squashed to [0, 1).
        let one_plus = g.add_scalar(lum_map, 1.0);
        let squashed = g.div(lum_map, one_plus);
        let x = g.concat(&[low, r_init, squashed]);
        let x = pad(g, x);
        let mut states = Vec::with_capacity(self.cfg.scale_count());
        if let Some(s) = state {
            let mut s = pad(g, s);
            states.push(s);
            for _ in 1..self.cfg.scale_count() {
                s = g.avg_pool2(s);
                states.push(s);
            }
        }
        let st = |s: usize| states.get(s).copied();

        let mut handles = Vec::new();
        let x = self.in_conv.forward(g, params, x);
        let mut x = g.gelu(x);
        let mut skips = Vec::new();
        for (s, block) in self.encoder.iter().enumerate() {
            let vars = block.forward(g, params, x, st(s))?;
            x = vars.out;
            handles.push((format!("enc{s}"), vars));
            if s + 1 < self.encoder.len() {
                skips.push(x);
                let p = g.avg_pool2(x);
                let d = self.down[s].forward(g, params, p);
                x = g.gelu(d);
            }
        }
        for s in (0..self.decoder.len()).rev() {
            let u = g.upsample2(x);
            let u = self.up[s].forward(g, params, u);
            let cat = g.concat(&[u, skips[s]]);
            let f = self.fuse[s].forward(g, params, cat);
            let f = g.gelu(f);
            let vars = self.decoder[s].forward(g, params, f, st(s))?;
            x = vars.out;
            handles.push((format!("dec{s}"), vars));
        }
        let residual = self.out_conv.forward(g, params, x);
        let residual = if ph + pw > 0 { g.crop(residual, h, w) } else { residual };
        let sum = g.add(r_init, residual);
        let out = g.clamp_st(sum, 0.0, 1.0, self.cfg.clamp_margin);
        Ok((out, handles))
    }
}

/// Summaries of the gates and band energies of evaluated blocks.
pub fn block_diagnostics(g: &Graph, handles: &[(String, BlockVars)]) -> Vec<BlockDiagnostics> {
    handles
        .iter()
        .map(|(name, v)| {
            let gate_map = v.gate.map(|gv| {
                let t = g.value(gv);
                let (c, h, w) = t.chw();
                let mut plane = vec![0.0; h * w];
                for ch in 0..c {
                    for (p, val) in plane.iter_mut().zip(t.channel(ch)) {
                        *p += val / c as f64;
                    }
                }
                (w, h, plane)
            });
            BlockDiagnostics {
                name: name.clone(),
                band_energies: v.energies.iter().map(|&e| g.value(e).data().to_vec()).collect(),
                gate_map,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            widths: vec![8, 8, 16],
            heads: 2,
            band_kernels: vec![3, 5],
            window: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_residual_is_identity() {
        let net = UNet::new(small_cfg(), 4, BlockToggles::FULL).unwrap();
        let mut p = Params::new();
        net.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::inference();
        let mk = |seed: u64, c: usize| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Tensor::new(&[c, 18, 21], (0..c * 378).map(|_| r.random_range(0.0..1.0)).collect())
        };
        let low = g.constant(mk(2, 3));
        let r0 = g.constant(mk(3, 3));
        let m = g.constant(mk(4, 3));
        let s = g.constant(mk(5, 4));
        let (out, handles) = net.forward(&mut g, &p, low, r0, m, Some(s)).unwrap();
        assert_eq!(g.value(out), g.value(r0));
        assert_eq!(handles.len(), 5);
    }

    #[test]
    fn budget_error() {
        let cfg = UNetConfig { attention_budget: 100, ..small_cfg() };
        let block = IsfgaBlock::new("b", 8, 4, &cfg, None, BlockToggles::PLAIN);
        let mut p = Params::new();
        block.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[8, 4, 4]));
        let err = block.forward(&mut g, &p, x, None).unwrap_err();
        assert!(matches!(err, Error::AttentionBudget { .. }));
        assert!(err.to_string().contains("window"));
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig { widths: vec![16], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { widths: vec![32, 16], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { widths: vec![30, 30], ..Default::default() }.validate().is_err());
        assert!(UNetConfig::default().validate().is_ok());
    }
}
