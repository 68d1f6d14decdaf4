//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and,
//! when any input requires a gradient, a closure mapping the output
//! gradient to input gradients. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid topological order.
//!
//! Named parameters are bound once per graph with [`Graph::param`]; names
//! matching a frozen prefix (or any name when gradients are disabled) are
//! bound as constants.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

/// Padding used by separable filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterPad {
    /// Edge-replicate; output keeps the input size.
    Replicate,
    /// Only full windows; output shrinks by `k - 1` on each axis.
    Valid,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    frozen: Vec<String>,
    params: BTreeMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// A graph that records no backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `(op name, parent vars)` for every node, in evaluation order.
    pub fn ops(&self) -> impl Iterator<Item = (&'static str, Vec<Var>)> + '_ {
        self.nodes
            .iter()
            .map(|n| (n.op, n.parents.iter().map(|&p| Var(p)).collect()))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, op: &'static str) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: impl FnOnce() -> BackwardFn,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward()) } else { None },
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, "constant")
    }

    /// A leaf that receives a gradient (when gradients are enabled).
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, "input")
    }

    /// Bind a named parameter. Repeated binds of the same name share a node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = self.grad_enabled && !self.frozen.iter().any(|p| name.starts_with(p));
        let v = self.push_leaf(value.clone(), trainable, "param");
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of the sum of `output`'s elements.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Keep the gradient of leaves only.
            if !node.parents.is_empty() {
                grads[i] = None;
            } else {
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    // ----------------------------------------------------------------- binary

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let out = broadcast_binary(&ta, &tb, f);
        self.push_op(op, out, &[a, b], move || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let full = broadcast_ternary(g, &ta, &tb, da);
                    reduce_to(&full, ta.shape())
                });
                let gb = needs[1].then(|| {
                    let full = broadcast_ternary(g, &ta, &tb, db);
                    reduce_to(&full, tb.shape())
                });
                vec![ga, gb]
            })
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    // ------------------------------------------------------------------ unary

    /// Elementwise op; `df(x, y)` is the derivative given input and output.
    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let tx = self.rc(x);
        let out = tx.map(f);
        let ty = Rc::new(out.clone());
        self.push_op(op, out, &[x], move || {
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .zip(ty.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data))]
            })
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary("gelu", x, gelu, |x, _| gelu_grad(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary("ln", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary("abs", x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.rc(x);
        let out = tx.map(|v| v * s);
        self.push_op("scale", out, &[x], move || {
            Box::new(move |g, _| vec![Some(g.map(|v| v * s))])
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push_op("add_scalar", out, &[x], || Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Clamp to `[lo, hi]` with a straight-through gradient: the gradient is
    /// passed unchanged wherever the input lies within `margin` of the range,
    /// and beyond it when descent would move the input back towards the range.
    pub fn clamp_st(&mut self, x: Var, lo: f64, hi: f64, margin: f64) -> Var {
        let tx = self.rc(x);
        let out = tx.map(|v| v.clamp(lo, hi));
        self.push_op("clamp", out, &[x], move || {
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &x)| {
                        let inside = x >= lo - margin && x <= hi + margin;
                        // Beyond the margin only gradients that pull back in pass.
                        let restoring = (x > hi + margin && g > 0.0) || (x < lo - margin && g < 0.0);
                        if inside || restoring {
                            g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(g.shape(), data))]
            })
        })
    }

    // ------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.rc(x);
        let out = Tensor::scalar(tx.sum());
        let shape = tx.shape().to_vec();
        self.push_op("sum", out, &[x], move || {
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `[c, h, w] -> [c, 1, 1]` spatial mean.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let c = self.value(x).chw().0;
        self.group_mean(x, c)
    }

    /// Mean over contiguous channel groups and all pixels: `[c, h, w] -> [groups, 1, 1]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Var {
        let tx = self.rc(x);
        let (c, h, w) = tx.chw();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let per = (c / groups) * h * w;
        let data: Vec<f64> = tx
            .data()
            .chunks(per)
            .map(|chunk| chunk.iter().sum::<f64>() / per as f64)
            .collect();
        let out = Tensor::new(&[groups, 1, 1], data);
        self.push_op("group_mean", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(c * h * w);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / per as f64, per));
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            })
        })
    }

    // ------------------------------------------------------------- structural

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.rc(p)).collect();
        let (_, h, w) = tensors[0].chw();
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for t in &tensors {
            let (c, th, tw) = t.chw();
            assert_eq!((th, tw), (h, w), "concat spatial mismatch");
            channels.push(c);
            data.extend_from_slice(t.data());
        }
        let total: usize = channels.iter().sum();
        let out = Tensor::new(&[total, h, w], data);
        self.push_op("concat", out, parts, move || {
            Box::new(move |g, needs| {
                let mut offset = 0;
                channels
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = offset * h * w;
                        offset += c;
                        need.then(|| {
                            Tensor::new(&[c, h, w], g.data()[start..start + c * h * w].to_vec())
                        })
                    })
                    .collect()
            })
        })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c);
        let out = Tensor::new(
            &[len, h, w],
            self.value(x).data()[start * h * w..(start + len) * h * w].to_vec(),
        );
        self.push_op("slice", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                gx.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
                vec![Some(gx)]
            })
        })
    }

    /// 2×2 average pooling; height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        let (c, h, w) = self.value(x).chw();
        self.push_op("avg_pool2", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                let (oh, ow) = (h / 2, w / 2);
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = g.data()[(ch * oh + y) * ow + xx] * 0.25;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx.data_mut()[(ch * h + 2 * y + dy) * w + 2 * xx + dx] += v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[c, 2 * h, 2 * w], data);
        self.push_op("upsample2", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx.data_mut()[(ch * h + y / 2) * w + xx / 2] +=
                                g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Reflect-pad the bottom and right edges.
    pub fn pad_reflect(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        if pad_h == 0 && pad_w == 0 {
            return x;
        }
        let (c, h, w) = self.value(x).chw();
        assert!(pad_h < h && pad_w < w, "reflect padding larger than the input");
        let (oh, ow) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let src = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ch * oh + y) * ow + xx] =
                        src[(ch * h + reflect(y, h)) * w + reflect(xx, w)];
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], data);
        self.push_op("pad_reflect", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx.data_mut()[(ch * h + reflect(y, h)) * w + reflect(xx, w)] +=
                                g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Keep the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        self.crop_window(x, 0, 0, h, w)
    }

    /// Keep the `h × w` window whose top-left corner is `(y0, x0)`.
    pub fn crop_window(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let (c, ih, iw) = self.value(x).chw();
        if (y0, x0, ih, iw) == (0, 0, h, w) {
            return x;
        }
        assert!(y0 + h <= ih && x0 + w <= iw);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * ih + y0 + y) * iw + x0;
                data.extend_from_slice(&src[row..row + w]);
            }
        }
        let out = Tensor::new(&[c, h, w], data);
        self.push_op("crop", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, ih, iw]);
                for ch in 0..c {
                    for y in 0..h {
                        let row = (ch * ih + y0 + y) * iw + x0;
                        gx.data_mut()[row..row + w]
                            .copy_from_slice(&g.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Pad every edge by `r` pixels, repeating the border values.
    pub fn pad_replicate(&mut self, x: Var, r: usize) -> Var {
        if r == 0 {
            return x;
        }
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h + 2 * r, w + 2 * r);
        let clampi = move |i: usize, n: usize| i.saturating_sub(r).min(n - 1);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ch * oh + y) * ow + xx] = src[(ch * h + clampi(y, h)) * w + clampi(xx, w)];
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], data);
        self.push_op("pad_replicate", out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx.data_mut()[(ch * h + clampi(y, h)) * w + clampi(xx, w)] +=
                                g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    // ----------------------------------------------------------- convolutions

    /// Stride-1 convolution with zero "same" padding (odd kernels only).
    ///
    /// `weight` is `[c_out, c_in / groups, k, k]`, `bias` is `[c_out]`-shaped
    /// (any shape with `c_out` elements).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, groups: usize) -> Var {
        let tx = self.rc(x);
        let tw = self.rc(weight);
        let tb = bias.map(|b| self.rc(b));
        let out = conv2d_forward(&tx, &tw, tb.as_deref(), groups);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push_op("conv2d", out, &parents, move || {
            Box::new(move |g, needs| {
                let (gx, gw) = conv2d_backward(&tx, &tw, g, groups, needs[0], needs[1]);
                let mut grads = vec![gx, gw];
                if let Some(tb) = &tb {
                    grads.push(needs[2].then(|| {
                        let (c, h, w) = g.chw();
                        let sums: Vec<f64> = (0..c)
                            .map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().sum())
                            .collect();
                        Tensor::new(tb.shape(), sums)
                    }));
                }
                grads
            })
        })
    }

    /// Per-channel separable filter with a fixed 1-D kernel along both axes.
    pub fn separable_filter(&mut self, x: Var, kernel: &[f64], pad: FilterPad) -> Var {
        let tx = self.rc(x);
        let kernel = kernel.to_vec();
        let out = separable_forward(&tx, &kernel, pad);
        let in_shape = tx.shape().to_vec();
        self.push_op("separable_filter", out, &[x], move || {
            Box::new(move |g, _| vec![Some(separable_adjoint(g, &kernel, pad, &in_shape))])
        })
    }

    // -------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention over pixel tokens.
    ///
    /// `q`, `k`, `v` are `[c, h, w]`; channels split into `heads` contiguous
    /// groups. With `window = Some(s)` tokens attend only within the
    /// `s × s` tile containing them, otherwise over the whole map.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: Option<usize>) -> Var {
        let (tq, tk, tv) = (self.rc(q), self.rc(k), self.rc(v));
        let (c, h, w) = tq.chw();
        assert_eq!(tk.shape(), tq.shape());
        assert_eq!(tv.shape(), tq.shape());
        assert!(c % heads == 0);
        let d = c / heads;
        let groups = token_groups(h, w, window);
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for tokens in &groups {
            for head in 0..heads {
                let qm = gather(&tq, tokens, head * d, d);
                let km = gather(&tk, tokens, head * d, d);
                let vm = gather(&tv, tokens, head * d, d);
                let p = softmax_scores(&qm, &km, tokens.len(), d);
                let n = tokens.len();
                let mut o = vec![0.0; n * d];
                gemm(n, n, d, &p, false, &vm, false, &mut o, 0.0);
                scatter_add(&mut out, &o, tokens, head * d, d);
                probs.push(p);
            }
        }
        self.push_op("attention", out, &[q, k, v], move || {
            Box::new(move |g, _| {
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = Tensor::zeros(&[c, h, w]);
                let mut gk = Tensor::zeros(&[c, h, w]);
                let mut gv = Tensor::zeros(&[c, h, w]);
                let mut idx = 0;
                for tokens in &groups {
                    let n = tokens.len();
                    for head in 0..heads {
                        let p = &probs[idx];
                        idx += 1;
                        let qm = gather(&tq, tokens, head * d, d);
                        let km = gather(&tk, tokens, head * d, d);
                        let vm = gather(&tv, tokens, head * d, d);
                        let go = gather(g, tokens, head * d, d);
                        // dV = Pᵀ dO
                        let mut dv = vec![0.0; n * d];
                        gemm(n, n, d, p, true, &go, false, &mut dv, 0.0);
                        // dP = dO Vᵀ
                        let mut dp = vec![0.0; n * n];
                        gemm(n, d, n, &go, false, &vm, true, &mut dp, 0.0);
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), with the 1/√d folded in
                        for r in 0..n {
                            let row = r * n..(r + 1) * n;
                            let dot: f64 = dp[row.clone()]
                                .iter()
                                .zip(&p[row.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            for i in row {
                                dp[i] = p[i] * (dp[i] - dot) * scale;
                            }
                        }
                        let mut dq = vec![0.0; n * d];
                        gemm(n, n, d, &dp, false, &km, false, &mut dq, 0.0);
                        let mut dk = vec![0.0; n * d];
                        gemm(n, n, d, &dp, true, &qm, false, &mut dk, 0.0);
                        scatter_add(&mut gq, &dq, tokens, head * d, d);
                        scatter_add(&mut gk, &dk, tokens, head * d, d);
                        scatter_add(&mut gv, &dv, tokens, head * d, d);
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            })
        })
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

// ------------------------------------------------------------------ kernels

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "rank mismatch {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], operands: &[&[usize]], mut f: impl FnMut(usize, &[usize])) {
    let strides: Vec<Vec<usize>> = operands.iter().map(|s| broadcast_strides(s, out)).collect();
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; operands.len()];
    for lin in 0..n {
        f(lin, &offs);
        // increment multi-index
        for dim in (0..rank).rev() {
            idx[dim] += 1;
            for (o, s) in offs.iter_mut().zip(&strides) {
                *o += s[dim];
            }
            if idx[dim] < out[dim] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(&strides) {
                *o -= s[dim] * out[dim];
            }
            idx[dim] = 0;
        }
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &[a.shape(), b.shape()], |i, o| {
        data[i] = f(a.data()[o[0]], b.data()[o[1]]);
    });
    Tensor::new(&out, data)
}

fn broadcast_ternary(g: &Tensor, a: &Tensor, b: &Tensor, f: fn(f64, f64, f64) -> f64) -> Tensor {
    let out = g.shape();
    if a.shape() == out && b.shape() == out {
        let data = g
            .data()
            .iter()
            .zip(a.data())
            .zip(b.data())
            .map(|((&g, &a), &b)| f(g, a, b))
            .collect();
        return Tensor::new(out, data);
    }
    let mut data = vec![0.0; g.numel()];
    for_each_broadcast(out, &[out, a.shape(), b.shape()], |i, o| {
        data[i] = f(g.data()[o[0]], a.data()[o[1]], b.data()[o[2]]);
    });
    Tensor::new(out, data)
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut data = vec![0.0; shape.iter().product()];
    let strides = broadcast_strides(shape, g.shape());
    let rank = shape.len();
    let out = g.shape();
    let mut idx = vec![0usize; rank];
    for &gv in g.data() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data[off] += gv;
        for dim in (0..rank).rev() {
            idx[dim] += 1;
            if idx[dim] < out[dim] {
                break;
            }
            idx[dim] = 0;
        }
    }
    Tensor::new(shape, data)
}

pub(crate) fn avg_pool2(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dimensions, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let src = t.data();
    let mut data = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                data[(ch * oh + y) * ow + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Tensor::new(&[c, oh, ow], data)
}

fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let r = k as isize / 2;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let r = k as isize / 2;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, wt: &Tensor, groups: usize) -> (usize, usize, usize, usize, usize, usize) {
    let (c_in, h, w) = x.chw();
    let ws = wt.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4");
    let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k, "square kernels only");
    assert!(k % 2 == 1, "odd kernels only");
    assert_eq!(cin_g * groups, c_in, "conv input channels {c_in} vs weight {ws:?} / groups {groups}");
    assert_eq!(c_out % groups, 0);
    (c_in, h, w, c_out, cin_g, k)
}

pub(crate) fn conv2d_forward(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, groups: usize) -> Tensor {
    let (_, h, w, c_out, cin_g, k) = conv_dims(x, wt, groups);
    let hw = h * w;
    let cout_g = c_out / groups;
    let mut out = vec![0.0; c_out * hw];
    if k == 1 {
        for g in 0..groups {
            gemm(
                cout_g,
                cin_g,
                hw,
                &wt.data()[g * cout_g * cin_g..(g + 1) * cout_g * cin_g],
                false,
                &x.data()[g * cin_g * hw..(g + 1) * cin_g * hw],
                false,
                &mut out[g * cout_g * hw..(g + 1) * cout_g * hw],
                0.0,
            );
        }
    } else if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x.data(), wt.data(), c_out, h, w, k, &mut out);
    } else {
        let kk = cin_g * k * k;
        let mut cols = vec![0.0; kk * hw];
        for g in 0..groups {
            im2col(&x.data()[g * cin_g * hw..(g + 1) * cin_g * hw], cin_g, h, w, k, &mut cols);
            gemm(
                cout_g,
                kk,
                hw,
                &wt.data()[g * cout_g * kk..(g + 1) * cout_g * kk],
                false,
                &cols,
                false,
                &mut out[g * cout_g * hw..(g + 1) * cout_g * hw],
                0.0,
            );
        }
    }
    if let Some(b) = bias {
        assert_eq!(b.numel(), c_out);
        for (ch, &bv) in b.data().iter().enumerate() {
            for v in &mut out[ch * hw..(ch + 1) * hw] {
                *v += bv;
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

fn depthwise_forward(x: &[f64], wt: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let r = k as isize / 2;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let kern = &wt[ch * k * k..(ch + 1) * k * k];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    let sy = y + ky - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k as isize {
                        let sx = xx + kx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kern[(ky * k as isize + kx) as usize] * plane[(sy * w as isize + sx) as usize];
                    }
                }
                o[(y * w as isize + xx) as usize] = acc;
            }
        }
    }
}

fn conv2d_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &Tensor,
    groups: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c_in, h, w, c_out, cin_g, k) = conv_dims(x, wt, groups);
    let hw = h * w;
    let cout_g = c_out / groups;
    let gd = g.data();
    let mut gx = need_x.then(|| vec![0.0; c_in * hw]);
    let mut gw = need_w.then(|| vec![0.0; wt.numel()]);

    if cin_g == 1 && cout_g == 1 && k > 1 {
        let r = k as isize / 2;
        for ch in 0..c_out {
            let plane = &x.data()[ch * hw..(ch + 1) * hw];
            let kern = &wt.data()[ch * k * k..(ch + 1) * k * k];
            let gp = &gd[ch * hw..(ch + 1) * hw];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let go = gp[(y * w as isize + xx) as usize];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..k as isize {
                        let sy = y + ky - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k as isize {
                            let sx = xx + kx - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let ki = (ky * k as isize + kx) as usize;
                            let si = (sy * w as isize + sx) as usize;
                            if let Some(gw) = gw.as_mut() {
                                gw[ch * k * k + ki] += go * plane[si];
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx[ch * hw + si] += go * kern[ki];
                            }
                        }
                    }
                }
            }
        }
    } else {
        let kk = cin_g * k * k;
        let mut cols = vec![0.0; kk * hw];
        for grp in 0..groups {
            let gslice = &gd[grp * cout_g * hw..(grp + 1) * cout_g * hw];
            let wslice = &wt.data()[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            let xslice = &x.data()[grp * cin_g * hw..(grp + 1) * cin_g * hw];
            if let Some(gw) = gw.as_mut() {
                let src: &[f64] = if k == 1 {
                    xslice
                } else {
                    im2col(xslice, cin_g, h, w, k, &mut cols);
                    &cols
                };
                gemm(
                    cout_g,
                    hw,
                    kk,
                    gslice,
                    false,
                    src,
                    true,
                    &mut gw[grp * cout_g * kk..(grp + 1) * cout_g * kk],
                    0.0,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[grp * cin_g * hw..(grp + 1) * cin_g * hw];
                if k == 1 {
                    gemm(kk, cout_g, hw, wslice, true, gslice, false, dst, 0.0);
                } else {
                    gemm(kk, cout_g, hw, wslice, true, gslice, false, &mut cols, 0.0);
                    col2im(&cols, cin_g, h, w, k, dst);
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(wt.shape(), d)),
    )
}

fn filter_axis(
    src: &[f64],
    len: usize,
    stride: usize,
    kernel: &[f64],
    pad: FilterPad,
    out: &mut [f64],
    out_stride: usize,
) {
    let k = kernel.len();
    let r = (k / 2) as isize;
    match pad {
        FilterPad::Replicate => {
            for i in 0..len {
                let mut acc = 0.0;
                for (j, &kv) in kernel.iter().enumerate() {
                    let s = (i as isize + j as isize - r).clamp(0, len as isize - 1) as usize;
                    acc += kv * src[s * stride];
                }
                out[i * out_stride] = acc;
            }
        }
        FilterPad::Valid => {
            for i in 0..len + 1 - k {
                let mut acc = 0.0;
                for (j, &kv) in kernel.iter().enumerate() {
                    acc += kv * src[(i + j) * stride];
                }
                out[i * out_stride] = acc;
            }
        }
    }
}

fn filter_axis_adjoint(
    g: &[f64],
    len: usize,
    stride: usize,
    kernel: &[f64],
    pad: FilterPad,
    out: &mut [f64],
    g_stride: usize,
) {
    let k = kernel.len();
    let r = (k / 2) as isize;
    match pad {
        FilterPad::Replicate => {
            for i in 0..len {
                let gv = g[i * g_stride];
                for (j, &kv) in kernel.iter().enumerate() {
                    let s = (i as isize + j as isize - r).clamp(0, len as isize - 1) as usize;
                    out[s * stride] += kv * gv;
                }
            }
        }
        FilterPad::Valid => {
            for i in 0..len + 1 - k {
                let gv = g[i * g_stride];
                for (j, &kv) in kernel.iter().enumerate() {
                    out[(i + j) * stride] += kv * gv;
                }
            }
        }
    }
}

fn filtered_dims(h: usize, w: usize, k: usize, pad: FilterPad) -> (usize, usize) {
    match pad {
        FilterPad::Replicate => (h, w),
        FilterPad::Valid => {
            assert!(h >= k && w >= k, "{h}x{w} input smaller than a {k}-tap window");
            (h + 1 - k, w + 1 - k)
        }
    }
}

pub(crate) fn separable_forward(x: &Tensor, kernel: &[f64], pad: FilterPad) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = filtered_dims(h, w, kernel.len(), pad);
    let mut out = vec![0.0; c * oh * ow];
    let mut tmp = vec![0.0; oh * w];
    for ch in 0..c {
        let plane = x.channel(ch);
        // vertical pass: [h, w] -> [oh, w]
        for col in 0..w {
            filter_axis(&plane[col..], h, w, kernel, pad, &mut tmp[col..], w);
        }
        // horizontal pass: [oh, w] -> [oh, ow]
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for row in 0..oh {
            filter_axis(&tmp[row * w..], w, 1, kernel, pad, &mut o[row * ow..], 1);
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

fn separable_adjoint(g: &Tensor, kernel: &[f64], pad: FilterPad, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = filtered_dims(h, w, kernel.len(), pad);
    let mut gx = vec![0.0; c * h * w];
    let mut tmp = vec![0.0; oh * w];
    for ch in 0..c {
        tmp.fill(0.0);
        let gp = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
        for row in 0..oh {
            filter_axis_adjoint(&gp[row * ow..], w, 1, kernel, pad, &mut tmp[row * w..], 1);
        }
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for col in 0..w {
            filter_axis_adjoint(&tmp[col..], h, w, kernel, pad, &mut dst[col..], w);
        }
    }
    Tensor::new(in_shape, gx)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

pub(crate) fn token_groups(h: usize, w: usize, window: Option<usize>) -> Vec<Vec<usize>> {
    match window {
        None => vec![(0..h * w).collect()],
        Some(s) => {
            let mut groups = Vec::new();
            for y0 in (0..h).step_by(s) {
                for x0 in (0..w).step_by(s) {
                    let mut g = Vec::with_capacity(s * s);
                    for y in y0..(y0 + s).min(h) {
                        for x in x0..(x0 + s).min(w) {
                            g.push(y * w + x);
                        }
                    }
                    groups.push(g);
                }
            }
            groups
        }
    }
}

/// Token-major `[n, d]` slice of channels `c0..c0 + d`.
fn gather(t: &Tensor, tokens: &[usize], c0: usize, d: usize) -> Vec<f64> {
    let (_, h, w) = t.chw();
    let hw = h * w;
    let mut m = vec![0.0; tokens.len() * d];
    for j in 0..d {
        let plane = &t.data()[(c0 + j) * hw..(c0 + j + 1) * hw];
        for (i, &tok) in tokens.iter().enumerate() {
            m[i * d + j] = plane[tok];
        }
    }
    m
}

fn scatter_add(t: &mut Tensor, m: &[f64], tokens: &[usize], c0: usize, d: usize) {
    let (_, h, w) = t.chw();
    let hw = h * w;
    let data = t.data_mut();
    for j in 0..d {
        for (i, &tok) in tokens.iter().enumerate() {
            data[(c0 + j) * hw + tok] += m[i * d + j];
        }
    }
}

/// Row-normalized `softmax(Q Kᵀ / √d)` for token-major `[n, d]` blocks.
fn softmax_scores(q: &[f64], k: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    gemm(n, d, n, q, false, k, true, &mut s, 0.0);
    let scale = 1.0 / (d as f64).sqrt();
    for row in s.chunks_mut(n) {
        let mut max = f64::NEG_INFINITY;
        for v in row.iter_mut() {
            *v *= scale;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    s
}

/// The row-stochastic score matrices the attention op uses, one per
/// `(token group, head)` in evaluation order.
pub fn attention_scores(q: &Tensor, k: &Tensor, heads: usize, window: Option<usize>) -> Vec<Vec<f64>> {
    let (c, h, w) = q.chw();
    let d = c / heads;
    let mut out = Vec::new();
    for tokens in token_groups(h, w, window) {
        for head in 0..heads {
            let qm = gather(q, &tokens, head * d, d);
            let km = gather(k, &tokens, head * d, d);
            out.push(softmax_scores(&qm, &km, tokens.len(), d));
        }
    }
    out
}
