//! Tape-based reverse-mode differentiation over `C x H x W` tensors.
//!
//! Nodes are appended in evaluation order; [`Graph::backward`] walks them in
//! reverse. Only the operations the detector needs are provided.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::cost::{cost_block_raw, window_point};
use crate::grids::{bilinear_taps, gradient_components, Resampler};
use crate::par;

/// Dense `channels x height x width` tensor (channel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f64) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor size mismatch");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Index into a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Weight tensor layout `[out][in][k][k]` for convolutions and
/// `[in][out][k][k]` for transposed convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
        stride: usize,
        crop: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Resample {
        x: Var,
        r: Arc<Resampler>,
    },
    SplatMax {
        x: Var,
        winners: Vec<Option<usize>>,
    },
    GradMag {
        x: Var,
    },
    CostBlock {
        fa: Var,
        fb: Var,
        flow: Arc<(Vec<f64>, Vec<f64>)>,
        radius: usize,
        argmin: Vec<usize>,
    },
    Focal {
        p: Var,
        target: Arc<Vec<f64>>,
        gamma: f64,
        alpha: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation counters, for checking which paths a forward pass took.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub splats: usize,
    pub resamples: usize,
    pub cost_blocks: usize,
    pub convs: usize,
}

/// Focal-loss probability clamp.
pub const FOCAL_EPS: f64 = 1e-7;

/// Recording graph.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    counts: OpCounts,
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
            params: HashMap::new(),
            counts: OpCounts::default(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counts(&self) -> &OpCounts {
        &self.counts
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf; repeated calls with the same id return the same node,
    /// so every use shares one gradient accumulator.
    pub fn param(&mut self, id: ParamId, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, shape: ConvShape, stride: usize) -> Var {
        let pad = shape.k / 2;
        let out = conv_forward(self.value(x), &self.value(w).data, &self.value(b).data, shape, stride, pad);
        self.counts.convs += 1;
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                shape,
                stride,
                pad,
            },
        )
    }

    /// Transposed convolution producing exactly `stride` times the input
    /// size; the full output is cropped by `(k - stride) / 2` on the leading
    /// side.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, shape: ConvShape, stride: usize) -> Var {
        let crop = (shape.k - stride) / 2;
        let out = conv_transpose_forward(self.value(x), &self.value(w).data, &self.value(b).data, shape, stride, crop);
        self.push(
            out,
            Op::ConvTranspose {
                x,
                w,
                b,
                shape,
                stride,
                crop,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = Tensor::from_vec(t.c, t.h, t.w, data);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_vec(t.c, t.h, t.w, data);
        self.push(out, Op::Sigmoid { x })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.c, ta.h, ta.w, data);
        self.push(out, Op::Mul { a, b })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::from_vec(1, 1, 1, vec![total]), Op::Sum { x })
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.c, ta.h, ta.w, data);
        self.push(out, Op::Add { a, b })
    }

    /// Multiply every channel of `x` by the single-channel map `a`.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Var {
        let (tx, ta) = (self.value(x), self.value(a));
        assert_eq!((ta.c, ta.h, ta.w), (1, tx.h, tx.w), "scale_channels shape mismatch");
        let n = tx.plane();
        let data = tx.data.iter().enumerate().map(|(i, v)| v * ta.data[i % n]).collect();
        let out = Tensor::from_vec(tx.c, tx.h, tx.w, data);
        self.push(out, Op::ScaleChannels { x, a })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (h, w) = (self.value(parts[0]).h, self.value(parts[0]).w);
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!((t.h, t.w), (h, w), "concat spatial mismatch");
            c += t.c;
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::from_vec(c, h, w, data), Op::Concat { parts: parts.to_vec() })
    }

    /// Apply a fixed sparse resampling to every channel.
    pub fn resample(&mut self, x: Var, r: Arc<Resampler>) -> Var {
        let t = self.value(x);
        assert_eq!((t.w, t.h), (r.in_w, r.in_h), "resampler input mismatch");
        let mut data = vec![0.0; t.c * r.out_len()];
        for c in 0..t.c {
            r.apply_into(t.channel(c), &mut data[c * r.out_len()..(c + 1) * r.out_len()]);
        }
        let out = Tensor::from_vec(t.c, r.out_h, r.out_w, data);
        self.counts.resamples += 1;
        self.push(out, Op::Resample { x, r })
    }

    /// Max-splat every channel to precomputed targets (same grid size).
    pub fn splat_max(&mut self, x: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(x);
        let n = t.plane();
        assert_eq!(targets.len(), n);
        let mut data = Vec::with_capacity(t.data.len());
        let mut winners = Vec::with_capacity(t.data.len());
        for c in 0..t.c {
            let (vals, win) = crate::warping::splat_max(t.channel(c), targets, n);
            data.extend(vals);
            winners.extend(win.into_iter().map(|w| w.map(|s| c * n + s)));
        }
        let out = Tensor::from_vec(t.c, t.h, t.w, data);
        self.counts.splats += 1;
        self.push(out, Op::SplatMax { x, winners })
    }

    /// Per-channel gradient magnitude.
    pub fn grad_mag(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.data.len());
        for c in 0..t.c {
            let (gx, gy) = gradient_components(t.w, t.h, t.channel(c));
            data.extend(gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()));
        }
        let out = Tensor::from_vec(t.c, t.h, t.w, data);
        self.push(out, Op::GradMag { x })
    }

    /// Cost block between `fa` and `fb` along the flow `(u, v)`.
    pub fn cost_block(&mut self, fa: Var, fb: Var, flow: Arc<(Vec<f64>, Vec<f64>)>, radius: usize) -> Var {
        let (ta, tb) = (self.value(fa), self.value(fb));
        assert_eq!(ta.shape(), tb.shape());
        let raw = cost_block_raw(&ta.data, &tb.data, ta.c, ta.w, ta.h, &flow.0, &flow.1, radius);
        let out = Tensor::from_vec(1, ta.h, ta.w, raw.values);
        self.counts.cost_blocks += 1;
        self.push(
            out,
            Op::CostBlock {
                fa,
                fb,
                flow,
                radius,
                argmin: raw.argmin,
            },
        )
    }

    /// Mean focal loss of probabilities `p` against binary `target`.
    pub fn focal(&mut self, p: Var, target: Arc<Vec<f64>>, gamma: f64, alpha: f64) -> Var {
        let t = self.value(p);
        assert_eq!(t.data.len(), target.len(), "focal target size");
        let loss = focal_value(&t.data, &target, gamma, alpha);
        self.push(
            Tensor::from_vec(1, 1, 1, vec![loss]),
            Op::Focal {
                p,
                target,
                gamma,
                alpha,
            },
        )
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).data[0]).sum();
        self.push(
            Tensor::from_vec(1, 1, 1, vec![total]),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => vec![*x, *w, *b],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Resample { x, .. }
            | Op::SplatMax { x, .. }
            | Op::GradMag { x }
            | Op::Sum { x } => vec![*x],
            Op::Mul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::ScaleChannels { x, a } => vec![*x, *a],
            Op::Concat { parts } => parts.clone(),
            Op::CostBlock { fa, fb, .. } => vec![*fa, *fb],
            Op::Focal { p, .. } => vec![*p],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }

    /// Whether `to` depends on `from` through recorded operations.
    pub fn reaches(&self, from: Var, to: Var) -> bool {
        if from.0 > to.0 {
            return false;
        }
        let mut live = vec![false; to.0 + 1];
        live[to.0] = true;
        for i in (from.0..=to.0).rev() {
            if !live[i] {
                continue;
            }
            if i == from.0 {
                return true;
            }
            for v in Self::inputs(&self.nodes[i].op) {
                live[v.0] = true;
            }
        }
        false
    }

    /// Hash of every branch decision taken in the forward pass: activation
    /// signs, splat and cost-block winners, clamp hits, zero gradients.
    /// Finite differences are only trustworthy between points that share it.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for v in &self.value(*x).data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::SplatMax { winners, .. } => winners.hash(&mut h),
                Op::CostBlock { argmin, .. } => {
                    argmin.hash(&mut h);
                    for v in &node.value.data {
                        (*v == 0.0).hash(&mut h);
                    }
                }
                Op::GradMag { .. } => {
                    for v in &node.value.data {
                        (*v == 0.0).hash(&mut h);
                    }
                }
                Op::Focal { p, .. } => {
                    for v in &self.value(*p).data {
                        (*v < FOCAL_EPS || *v > 1.0 - FOCAL_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `loss`; returns the gradient of every
    /// parameter leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> HashMap<ParamId, Vec<f64>> {
        assert_eq!(self.value(loss).data.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.insert(*id, g);
                }
                op => {
                    for (v, gi) in self.local_grads(op, &node.value, &g) {
                        accumulate(&mut grads[v.0], gi);
                    }
                }
            }
        }
        out
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv {
                x,
                w,
                b,
                shape,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv_backward(self.value(*x), &self.value(*w).data, out, g, *shape, *stride, *pad);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                shape,
                stride,
                crop,
            } => {
                let (gx, gw, gb) =
                    conv_transpose_backward(self.value(*x), &self.value(*w).data, out, g, *shape, *stride, *crop);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::LeakyRelu { x, slope } => {
                let xs = &self.value(*x).data;
                let gi = xs.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv }).collect();
                vec![(*x, gi)]
            }
            Op::Sigmoid { x } => {
                let gi = out.data.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                vec![(*x, gi)]
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let ga = vb.iter().zip(g).map(|(y, gv)| y * gv).collect();
                let gb = va.iter().zip(g).map(|(y, gv)| y * gv).collect();
                if a == b {
                    let sum: Vec<f64> = va.iter().zip(g).map(|(y, gv)| 2.0 * y * gv).collect();
                    vec![(*a, sum)]
                } else {
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).data.len()])],
            Op::ScaleChannels { x, a } => {
                let (vx, va) = (self.value(*x), self.value(*a));
                let n = vx.plane();
                let gx = g.iter().enumerate().map(|(i, gv)| gv * va.data[i % n]).collect();
                let mut ga = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    ga[i % n] += gv * vx.data[i];
                }
                vec![(*x, gx), (*a, ga)]
            }
            Op::Concat { parts } => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).data.len();
                        let slice = g[off..off + n].to_vec();
                        off += n;
                        (p, slice)
                    })
                    .collect()
            }
            Op::Resample { x, r } => {
                let t = self.value(*x);
                let mut gi = vec![0.0; t.data.len()];
                let (nin, nout) = (r.in_len(), r.out_len());
                for c in 0..t.c {
                    r.apply_adjoint(&g[c * nout..(c + 1) * nout], &mut gi[c * nin..(c + 1) * nin]);
                }
                vec![(*x, gi)]
            }
            Op::SplatMax { x, winners } => {
                let mut gi = vec![0.0; self.value(*x).data.len()];
                for (t, w) in winners.iter().enumerate() {
                    if let Some(src) = w {
                        gi[*src] += g[t];
                    }
                }
                vec![(*x, gi)]
            }
            Op::GradMag { x } => {
                let t = self.value(*x);
                let n = t.plane();
                let mut gi = vec![0.0; t.data.len()];
                for c in 0..t.c {
                    let (gx, gy) = gradient_components(t.w, t.h, t.channel(c));
                    let mut dgx = vec![0.0; n];
                    let mut dgy = vec![0.0; n];
                    for i in 0..n {
                        let m = out.data[c * n + i];
                        if m > 0.0 {
                            dgx[i] = g[c * n + i] * gx[i] / m;
                            dgy[i] = g[c * n + i] * gy[i] / m;
                        }
                    }
                    gradient_components_adjoint(t.w, t.h, &dgx, &dgy, &mut gi[c * n..(c + 1) * n]);
                }
                vec![(*x, gi)]
            }
            Op::CostBlock {
                fa,
                fb,
                flow,
                radius,
                argmin,
            } => {
                let (ta, tb) = (self.value(*fa), self.value(*fb));
                let (w, h, n) = (ta.w, ta.h, ta.plane());
                let mut ga = vec![0.0; ta.data.len()];
                let mut gb = vec![0.0; tb.data.len()];
                for i in 0..n {
                    let dist = out.data[i];
                    if dist == 0.0 || g[i] == 0.0 {
                        continue;
                    }
                    let (px, py) = window_point(i, argmin[i], w, &flow.0, &flow.1, *radius);
                    let taps = bilinear_taps(w, h, px, py);
                    for c in 0..ta.c {
                        let plane = &tb.data[c * n..(c + 1) * n];
                        let sampled: f64 = taps.iter().map(|&(t, wt)| wt * plane[t]).sum();
                        let d = (ta.data[c * n + i] - sampled) / dist * g[i];
                        ga[c * n + i] += d;
                        for &(t, wt) in &taps {
                            gb[c * n + t] -= wt * d;
                        }
                    }
                }
                vec![(*fa, ga), (*fb, gb)]
            }
            Op::Focal {
                p,
                target,
                gamma,
                alpha,
            } => {
                let ps = &self.value(*p).data;
                let scale = g[0] / ps.len() as f64;
                let gi = ps
                    .iter()
                    .zip(target.iter())
                    .map(|(&pv, &t)| scale * focal_derivative(pv, t, *gamma, *alpha))
                    .collect();
                vec![(*p, gi)]
            }
            Op::WeightedSum { terms } => terms.iter().map(|&(v, w)| (v, vec![w * g[0]])).collect(),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean over pixels of `-alpha_t (1 - p_t)^gamma ln p_t`, with `p` clamped to
/// `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub fn focal_value(p: &[f64], target: &[f64], gamma: f64, alpha: f64) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(target)
        .map(|(&pv, &t)| {
            let pc = pv.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let (pt, at) = if t >= 0.5 { (pc, alpha) } else { (1.0 - pc, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    sum / p.len() as f64
}

/// Per-pixel derivative of the focal term with respect to `p` (zero when
/// the clamp is active).
fn focal_derivative(p: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p) {
        return 0.0;
    }
    if t >= 0.5 {
        // L = -a (1-p)^g ln p
        let q = 1.0 - p;
        let dg = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
        alpha * (dg - q.powf(gamma) / p)
    } else {
        // L = -(1-a) p^g ln(1-p)
        let q = 1.0 - p;
        let dg = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) * q.ln() };
        -(1.0 - alpha) * (dg - p.powf(gamma) / q)
    }
}

fn gradient_components_adjoint(w: usize, h: usize, dgx: &[f64], dgy: &[f64], gi: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = dgx[i];
            if w >= 2 && a != 0.0 {
                if x == 0 {
                    gi[i + 1] += a;
                    gi[i] -= a;
                } else if x == w - 1 {
                    gi[i] += a;
                    gi[i - 1] -= a;
                } else {
                    gi[i + 1] += 0.5 * a;
                    gi[i - 1] -= 0.5 * a;
                }
            }
            let b = dgy[i];
            if h >= 2 && b != 0.0 {
                if y == 0 {
                    gi[i + w] += b;
                    gi[i] -= b;
                } else if y == h - 1 {
                    gi[i] += b;
                    gi[i - w] -= b;
                } else {
                    gi[i + w] += 0.5 * b;
                    gi[i - w] -= 0.5 * b;
                }
            }
        }
    }
}

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Range of output coordinates `o` with `0 <= o*stride + kk - pad < n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // o*stride + kk - pad <= n_in - 1  =>  o <= (n_in - 1 + pad - kk) / stride
    let top = n_in + pad;
    let hi = if top < kk + 1 { 0 } else { ((top - 1 - kk) / stride + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Input patches as rows: row `(ci * k + ky) * k + kx` holds, for every
/// output pixel, the input value under that tap (0 in the padding).
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let n_out = oh * ow;
    let mut col = vec![0.0; x.c * k * k * n_out];
    par::for_each_chunk_mut(&mut col, n_out, |r, row| {
        let (ci, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        let src = x.channel(ci);
        let (oy0, oy1) = valid_range(oh, x.h, ky, stride, pad);
        let (ox0, ox1) = valid_range(ow, x.w, kx, stride, pad);
        for oy in oy0..oy1 {
            let iy = oy * stride + ky - pad;
            for ox in ox0..ox1 {
                row[oy * ow + ox] = src[iy * x.w + ox * stride + kx - pad];
            }
        }
    });
    col
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Patch matrices up to this size stay in cache; larger ones make the
/// row-wise kernels faster.
const IM2COL_MAX_BYTES: usize = 1 << 20;

fn use_im2col(x: &Tensor, s: ConvShape, stride: usize, pad: usize) -> bool {
    let n_out = out_dim(x.h, s.k, stride, pad) * out_dim(x.w, s.k, stride, pad);
    s.c_in * s.k * s.k * n_out * std::mem::size_of::<f64>() <= IM2COL_MAX_BYTES
}

fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.c, s.c_in, "conv input channels");
    if use_im2col(x, s, stride, pad) {
        conv_forward_im2col(x, w, b, s, stride, pad)
    } else {
        conv_forward_rows(x, w, b, s, stride, pad)
    }
}

fn conv_backward(
    x: &Tensor,
    w: &[f64],
    out: &Tensor,
    g: &[f64],
    s: ConvShape,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    if use_im2col(x, s, stride, pad) {
        conv_backward_im2col(x, w, out, g, s, stride, pad)
    } else {
        conv_backward_rows(x, w, out, g, s, stride, pad)
    }
}

fn conv_forward_rows(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape, stride: usize, pad: usize) -> Tensor {
    let (oh, ow) = (out_dim(x.h, s.k, stride, pad), out_dim(x.w, s.k, stride, pad));
    let n_out = oh * ow;
    let mut data = vec![0.0; s.c_out * n_out];
    let k = s.k;
    par::for_each_chunk_mut(&mut data, n_out, |co, plane| {
        plane.fill(b[co]);
        for ci in 0..s.c_in {
            let src = x.channel(ci);
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, x.h, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((co * s.c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(ow, x.w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &src[iy * x.w..(iy + 1) * x.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            axpy(&mut orow[ox0..ox1], wv, &row[ox0 + kx - pad..ox1 + kx - pad]);
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(s.c_out, oh, ow, data)
}

fn conv_backward_rows(
    x: &Tensor,
    w: &[f64],
    out: &Tensor,
    g: &[f64],
    s: ConvShape,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (out.h, out.w);
    let n_out = oh * ow;
    let k = s.k;

    let mut gx = vec![0.0; x.data.len()];
    par::for_each_chunk_mut(&mut gx, x.plane(), |ci, gplane| {
        for co in 0..s.c_out {
            let gout = &g[co * n_out..(co + 1) * n_out];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, x.h, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((co * s.c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(ow, x.w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gout[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let start = iy * x.w + ox0 + kx - pad;
                            axpy(&mut gplane[start..start + grow.len()], wv, grow);
                        } else {
                            for (ox, &go) in (ox0..ox1).zip(grow) {
                                gplane[iy * x.w + ox * stride + kx - pad] += wv * go;
                            }
                        }
                    }
                }
            }
        }
    });

    let per_out = s.c_in * k * k;
    let mut gw = vec![0.0; s.c_out * per_out];
    par::for_each_chunk_mut(&mut gw, per_out, |co, gslab| {
        let gout = &g[co * n_out..(co + 1) * n_out];
        for ci in 0..s.c_in {
            let src = x.channel(ci);
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, x.h, ky, stride, pad);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(ow, x.w, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gout[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let start = iy * x.w + ox0 + kx - pad;
                            acc += grow.iter().zip(&src[start..start + grow.len()]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for (ox, &go) in (ox0..ox1).zip(grow) {
                                acc += go * src[iy * x.w + ox * stride + kx - pad];
                            }
                        }
                    }
                    gslab[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let gb = (0..s.c_out).map(|co| g[co * n_out..(co + 1) * n_out].iter().sum()).collect();
    (gx, gw, gb)
}

fn conv_forward_im2col(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape, stride: usize, pad: usize) -> Tensor {
    let (oh, ow) = (out_dim(x.h, s.k, stride, pad), out_dim(x.w, s.k, stride, pad));
    let n_out = oh * ow;
    let per_out = s.c_in * s.k * s.k;
    let col = im2col(x, s.k, stride, pad, oh, ow);
    let mut data = vec![0.0; s.c_out * n_out];
    par::for_each_chunk_mut(&mut data, n_out, |co, plane| {
        plane.fill(b[co]);
        for (r, &wv) in w[co * per_out..(co + 1) * per_out].iter().enumerate() {
            if wv != 0.0 {
                axpy(plane, wv, &col[r * n_out..(r + 1) * n_out]);
            }
        }
    });
    Tensor::from_vec(s.c_out, oh, ow, data)
}

fn conv_backward_im2col(
    x: &Tensor,
    w: &[f64],
    out: &Tensor,
    g: &[f64],
    s: ConvShape,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (out.h, out.w);
    let n_out = oh * ow;
    let k = s.k;
    let per_out = s.c_in * k * k;

    let mut gcol = vec![0.0; per_out * n_out];
    par::for_each_chunk_mut(&mut gcol, n_out, |r, row| {
        for co in 0..s.c_out {
            let wv = w[co * per_out + r];
            if wv != 0.0 {
                axpy(row, wv, &g[co * n_out..(co + 1) * n_out]);
            }
        }
    });
    let mut gx = vec![0.0; x.data.len()];
    par::for_each_chunk_mut(&mut gx, x.plane(), |ci, gplane| {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(oh, x.h, ky, stride, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(ow, x.w, kx, stride, pad);
                let row = &gcol[((ci * k + ky) * k + kx) * n_out..][..n_out];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    for ox in ox0..ox1 {
                        gplane[iy * x.w + ox * stride + kx - pad] += row[oy * ow + ox];
                    }
                }
            }
        }
    });

    let col = im2col(x, k, stride, pad, oh, ow);
    let mut gw = vec![0.0; s.c_out * per_out];
    par::for_each_chunk_mut(&mut gw, per_out, |co, gslab| {
        let gout = &g[co * n_out..(co + 1) * n_out];
        for (r, gv) in gslab.iter_mut().enumerate() {
            *gv = gout.iter().zip(&col[r * n_out..(r + 1) * n_out]).map(|(a, b)| a * b).sum();
        }
    });

    let gb = (0..s.c_out).map(|co| g[co * n_out..(co + 1) * n_out].iter().sum()).collect();
    (gx, gw, gb)
}

fn conv_transpose_forward(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape, stride: usize, crop: usize) -> Tensor {
    assert_eq!(x.c, s.c_in, "deconv input channels");
    let (oh, ow) = (x.h * stride, x.w * stride);
    let k = s.k;
    let mut data = vec![0.0; s.c_out * oh * ow];
    par::for_each_chunk_mut(&mut data, oh * ow, |co, plane| {
        plane.fill(b[co]);
        for ci in 0..s.c_in {
            let src = x.channel(ci);
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = src[iy * x.w + ix];
                    for ky in 0..k {
                        let Some(oy) = (iy * stride + ky).checked_sub(crop).filter(|&o| o < oh) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = (ix * stride + kx).checked_sub(crop).filter(|&o| o < ow) else {
                                continue;
                            };
                            plane[oy * ow + ox] += w[((ci * s.c_out + co) * k + ky) * k + kx] * v;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(s.c_out, oh, ow, data)
}

fn conv_transpose_backward(
    x: &Tensor,
    w: &[f64],
    out: &Tensor,
    g: &[f64],
    s: ConvShape,
    stride: usize,
    crop: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (out.h, out.w);
    let k = s.k;
    let n_in = x.plane();
    let mut gx = vec![0.0; x.data.len()];
    let mut gw = vec![0.0; w.len()];
    for ci in 0..s.c_in {
        let src = x.channel(ci);
        for co in 0..s.c_out {
            let gout = &g[co * oh * ow..(co + 1) * oh * ow];
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = src[iy * x.w + ix];
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let Some(oy) = (iy * stride + ky).checked_sub(crop).filter(|&o| o < oh) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = (ix * stride + kx).checked_sub(crop).filter(|&o| o < ow) else {
                                continue;
                            };
                            let widx = ((ci * s.c_out + co) * k + ky) * k + kx;
                            let go = gout[oy * ow + ox];
                            acc += w[widx] * go;
                            gw[widx] += v * go;
                        }
                    }
                    gx[ci * n_in + iy * x.w + ix] += acc;
                }
            }
        }
    }
    let gb = (0..s.c_out).map(|co| g[co * oh * ow..(co + 1) * oh * ow].iter().sum()).collect();
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct definition of a padded, strided convolution.
    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape, stride: usize) -> Tensor {
        let pad = s.k / 2;
        let oh = (x.h + 2 * pad - s.k) / stride + 1;
        let ow = (x.w + 2 * pad - s.k) / stride + 1;
        let mut out = Tensor::zeros(s.c_out, oh, ow);
        for co in 0..s.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..s.c_in {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[((co * s.c_in + ci) * s.k + ky) * s.k + kx]
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stride, k, h, w) in [(1, 3, 5, 7), (2, 3, 8, 6), (1, 1, 4, 4), (2, 3, 7, 5)] {
            let s = ConvShape { c_in: 2, c_out: 3, k };
            let x = rand_tensor(2, h, w, &mut rng);
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = naive_conv(&x, &wt, &b, s, stride);
            for got in [
                conv_forward_rows(&x, &wt, &b, s, stride, k / 2),
                conv_forward_im2col(&x, &wt, &b, s, stride, k / 2),
            ] {
                assert_eq!(got.shape(), want.shape());
                for (a, b) in got.data.iter().zip(&want.data) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, k, h, w) in [(1, 3, 6, 9), (2, 3, 8, 6), (2, 3, 7, 5), (1, 1, 3, 4)] {
            let s = ConvShape { c_in: 3, c_out: 2, k };
            let x = rand_tensor(3, h, w, &mut rng);
            let wt: Vec<f64> = (0..2 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = conv_forward(&x, &wt, &[0.0; 2], s, stride, k / 2);
            let g: Vec<f64> = (0..out.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = conv_backward_rows(&x, &wt, &out, &g, s, stride, k / 2);
            let b = conv_backward_im2col(&x, &wt, &out, &g, s, stride, k / 2);
            for (u, v) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
                assert_eq!(u.len(), v.len());
                assert!(u.iter().zip(v).all(|(p, q)| (p - q).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn transpose_conv_sizes_and_constant_kernel() {
        for stride in [1usize, 2, 4, 8] {
            let k = 2 * stride;
            let s = ConvShape { c_in: 1, c_out: 1, k };
            let x = Tensor::filled(1, 3, 2, 1.0);
            let w = vec![1.0; k * k];
            let out = conv_transpose_forward(&x, &w, &[0.0], s, stride, (k - stride) / 2);
            assert_eq!((out.h, out.w), (3 * stride, 2 * stride));
            assert!(out.data.iter().all(|&v| v > 0.0));
        }
    }

    /// Checks every parameter-free op and the convolutions through a tiny
    /// graph, comparing against central differences on the input.
    #[test]
    fn ops_have_consistent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = rand_tensor(2, 6, 6, &mut rng);
        let fb0 = rand_tensor(2, 6, 6, &mut rng);
        let w0: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let wt0: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-0.5..0.5)).collect();
        let target: Arc<Vec<f64>> = Arc::new((0..144).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let flow = Arc::new((
            (0..36).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>(),
            (0..36).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>(),
        ));
        let up = Arc::new(Resampler::upsample(6, 6, 12, 12));
        let targets: Vec<Option<usize>> = (0..36).map(|i| if i % 5 == 0 { None } else { Some((i * 7) % 36) }).collect();

        let run = |xv: &Tensor| -> (f64, Option<HashMap<ParamId, Vec<f64>>>, u64) {
            let mut g = Graph::new();
            let x = g.param(ParamId(0), || xv.clone());
            let w = g.param(ParamId(1), || Tensor::from_vec(1, 1, w0.len(), w0.clone()));
            let b = g.constant(Tensor::from_vec(1, 1, 2, vec![0.1, -0.2]));
            let c = g.conv(x, w, b, ConvShape { c_in: 2, c_out: 2, k: 3 }, 1);
            let a = g.leaky_relu(c, 0.1);
            let m = g.grad_mag(a);
            let fb = g.constant(fb0.clone());
            let cb = g.cost_block(a, fb, flow.clone(), 1);
            let sp = g.splat_max(a, &targets);
            let prod = g.mul(sp, a);
            let sc = g.scale_channels(prod, cb);
            let cat = g.concat(&[sc, m, cb]);
            let wt = g.constant(Tensor::from_vec(1, 1, 20, (0..20).map(|i| wt0[i % wt0.len()]).collect()));
            let bt = g.constant(Tensor::from_vec(1, 1, 1, vec![0.05]));
            let d = g.conv_transpose(cat, wt, bt, ConvShape { c_in: 5, c_out: 1, k: 2 }, 1);
            let r = g.resample(d, up.clone());
            let p = g.sigmoid(r);
            let l = g.focal(p, target.clone(), 2.0, 0.25);
            let total = g.weighted_sum(&[(l, 3.0)]);
            let sig = g.branch_signature();
            (g.value(total).data[0], Some(g.backward(total)), sig)
        };

        let (_, grads, sig0) = run(&x0);
        let grads = grads.unwrap();
        let gx = &grads[&ParamId(0)];
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            let (lp, _, sp) = run(&xp);
            let (lm, _, sm) = run(&xm);
            if sp != sig0 || sm != sig0 {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - gx[i]).abs() / fd.abs().max(gx[i].abs()).max(1e-6);
            assert!(err < 1e-5, "i={i} fd={fd} an={}", gx[i]);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn focal_reference_values() {
        let l = focal_value(&[0.5], &[1.0], 2.0, 1.0);
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn reachability() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(1, 2, 2, 1.0));
        let b = g.constant(Tensor::filled(1, 2, 2, 2.0));
        let s = g.sigmoid(a);
        let m = g.mul(s, s);
        assert!(g.reaches(a, m));
        assert!(!g.reaches(b, m));
        assert!(!g.reaches(m, a));
    }
}
