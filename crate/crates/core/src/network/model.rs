//! Forward pass: Siamese encoder, per-level dual decoders with attention,
//! fusion, and the training objective.
//!
//! Every decoder level receives, for direction `a` (frame `a` to frame `b`):
//!
//! | channels      | content                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `enc`         | encoder features of frame `a` at this scale               |
//! | 1             | cost block `B_a`                                          |
//! | 1             | `B_b` transported into frame `a`                          |
//! | 1             | transport mask (1 where the transport is defined)         |
//! | 1             | own-task map of frame `a` from the previous level         |
//! | 1             | own-task map of frame `b`, transported                    |
//! | 1             | cross-task map of frame `a` from the previous level       |
//! | 1             | cross-task map of frame `b`, transported                  |
//! | `dec`         | same-branch features from the previous level              |
//!
//! The own/cross maps are `(O, M)` for the occlusion branch and
//! `(M, |grad O|)` for the boundary branch. Absent inputs (first level,
//! disabled components, single-task mode) are zeros. Transport is a direct
//! warp along `F_{b->a}` when enabled and a reverse warp along `F_{a->b}`
//! otherwise.

use std::sync::Arc;

use super::config::{DecoderOrder, NetConfig};
use super::graph::{ConvShape, Graph, OpCounts, Tensor, Var};
use super::params::{Branch, Grads, LayerKind, ParamKey, Params};
use crate::error::{Error, Result};
use crate::grids::{FeatureMap, FlowField, RangeTag, Resampler, ScalarMap};
use crate::synthdata::SamplePair;
use crate::warping::{splat_coverage, splat_targets};

/// Frames and bidirectional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub frame1: FeatureMap,
    pub frame2: FeatureMap,
    pub flow12: FlowField,
    pub flow21: FlowField,
}

impl NetInput {
    pub fn from_sample(s: &SamplePair) -> Self {
        Self {
            frame1: s.frame1.clone(),
            frame2: s.frame2.clone(),
            flow12: s.flow12.clone(),
            flow21: s.flow21.clone(),
        }
    }

    fn frames(&self) -> [&FeatureMap; 2] {
        [&self.frame1, &self.frame2]
    }

    fn flows(&self) -> [&FlowField; 2] {
        [&self.flow12, &self.flow21]
    }

    pub fn width(&self) -> usize {
        self.frame1.width()
    }

    pub fn height(&self) -> usize {
        self.frame1.height()
    }
}

/// Binary labels per frame.
#[derive(Debug, Clone)]
pub struct Targets {
    pub occ: [Arc<Vec<f64>>; 2],
    pub mb: [Arc<Vec<f64>>; 2],
}

impl Targets {
    pub fn from_sample(s: &SamplePair) -> Self {
        let v = |m: &ScalarMap| Arc::new(m.values().to_vec());
        Self {
            occ: [v(&s.occ1), v(&s.occ2)],
            mb: [v(&s.mb1), v(&s.mb2)],
        }
    }
}

/// Instrumentation hooks for checking the ablation wiring.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Probes {
    /// Replace every attention map by ones before it scales the MB features.
    pub attention_ones: bool,
    /// Added to every cost-block value.
    pub cost_offset: f64,
    /// Record whether occlusion-branch features reach the boundary head of
    /// the same level.
    pub check_reachability: bool,
}

/// What a forward pass did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub counts: OpCounts,
    /// Set when [`Probes::check_reachability`] was requested.
    pub occ_reaches_mb_head: Option<bool>,
}

/// Fused and per-scale maps of one quantity in one frame, at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMaps {
    pub fused: ScalarMap,
    /// Indexed by scale, finest first.
    pub per_scale: Vec<ScalarMap>,
}

/// Network output; index 0 is frame 1 (direction 1->2), index 1 frame 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub occ: [DirectionMaps; 2],
    pub mb: [DirectionMaps; 2],
    /// Present when the attention module is active.
    pub att: Option<[DirectionMaps; 2]>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Quantity {
    Occ = 0,
    Mb = 1,
    Att = 2,
}

/// Per-direction, per-scale output nodes.
pub(crate) struct Outputs {
    /// `[quantity][direction][scale]` full-resolution probabilities.
    probs: [[Vec<Var>; 2]; 3],
    fused: [[Option<Var>; 2]; 3],
}

pub(crate) struct Recorded {
    pub graph: Graph,
    outputs: Outputs,
    pub loss: Option<Var>,
    pub trace: Trace,
}

struct LevelGeom {
    w: usize,
    h: usize,
    /// Splat targets of `F_{a->b}` for source frame `a`.
    targets: [Vec<Option<usize>>; 2],
    /// Mask of pixels in frame `a` that a transport into `a` defines.
    mask: [Tensor; 2],
    /// Reverse sampler pulling frame-`b` maps into frame `a`.
    pull: [Arc<Resampler>; 2],
    uv: [Arc<(Vec<f64>, Vec<f64>)>; 2],
}

impl LevelGeom {
    fn new(flows: [&FlowField; 2], direct: bool) -> Self {
        let (w, h) = (flows[0].width(), flows[0].height());
        let targets = [splat_targets(flows[0]), splat_targets(flows[1])];
        let mask = std::array::from_fn(|a| {
            if direct {
                let cov = splat_coverage(&targets[1 - a], w * h);
                Tensor::from_vec(1, h, w, cov.iter().map(|&c| (c > 0) as u8 as f64).collect())
            } else {
                Tensor::filled(1, h, w, 1.0)
            }
        });
        let pull = std::array::from_fn(|a| Arc::new(Resampler::along_flow(flows[a])));
        let uv = std::array::from_fn(|a| Arc::new((flows[a].u().to_vec(), flows[a].v().to_vec())));
        Self {
            w,
            h,
            targets,
            mask,
            pull,
            uv,
        }
    }
}

struct LevelState {
    scale: usize,
    w: usize,
    h: usize,
    occ_p: [Var; 2],
    mb_p: [Var; 2],
    occ_f: [Var; 2],
    mb_f: [Var; 2],
}

struct Builder<'a> {
    g: Graph,
    p: &'a Params,
    cfg: &'a NetConfig,
}

impl<'a> Builder<'a> {
    fn layer_vars(&mut self, key: ParamKey) -> (Var, Var, ConvShape, LayerKind) {
        let p = self.p;
        let i = p.layer_index(key);
        let layer = &p.layers()[i];
        let (wid, bid) = Params::ids(i);
        let w = self.g.param(wid, || Tensor::from_vec(1, 1, layer.weight.len(), layer.weight.clone()));
        let b = self.g.param(bid, || Tensor::from_vec(1, 1, layer.bias.len(), layer.bias.clone()));
        (w, b, layer.shape, layer.kind)
    }

    fn layer(&mut self, x: Var, key: ParamKey, activate: bool) -> Var {
        let (w, b, shape, kind) = self.layer_vars(key);
        let y = match kind {
            LayerKind::Conv { stride } => self.g.conv(x, w, b, shape, stride),
            LayerKind::Deconv { stride } => self.g.conv_transpose(x, w, b, shape, stride),
        };
        if activate {
            self.g.leaky_relu(y, self.cfg.leaky_slope)
        } else {
            y
        }
    }

    fn encode(&mut self, frame: Var) -> Vec<Var> {
        let cfg = self.cfg;
        let mut x = frame;
        let mut feats = Vec::with_capacity(cfg.num_scales);
        for l in 0..cfg.num_scales {
            if l > 0 {
                x = self.layer(x, key(Branch::Encoder, l - 1, cfg.enc_layers), true);
            }
            for j in 0..cfg.enc_layers {
                x = self.layer(x, key(Branch::Encoder, l, j), true);
            }
            feats.push(x);
        }
        feats
    }

    /// Move a frame-`b` map into frame `a`.
    fn transport(&mut self, x: Var, a: usize, geom: &LevelGeom) -> Var {
        if self.cfg.use_direct_warp {
            self.g.splat_max(x, &geom.targets[1 - a])
        } else {
            self.g.resample(x, geom.pull[a].clone())
        }
    }

    fn pair_transport(&mut self, maps: Option<[Var; 2]>, geom: &LevelGeom, zero: Var) -> ([Var; 2], [Var; 2]) {
        match maps {
            Some(m) => {
                let t0 = self.transport(m[1], 0, geom);
                let t1 = self.transport(m[0], 1, geom);
                (m, [t0, t1])
            }
            None => ([zero; 2], [zero; 2]),
        }
    }

    fn branch(&mut self, input: Var, branch: Branch, l: usize, attention: Option<Var>) -> (Var, Var) {
        let mut x = input;
        for j in 0..self.cfg.dec_layers {
            x = self.layer(x, key(branch, l, j), true);
        }
        if let Some(a) = attention {
            x = self.g.scale_channels(x, a);
        }
        let logit = self.layer(x, key(branch, l, self.cfg.dec_layers), false);
        (x, logit)
    }

    fn upsample_logit(&mut self, logit: Var, branch: Branch, l: usize) -> Var {
        self.layer(logit, key(branch, l, self.cfg.dec_layers + 1), false)
    }
}

fn key(branch: Branch, scale: usize, layer: usize) -> ParamKey {
    ParamKey { branch, scale, layer }
}

fn frame_tensor(f: &FeatureMap) -> Tensor {
    Tensor::from_vec(f.channels(), f.height(), f.width(), f.values().to_vec())
}

fn check_input(input: &NetInput, cfg: &NetConfig) -> Result<()> {
    cfg.validate()?;
    let (w, h) = (input.width(), input.height());
    let m = cfg.size_multiple();
    let frames = input.frames();
    if frames.iter().any(|f| f.channels() != 3) {
        return Err(Error::ChannelMismatch(frames[0].channels(), 3));
    }
    if !frames[1].same_shape(frames[0]) {
        return Err(Error::DimensionMismatch("frames differ in size".into()));
    }
    for f in input.flows() {
        if f.width() != w || f.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "flow {}x{} vs frames {w}x{h}",
                f.width(),
                f.height()
            )));
        }
    }
    if input.flow12.direction() == input.flow21.direction() {
        return Err(Error::DirectionMismatch(
            input.flow12.direction().label(),
            input.flow21.direction().label(),
        ));
    }
    if w % m != 0 || h % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "frame size {w}x{h} must be divisible by {m} for {} scales",
            cfg.num_scales
        )));
    }
    Ok(())
}

pub(crate) fn record(
    input: &NetInput,
    params: &Params,
    cfg: &NetConfig,
    targets: Option<&Targets>,
    probes: &Probes,
) -> Result<Recorded> {
    check_input(input, cfg)?;
    let (full_w, full_h) = (input.width(), input.height());
    let n_scales = cfg.num_scales;
    let att_on = cfg.attention_active();
    let mut b = Builder {
        g: Graph::new(),
        p: params,
        cfg,
    };

    let frames = input.frames().map(|f| b.g.constant(frame_tensor(f)));
    let feats = [b.encode(frames[0]), b.encode(frames[1])];

    let mut geoms = Vec::with_capacity(n_scales);
    let mut flows = [input.flow12.clone(), input.flow21.clone()];
    for l in 0..n_scales {
        if l > 0 {
            flows = [flows[0].downsample_scaled(), flows[1].downsample_scaled()];
        }
        geoms.push(LevelGeom::new([&flows[0], &flows[1]], cfg.use_direct_warp));
    }

    let order: Vec<usize> = match cfg.order {
        DecoderOrder::F2c => (0..n_scales).collect(),
        DecoderOrder::C2f => (0..n_scales).rev().collect(),
    };
    let mut logits: [[Vec<Option<Var>>; 2]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| vec![None; n_scales]));
    let mut probs = logits.clone();
    let mut prev: Option<LevelState> = None;
    let mut reach_pairs: Vec<(Var, Var)> = Vec::new();

    for &l in &order {
        let geom = &geoms[l];
        let (w, h) = (geom.w, geom.h);
        let zero = b.g.constant(Tensor::zeros(1, h, w));
        let zero_feats = b.g.constant(Tensor::zeros(cfg.dec_channels, h, w));

        // previous level, resampled to this resolution
        let resampled = prev.as_ref().map(|st| {
            let r = Arc::new(if st.scale < l {
                Resampler::pool2(st.w, st.h)
            } else {
                Resampler::upsample(st.w, st.h, w, h)
            });
            let mut rs = |v: Var| b.g.resample(v, r.clone());
            (
                st.occ_p.map(&mut rs),
                st.mb_p.map(&mut rs),
                st.occ_f.map(&mut rs),
                st.mb_f.map(&mut rs),
            )
        });
        let (occ_r, mb_r, occ_fr, mb_fr) = match resampled {
            Some((o, m, of, mf)) => (Some(o), Some(m), of, mf),
            None => (None, None, [zero_feats; 2], [zero_feats; 2]),
        };
        let grad_o = match (cfg.joint_tasks, occ_r) {
            (true, Some(o)) => Some(o.map(|v| b.g.grad_mag(v))),
            _ => None,
        };
        let cross_m = if cfg.joint_tasks { mb_r } else { None };

        let cost = if cfg.use_cost_block {
            let cb: [Var; 2] = std::array::from_fn(|a| {
                let raw = b.g.cost_block(feats[a][l], feats[1 - a][l], geom.uv[a].clone(), cfg.radius);
                if probes.cost_offset != 0.0 {
                    let off = b.g.constant(Tensor::filled(1, h, w, probes.cost_offset));
                    b.g.add(raw, off)
                } else {
                    raw
                }
            });
            Some(cb)
        } else {
            None
        };
        let (cb, tcb) = b.pair_transport(cost, geom, zero);
        let (own_o, t_own_o) = b.pair_transport(occ_r, geom, zero);
        let (own_m, t_own_m) = b.pair_transport(mb_r, geom, zero);
        let (cross_o, t_cross_o) = b.pair_transport(cross_m, geom, zero);
        let (cross_g, t_cross_g) = b.pair_transport(grad_o, geom, zero);
        let mask = geom.mask.clone().map(|m| b.g.constant(m));

        let mut state_occ_p = [zero; 2];
        let mut state_mb_p = [zero; 2];
        let mut state_occ_f = [zero; 2];
        let mut state_mb_f = [zero; 2];
        for a in 0..2 {
            let occ_in = b.g.concat(&[
                feats[a][l],
                cb[a],
                tcb[a],
                mask[a],
                own_o[a],
                t_own_o[a],
                cross_o[a],
                t_cross_o[a],
                occ_fr[a],
            ]);
            let (occ_f, occ_logit) = b.branch(occ_in, Branch::Occ, l, None);
            let occ_p = b.g.sigmoid(occ_logit);
            let occ_full = b.upsample_logit(occ_logit, Branch::Occ, l);
            logits[Quantity::Occ as usize][a][l] = Some(occ_full);
            probs[Quantity::Occ as usize][a][l] = Some(b.g.sigmoid(occ_full));

            let attention = if att_on {
                let mut x = b.g.grad_mag(occ_p);
                for j in 0..cfg.att_layers {
                    x = b.layer(x, key(Branch::Attention, l, j), j + 1 < cfg.att_layers);
                }
                let att = b.g.sigmoid(x);
                let up = if (w, h) == (full_w, full_h) {
                    x
                } else {
                    b.g.resample(x, Arc::new(Resampler::upsample(w, h, full_w, full_h)))
                };
                logits[Quantity::Att as usize][a][l] = Some(up);
                probs[Quantity::Att as usize][a][l] = Some(b.g.sigmoid(up));
                Some(if probes.attention_ones {
                    b.g.constant(Tensor::filled(1, h, w, 1.0))
                } else {
                    att
                })
            } else {
                None
            };

            let mb_in = b.g.concat(&[
                feats[a][l],
                cb[a],
                tcb[a],
                mask[a],
                own_m[a],
                t_own_m[a],
                cross_g[a],
                t_cross_g[a],
                mb_fr[a],
            ]);
            let (mb_f, mb_logit) = b.branch(mb_in, Branch::Mb, l, attention);
            let mb_p = b.g.sigmoid(mb_logit);
            let mb_full = b.upsample_logit(mb_logit, Branch::Mb, l);
            logits[Quantity::Mb as usize][a][l] = Some(mb_full);
            probs[Quantity::Mb as usize][a][l] = Some(b.g.sigmoid(mb_full));

            reach_pairs.push((occ_f, mb_logit));
            state_occ_p[a] = occ_p;
            state_mb_p[a] = mb_p;
            state_occ_f[a] = occ_f;
            state_mb_f[a] = mb_f;
        }
        prev = Some(LevelState {
            scale: l,
            w,
            h,
            occ_p: state_occ_p,
            mb_p: state_mb_p,
            occ_f: state_occ_f,
            mb_f: state_mb_f,
        });
    }

    let quantities: &[Quantity] = if att_on {
        &[Quantity::Occ, Quantity::Mb, Quantity::Att]
    } else {
        &[Quantity::Occ, Quantity::Mb]
    };
    let mut fused = [[None; 2]; 3];
    for &q in quantities {
        for a in 0..2 {
            let parts: Vec<Var> = logits[q as usize][a].iter().map(|v| v.expect("every scale visited")).collect();
            let cat = b.g.concat(&parts);
            let z = b.layer(cat, key(Branch::Fusion, 0, q as usize), false);
            fused[q as usize][a] = Some(b.g.sigmoid(z));
        }
    }

    let unwrap = |v: [[Vec<Option<Var>>; 2]; 3]| v.map(|d| d.map(|s| s.into_iter().flatten().collect::<Vec<Var>>()));
    let outputs = Outputs {
        probs: unwrap(probs),
        fused,
    };

    let loss = targets.map(|t| {
        let mut terms = Vec::new();
        for &q in quantities {
            let weight = if q == Quantity::Att { cfg.att_weight } else { 1.0 };
            for a in 0..2 {
                let target = match q {
                    Quantity::Occ => &t.occ[a],
                    Quantity::Mb | Quantity::Att => &t.mb[a],
                };
                let qa = q as usize;
                let maps = outputs.probs[qa][a].iter().copied().chain(outputs.fused[qa][a]);
                for p in maps.collect::<Vec<_>>() {
                    let f = b.g.focal(p, target.clone(), cfg.gamma, cfg.alpha);
                    terms.push((f, weight));
                }
            }
        }
        b.g.weighted_sum(&terms)
    });

    let occ_reaches_mb_head = probes
        .check_reachability
        .then(|| reach_pairs.iter().any(|&(from, to)| b.g.reaches(from, to)));
    let trace = Trace {
        counts: b.g.counts().clone(),
        occ_reaches_mb_head,
    };
    Ok(Recorded {
        graph: b.g,
        outputs,
        loss,
        trace,
    })
}

impl Recorded {
    pub fn prediction(&self) -> Prediction {
        let g = &self.graph;
        let to_map = |v: Var| {
            let t = g.value(v);
            ScalarMap::new(t.w, t.h, t.data.clone(), RangeTag::Unit).expect("sigmoid outputs are in [0, 1]")
        };
        let maps = |q: Quantity, a: usize| DirectionMaps {
            fused: to_map(self.outputs.fused[q as usize][a].expect("fused map")),
            per_scale: self.outputs.probs[q as usize][a].iter().map(|&v| to_map(v)).collect(),
        };
        let att = self.outputs.fused[Quantity::Att as usize][0].map(|_| [maps(Quantity::Att, 0), maps(Quantity::Att, 1)]);
        Prediction {
            occ: [maps(Quantity::Occ, 0), maps(Quantity::Occ, 1)],
            mb: [maps(Quantity::Mb, 0), maps(Quantity::Mb, 1)],
            att,
        }
    }

    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.graph.value(l).data[0])
    }

    /// Gradients of the recorded loss, laid out like `params`.
    pub fn grads(&self, params: &Params) -> Result<Grads> {
        let loss = self
            .loss
            .ok_or_else(|| Error::InvalidArgument("forward pass recorded without targets".into()))?;
        let mut raw = self.graph.backward(loss);
        let mut grads = Grads::zeros_like(params);
        for i in 0..params.layers().len() {
            let (wid, bid) = Params::ids(i);
            if let Some(g) = raw.remove(&wid) {
                grads.weight[i] = g;
            }
            if let Some(g) = raw.remove(&bid) {
                grads.bias[i] = g;
            }
        }
        Ok(grads)
    }
}

/// Predict occlusion, boundary and attention maps for both frames.
pub fn forward(input: &NetInput, params: &Params, cfg: &NetConfig) -> Result<Prediction> {
    Ok(record(input, params, cfg, None, &Probes::default())?.prediction())
}

/// [`forward`] with instrumentation.
pub fn forward_probed(input: &NetInput, params: &Params, cfg: &NetConfig, probes: &Probes) -> Result<(Prediction, Trace)> {
    let r = record(input, params, cfg, None, probes)?;
    Ok((r.prediction(), r.trace.clone()))
}

/// Total training loss of one sample.
pub fn loss(sample: &SamplePair, params: &Params, cfg: &NetConfig) -> Result<f64> {
    let r = record(&NetInput::from_sample(sample), params, cfg, Some(&Targets::from_sample(sample)), &Probes::default())?;
    Ok(r.loss_value().expect("targets given"))
}

/// Total loss and its gradient for one sample. A non-finite gradient is
/// reported with the layer that owns it.
pub fn loss_and_grads(sample: &SamplePair, params: &Params, cfg: &NetConfig) -> Result<(f64, Grads)> {
    let r = record(&NetInput::from_sample(sample), params, cfg, Some(&Targets::from_sample(sample)), &Probes::default())?;
    let grads = r.grads(params)?;
    if let Some(k) = grads.first_non_finite(params) {
        return Err(Error::InvalidArgument(format!("non-finite gradient in layer {k}")));
    }
    Ok((r.loss_value().expect("targets given"), grads))
}

/// Encoder features of both frames at every scale, finest first.
pub fn encoder_forward(
    i1: &FeatureMap,
    i2: &FeatureMap,
    params: &Params,
    cfg: &NetConfig,
) -> Result<Vec<(FeatureMap, FeatureMap)>> {
    cfg.validate()?;
    let m = cfg.size_multiple();
    if !i1.same_shape(i2) || i1.channels() != 3 || i2.channels() != 3 {
        return Err(Error::DimensionMismatch("encoder needs two 3-channel frames of equal size".into()));
    }
    if !i1.width().is_multiple_of(m) || !i1.height().is_multiple_of(m) {
        return Err(Error::InvalidArgument(format!(
            "frame size {}x{} must be divisible by {m}",
            i1.width(),
            i1.height()
        )));
    }
    let mut b = Builder {
        g: Graph::new(),
        p: params,
        cfg,
    };
    let x1 = b.g.constant(frame_tensor(i1));
    let x2 = b.g.constant(frame_tensor(i2));
    let f1 = b.encode(x1);
    let f2 = b.encode(x2);
    let to_fm = |v: Var| {
        let t = b.g.value(v);
        FeatureMap::new(t.w, t.h, t.c, t.data.clone()).expect("finite features")
    };
    Ok(f1.into_iter().zip(f2).map(|(a, c)| (to_fm(a), to_fm(c))).collect())
}

/// `sigmoid(sum_l w_l z_l + bias)` per pixel over per-scale logit maps.
pub fn fusion_forward(logits: &[ScalarMap], weights: &[f64], bias: f64) -> Result<ScalarMap> {
    if logits.is_empty() || logits.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} maps for {} fusion weights",
            logits.len(),
            weights.len()
        )));
    }
    let (w, h) = (logits[0].width(), logits[0].height());
    if logits.iter().any(|m| !m.same_shape(&logits[0])) {
        return Err(Error::DimensionMismatch("fusion inputs differ in size".into()));
    }
    let mut g = Graph::new();
    let parts: Vec<Var> = logits
        .iter()
        .map(|m| g.constant(Tensor::from_vec(1, h, w, m.values().to_vec())))
        .collect();
    let cat = g.concat(&parts);
    let wv = g.constant(Tensor::from_vec(1, 1, weights.len(), weights.to_vec()));
    let bv = g.constant(Tensor::from_vec(1, 1, 1, vec![bias]));
    let z = g.conv(
        cat,
        wv,
        bv,
        ConvShape {
            c_in: logits.len(),
            c_out: 1,
            k: 1,
        },
        1,
    );
    let p = g.sigmoid(z);
    ScalarMap::new(w, h, g.value(p).data.clone(), RangeTag::Unit)
}

/// Mean focal loss of `pred` against binary `target`.
pub fn focal_loss(pred: &ScalarMap, target: &ScalarMap, gamma: f64, alpha: f64) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::DimensionMismatch("prediction and target differ in size".into()));
    }
    if !(gamma >= 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("gamma must be >= 0 and alpha in [0, 1]".into()));
    }
    Ok(super::graph::focal_value(pred.values(), target.values(), gamma, alpha))
}
