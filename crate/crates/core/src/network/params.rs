use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::graph::{ConvShape, ParamId};
use crate::error::{Error, Result};

/// Which part of the network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Encoder,
    Occ,
    Mb,
    Attention,
    Fusion,
}

/// Layer role, used to group parameters for gradient checks and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    EncoderConv,
    EncoderDown,
    DecoderConv,
    Head,
    Deconv,
    Attention,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub branch: Branch,
    pub scale: usize,
    pub layer: usize,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/s{}/l{}", self.branch, self.scale, self.layer)
    }
}

/// Whether a layer is an ordinary or a transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    Deconv { stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub key: ParamKey,
    pub class: LayerClass,
    pub kind: LayerKind,
    pub shape: ConvShape,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All weights of one network. Both temporal directions and both frames read
/// the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layers: Vec<Layer>,
    index: BTreeMap<ParamKey, usize>,
}

/// Number of scalar (single-channel) inputs in a decoder level besides the
/// encoder and previous-level features.
pub const LEVEL_SCALARS: usize = 7;

/// Input width of the first decoder conv.
pub fn decoder_in_channels(cfg: &NetConfig) -> usize {
    cfg.enc_channels + LEVEL_SCALARS + cfg.dec_channels
}

/// Layout of every layer for a configuration, in a fixed order.
fn plan(cfg: &NetConfig) -> Vec<(ParamKey, LayerClass, LayerKind, ConvShape)> {
    let mut out = Vec::new();
    let key = |branch, scale, layer| ParamKey { branch, scale, layer };
    let conv = |c_in, c_out, k| ConvShape { c_in, c_out, k };
    let (ce, cd) = (cfg.enc_channels, cfg.dec_channels);
    for l in 0..cfg.num_scales {
        for j in 0..cfg.enc_layers {
            let c_in = if l == 0 && j == 0 { 3 } else { ce };
            out.push((key(Branch::Encoder, l, j), LayerClass::EncoderConv, LayerKind::Conv { stride: 1 }, conv(c_in, ce, 3)));
        }
        if l + 1 < cfg.num_scales {
            out.push((
                key(Branch::Encoder, l, cfg.enc_layers),
                LayerClass::EncoderDown,
                LayerKind::Conv { stride: 2 },
                conv(ce, ce, 3),
            ));
        }
    }
    for branch in [Branch::Occ, Branch::Mb] {
        for l in 0..cfg.num_scales {
            for j in 0..cfg.dec_layers {
                let c_in = if j == 0 { decoder_in_channels(cfg) } else { cd };
                out.push((key(branch, l, j), LayerClass::DecoderConv, LayerKind::Conv { stride: 1 }, conv(c_in, cd, 3)));
            }
            out.push((key(branch, l, cfg.dec_layers), LayerClass::Head, LayerKind::Conv { stride: 1 }, conv(cd, 1, 1)));
            let s = 1 << l;
            out.push((
                key(branch, l, cfg.dec_layers + 1),
                LayerClass::Deconv,
                LayerKind::Deconv { stride: s },
                conv(1, 1, 2 * s),
            ));
        }
    }
    for l in 0..cfg.num_scales {
        for j in 0..cfg.att_layers {
            let c_in = if j == 0 { 1 } else { cd };
            let c_out = if j + 1 == cfg.att_layers { 1 } else { cd };
            out.push((key(Branch::Attention, l, j), LayerClass::Attention, LayerKind::Conv { stride: 1 }, conv(c_in, c_out, 3)));
        }
    }
    for q in 0..3 {
        out.push((
            key(Branch::Fusion, 0, q),
            LayerClass::Fusion,
            LayerKind::Conv { stride: 1 },
            conv(cfg.num_scales, 1, 1),
        ));
    }
    out
}

/// Bilinear interpolation kernel for a transposed convolution of stride `s`
/// and size `2s`.
pub fn bilinear_kernel(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let f = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    let mut w = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            w.push(f(y) * f(x));
        }
    }
    w
}

impl Params {
    /// He-initialised convolutions with zero biases, bilinear deconvolutions,
    /// and fusion weights `1/L`.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain2 = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        let layers: Vec<Layer> = plan(cfg)
            .into_iter()
            .map(|(key, class, kind, shape)| {
                let n = shape.c_in * shape.c_out * shape.k * shape.k;
                let weight = match class {
                    LayerClass::Deconv => bilinear_kernel(shape.k),
                    LayerClass::Fusion => vec![1.0 / cfg.num_scales as f64; n],
                    _ => {
                        let fan_in = (shape.c_in * shape.k * shape.k) as f64;
                        let normal = Normal::new(0.0, (gain2 / fan_in).sqrt()).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                Layer {
                    key,
                    class,
                    kind,
                    shape,
                    weight,
                    bias: vec![0.0; shape.c_out],
                }
            })
            .collect();
        Ok(Self::from_layers(layers))
    }

    fn from_layers(layers: Vec<Layer>) -> Self {
        let index = layers.iter().enumerate().map(|(i, l)| (l.key, i)).collect();
        Self { layers, index }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, key: ParamKey) -> &Layer {
        &self.layers[self.index[&key]]
    }

    pub fn layer_index(&self, key: ParamKey) -> usize {
        self.index[&key]
    }

    /// Graph ids of the weight and bias of layer `i`.
    pub fn ids(i: usize) -> (ParamId, ParamId) {
        (ParamId(2 * i), ParamId(2 * i + 1))
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights then bias of every layer, in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Parameters for `cfg` filled from a flat vector written by
    /// [`Params::flatten`].
    pub fn from_flat(cfg: &NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        if flat.len() != p.count() {
            return Err(Error::LengthMismatch {
                expected: p.count(),
                actual: flat.len(),
            });
        }
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut off = 0;
        for l in &mut p.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(p)
    }

    /// Scalar count per layer class.
    pub fn class_counts(&self) -> BTreeMap<LayerClass, usize> {
        let mut m = BTreeMap::new();
        for l in &self.layers {
            *m.entry(l.class).or_insert(0) += l.weight.len() + l.bias.len();
        }
        m
    }
}

/// Gradients laid out like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            weight: p.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: p.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight).chain(self.bias.iter_mut().zip(&other.bias)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            for x in v {
                *x *= s;
            }
        }
    }

    /// First layer holding a non-finite entry.
    pub fn first_non_finite(&self, p: &Params) -> Option<ParamKey> {
        (0..self.weight.len())
            .find(|&i| self.weight[i].iter().chain(&self.bias[i]).any(|v| !v.is_finite()))
            .map(|i| p.layers[i].key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_kernels() {
        assert_eq!(bilinear_kernel(2), vec![0.25; 4]);
        let k4 = bilinear_kernel(4);
        let row = [0.25, 0.75, 0.75, 0.25];
        for y in 0..4 {
            for x in 0..4 {
                assert!((k4[y * 4 + x] - row[y] * row[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_round_trips() {
        let cfg = NetConfig {
            enc_channels: 4,
            dec_channels: 4,
            ..Default::default()
        };
        let a = Params::init(&cfg, 7).unwrap();
        assert_eq!(a, Params::init(&cfg, 7).unwrap());
        assert_ne!(a, Params::init(&cfg, 8).unwrap());
        let b = Params::from_flat(&cfg, &a.flatten()).unwrap();
        assert_eq!(a, b);
        assert!(Params::from_flat(&cfg, &[0.0]).is_err());
        let fusion = a.layer(ParamKey {
            branch: Branch::Fusion,
            scale: 0,
            layer: 0,
        });
        assert_eq!(fusion.weight, vec![0.25; 4]);
        assert_eq!(fusion.bias, vec![0.0]);
    }

    #[test]
    fn he_scale() {
        let cfg = NetConfig::default();
        let p = Params::init(&cfg, 1).unwrap();
        let l = p.layer(ParamKey {
            branch: Branch::Occ,
            scale: 0,
            layer: 1,
        });
        let var = l.weight.iter().map(|w| w * w).sum::<f64>() / l.weight.len() as f64;
        let want = 2.0 / (1.01 * 9.0 * 32.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }
}
