//! Feature discrepancy between frames.
//!
//! [`cost_volume`] is the full `H x W x (2s+1)^2` table of feature distances and
//! exists as a reference. [`cost_block`] keeps only the smallest distance in
//! a `(2s+1)^2` window centred on the flow-displaced match, so it is `H x W`.

use crate::error::{Error, Result};
use crate::grids::{bilinear_taps, FeatureMap, FlowField, RangeTag, ScalarMap};
use crate::par;

/// Search radius used when none is configured.
pub const DEFAULT_RADIUS: usize = 2;

/// `V(x, d)` for `d` in `[-s, s]^2`, stored per pixel with `dx` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    radius: usize,
    values: Vec<f64>,
}

impl CostVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn bins(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cost at pixel `(x, y)` for displacement `(dx, dy)`.
    pub fn get(&self, x: usize, y: usize, dx: i64, dy: i64) -> f64 {
        let s = self.radius as i64;
        assert!(dx.abs() <= s && dy.abs() <= s, "displacement outside window");
        let side = 2 * s + 1;
        let bin = ((dy + s) * side + (dx + s)) as usize;
        self.values[(y * self.width + x) * self.bins() + bin]
    }
}

/// Euclidean distance between `fa` at integer pixel `xa` and `fb` sampled
/// bilinearly (border-clamped) at the continuous point `xb`.
pub fn feature_distance(
    fa: &FeatureMap,
    xa: (usize, usize),
    fb: &FeatureMap,
    xb: (f64, f64),
) -> Result<f64> {
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    if xa.0 >= fa.width() || xa.1 >= fa.height() {
        return Err(Error::InvalidArgument(format!(
            "pixel {:?} outside {}x{}",
            xa,
            fa.width(),
            fa.height()
        )));
    }
    let taps = bilinear_taps(fb.width(), fb.height(), xb.0, xb.1);
    let mut sq = 0.0;
    for c in 0..fa.channels() {
        let plane = fb.channel(c);
        let mut b = 0.0;
        for &(i, w) in &taps {
            b += w * plane[i];
        }
        let d = fa.at(c, xa.0, xa.1) - b;
        sq += d * d;
    }
    Ok(sq.sqrt())
}

fn check_pair(fa: &FeatureMap, fb: &FeatureMap) -> Result<()> {
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    if !fa.same_shape(fb) {
        return Err(Error::DimensionMismatch(format!(
            "features {}x{} vs {}x{}",
            fa.width(),
            fa.height(),
            fb.width(),
            fb.height()
        )));
    }
    Ok(())
}

/// Full 4-D cost volume with integer displacements.
pub fn cost_volume(fa: &FeatureMap, fb: &FeatureMap, radius: usize) -> Result<CostVolume> {
    check_pair(fa, fb)?;
    let (w, h) = (fa.width(), fa.height());
    let s = radius as i64;
    let bins = (2 * radius + 1).pow(2);
    let mut values = vec![0.0; w * h * bins];
    par::for_each_chunk_mut(&mut values, bins, |i, slab| {
        let (x, y) = (i % w, i / w);
        let mut k = 0;
        for dy in -s..=s {
            for dx in -s..=s {
                let p = (x as f64 + dx as f64, y as f64 + dy as f64);
                slab[k] = feature_distance(fa, (x, y), fb, p).expect("checked shapes");
                k += 1;
            }
        }
    });
    Ok(CostVolume {
        width: w,
        height: h,
        radius,
        values,
    })
}

/// Per-pixel minimum cost and the winning window slot (`dx` fastest).
#[derive(Debug, Clone)]
pub(crate) struct RawCostBlock {
    pub values: Vec<f64>,
    pub argmin: Vec<usize>,
}

/// Continuous sample point of window slot `k` for pixel `i`.
#[inline]
pub(crate) fn window_point(
    i: usize,
    k: usize,
    width: usize,
    u: &[f64],
    v: &[f64],
    radius: usize,
) -> (f64, f64) {
    let side = 2 * radius + 1;
    let dx = (k % side) as f64 - radius as f64;
    let dy = (k / side) as f64 - radius as f64;
    let x = (i % width) as f64 + u[i] + dx;
    let y = (i / width) as f64 + v[i] + dy;
    (x, y)
}

/// Cost block on raw channel-major planes.
pub(crate) fn cost_block_raw(
    fa: &[f64],
    fb: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    u: &[f64],
    v: &[f64],
    radius: usize,
) -> RawCostBlock {
    let n = width * height;
    let slots = (2 * radius + 1).pow(2);
    let pairs = par::map_range(n, |i| {
        let mut best = f64::INFINITY;
        let mut best_k = 0;
        for k in 0..slots {
            let (px, py) = window_point(i, k, width, u, v, radius);
            let taps = bilinear_taps(width, height, px, py);
            let mut sq = 0.0;
            for c in 0..channels {
                let plane = &fb[c * n..(c + 1) * n];
                let mut b = 0.0;
                for &(t, w) in &taps {
                    b += w * plane[t];
                }
                let d = fa[c * n + i] - b;
                sq += d * d;
            }
            let dist = sq.sqrt();
            if dist < best {
                best = dist;
                best_k = k;
            }
        }
        (best, best_k)
    });
    let (values, argmin) = pairs.into_iter().unzip();
    RawCostBlock { values, argmin }
}

/// `B_a(x) = min_{d in [-s,s]^2} |f_a(x) - f_b(x + F_{a->b}(x) + d)|`.
pub fn cost_block(
    fa: &FeatureMap,
    fb: &FeatureMap,
    flow: &FlowField,
    radius: usize,
) -> Result<ScalarMap> {
    check_pair(fa, fb)?;
    if flow.width() != fa.width() || flow.height() != fa.height() {
        return Err(Error::DimensionMismatch(format!(
            "flow {}x{} vs features {}x{}",
            flow.width(),
            flow.height(),
            fa.width(),
            fa.height()
        )));
    }
    let raw = cost_block_raw(
        fa.values(),
        fb.values(),
        fa.channels(),
        fa.width(),
        fa.height(),
        flow.u(),
        flow.v(),
        radius,
    );
    ScalarMap::new(fa.width(), fa.height(), raw.values, RangeTag::NonNeg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::Direction;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(5, 5, 4, &mut rng);
        assert_eq!(feature_distance(&f, (2, 3), &f, (2.0, 3.0)).unwrap(), 0.0);

        let a = FeatureMap::from_fn(3, 3, 1, |_, _, _| 1.0).unwrap();
        let b = FeatureMap::from_fn(3, 3, 1, |_, _, _| 4.0).unwrap();
        assert_eq!(feature_distance(&a, (1, 1), &b, (0.3, 2.2)).unwrap(), 3.0);

        let c = FeatureMap::zeros(3, 3, 2);
        assert!(matches!(
            feature_distance(&a, (0, 0), &c, (0.0, 0.0)),
            Err(Error::ChannelMismatch(1, 2))
        ));
    }

    #[test]
    fn distance_at_fractional_point_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let fa = random_features(6, 5, 3, &mut rng);
            let fb = random_features(6, 5, 3, &mut rng);
            let xa = (rng.random_range(0..6), rng.random_range(0..5));
            let xb: (f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..4.0));
            // interpolate each channel by hand, then take the norm
            let (x0, y0) = (xb.0.floor() as usize, xb.1.floor() as usize);
            let (tx, ty) = (xb.0 - x0 as f64, xb.1 - y0 as f64);
            let mut sq = 0.0;
            for c in 0..3 {
                let top = fb.at(c, x0, y0) * (1.0 - tx) + fb.at(c, x0 + 1, y0) * tx;
                let bot = fb.at(c, x0, y0 + 1) * (1.0 - tx) + fb.at(c, x0 + 1, y0 + 1) * tx;
                let val = top * (1.0 - ty) + bot * ty;
                sq += (fa.at(c, xa.0, xa.1) - val).powi(2);
            }
            let got = feature_distance(&fa, xa, &fb, xb).unwrap();
            assert!((got - sq.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_examples() {
        let f = FeatureMap::from_fn(4, 4, 3, |c, _, _| c as f64).unwrap();
        let v = cost_volume(&f, &f, 2).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
        assert_eq!(v.bins(), 25);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fa = random_features(5, 4, 2, &mut rng);
        let fb = random_features(5, 4, 2, &mut rng);
        let v = cost_volume(&fa, &fb, 0).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let d = feature_distance(&fa, (x, y), &fb, (x as f64, y as f64)).unwrap();
                assert_eq!(v.get(x, y, 0, 0), d);
            }
        }
    }

    #[test]
    fn volume_entries_match_pointwise_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fa = random_features(8, 8, 4, &mut rng);
        let fb = random_features(8, 8, 4, &mut rng);
        let v = cost_volume(&fa, &fb, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let p = (x as f64 + dx as f64, y as f64 + dy as f64);
                        assert_eq!(v.get(x, y, dx, dy), feature_distance(&fa, (x, y), &fb, p).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn block_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(6, 6, 3, &mut rng);
        let zero = FlowField::zeros(6, 6, Direction::Forward);
        for s in 0..3 {
            let b = cost_block(&f, &f, &zero, s).unwrap();
            assert!(b.values().iter().all(|&x| x == 0.0));
        }

        // fb is fa shifted one pixel to the right
        let shifted =
            FeatureMap::from_fn(6, 6, 3, |c, x, y| f.at(c, x.saturating_sub(1), y)).unwrap();
        let b = cost_block(&f, &shifted, &zero, 1).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(b.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn block_memory_is_two_dimensional() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fa = random_features(8, 6, 2, &mut rng);
        let fb = random_features(8, 6, 2, &mut rng);
        let flow = FlowField::zeros(8, 6, Direction::Forward);
        let s = 2;
        let b = cost_block(&fa, &fb, &flow, s).unwrap();
        let v = cost_volume(&fa, &fb, s).unwrap();
        assert_eq!(b.len(), 8 * 6);
        assert_eq!(v.values().len(), 8 * 6 * 25);
    }

    proptest! {
        #[test]
        fn larger_window_never_increases_cost(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fa = random_features(7, 6, 3, &mut rng);
            let fb = random_features(7, 6, 3, &mut rng);
            let flow = FlowField::from_fn(7, 6, Direction::Forward, |_, _| {
                (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
            }).unwrap();
            let mut prev = cost_block(&fa, &fb, &flow, 0).unwrap();
            for s in 1..4 {
                let next = cost_block(&fa, &fb, &flow, s).unwrap();
                for (a, b) in next.values().iter().zip(prev.values()) {
                    prop_assert!(*a <= *b);
                    prop_assert!(*a >= 0.0);
                }
                prev = next;
            }
        }
    }
}
