//! Moving maps between frames along a flow.
//!
//! Direct warping pushes every source pixel to `round(x + F(x))` in the other
//! frame. Targets nothing lands on stay undefined; targets several pixels land
//! on keep the maximum. Reverse warping pulls each target pixel from
//! `x + F(x)` with bilinear, border-clamped sampling and is always defined.

use crate::error::{Error, Result};
use crate::grids::{FlowField, MaskedMap, RangeTag, Resampler, ScalarMap};
use crate::par;

/// Rounded in-grid splat target for every source pixel.
pub fn splat_targets(flow: &FlowField) -> Vec<Option<usize>> {
    let (w, h) = (flow.width(), flow.height());
    par::map_range(w * h, |i| {
        let (x, y) = (i % w, i / w);
        let tx = (x as f64 + flow.u()[i]).round();
        let ty = (y as f64 + flow.v()[i]).round();
        if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
            None
        } else {
            Some(ty as usize * w + tx as usize)
        }
    })
}

/// Number of sources landing on each target.
pub fn splat_coverage(targets: &[Option<usize>], n_out: usize) -> Vec<u32> {
    let mut cov = vec![0u32; n_out];
    for t in targets.iter().flatten() {
        cov[*t] += 1;
    }
    cov
}

/// Max-splat one plane. Returns values (0 where undefined) and, per target,
/// the source index that won (the first maximal one in raster order).
pub fn splat_max(plane: &[f64], targets: &[Option<usize>], n_out: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut out = vec![0.0; n_out];
    let mut winner: Vec<Option<usize>> = vec![None; n_out];
    for (src, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        match winner[t] {
            Some(_) if plane[src] <= out[t] => {}
            _ => {
                out[t] = plane[src];
                winner[t] = Some(src);
            }
        }
    }
    (out, winner)
}

fn check_dims(src: &ScalarMap, flow: &FlowField) -> Result<()> {
    if !flow.same_shape_as(src) {
        return Err(Error::DimensionMismatch(format!(
            "map {}x{} vs flow {}x{}",
            src.width(),
            src.height(),
            flow.width(),
            flow.height()
        )));
    }
    Ok(())
}

/// Push `src` (living in frame a) to frame b with `flow` = `F_{a->b}`.
pub fn direct_warp(src: &ScalarMap, flow: &FlowField) -> Result<MaskedMap> {
    check_dims(src, flow)?;
    let targets = splat_targets(flow);
    let n = src.len();
    let (values, _) = splat_max(src.values(), &targets, n);
    let coverage = splat_coverage(&targets, n);
    // Max of in-range values stays in range; 0 is admissible for every tag.
    let map = ScalarMap::new(src.width(), src.height(), values, src.range())?;
    Ok(MaskedMap::from_parts(map, coverage))
}

/// Pull `src` (living in frame a) into frame b with `flow` = `F_{b->a}`.
pub fn reverse_warp(src: &ScalarMap, flow: &FlowField) -> Result<ScalarMap> {
    check_dims(src, flow)?;
    let r = Resampler::along_flow(flow);
    ScalarMap::new(src.width(), src.height(), r.apply(src.values()), src.range())
}

/// `|F_{1->2}(x) + F_{2->1}(x + F_{1->2}(x))|` with bilinear, border-clamped
/// lookup of the second flow.
pub fn flow_symmetry_residual(f12: &FlowField, f21: &FlowField) -> Result<ScalarMap> {
    if f12.direction() == f21.direction() {
        return Err(Error::DirectionMismatch(
            f12.direction().label(),
            f21.direction().label(),
        ));
    }
    if f12.width() != f21.width() || f12.height() != f21.height() {
        return Err(Error::DimensionMismatch(format!(
            "flows {}x{} vs {}x{}",
            f12.width(),
            f12.height(),
            f21.width(),
            f21.height()
        )));
    }
    let r = Resampler::along_flow(f12);
    let bu = r.apply(f21.u());
    let bv = r.apply(f21.v());
    let values = f12
        .u()
        .iter()
        .zip(f12.v())
        .zip(bu.iter().zip(&bv))
        .map(|((u, v), (bu, bv))| (u + bu).hypot(v + bv))
        .collect();
    ScalarMap::new(f12.width(), f12.height(), values, RangeTag::NonNeg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::Direction;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> ScalarMap {
        ScalarMap::from_fn(w, h, RangeTag::Free, |x, y| x as f64 + 0.01 * y as f64).unwrap()
    }

    /// Enumerates every source pixel independently of `splat_targets`.
    fn brute_splat(src: &ScalarMap, flow: &FlowField) -> (Vec<Option<f64>>, Vec<u32>) {
        let (w, h) = (src.width() as i64, src.height() as i64);
        let mut vals: Vec<Option<f64>> = vec![None; (w * h) as usize];
        let mut cov = vec![0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(x as usize, y as usize);
                let tx = (x as f64 + u).round() as i64;
                let ty = (y as f64 + v).round() as i64;
                if (0..w).contains(&tx) && (0..h).contains(&ty) {
                    let t = (ty * w + tx) as usize;
                    cov[t] += 1;
                    let s = src.get(x as usize, y as usize);
                    vals[t] = Some(vals[t].map_or(s, |cur: f64| cur.max(s)));
                }
            }
        }
        (vals, cov)
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = ramp(5, 4);
        let flow = FlowField::zeros(5, 4, Direction::Forward);
        let d = direct_warp(&src, &flow).unwrap();
        assert_eq!(d.map(), &src);
        assert!(d.coverage().iter().all(|&c| c == 1));
        assert_eq!(d.undefined_count(), 0);
        let r = reverse_warp(&src, &flow.with_direction(Direction::Backward)).unwrap();
        assert_eq!(r, src);
    }

    #[test]
    fn uniform_shift_right_by_one() {
        let src = ramp(4, 4);
        let flow = FlowField::uniform(4, 4, 1.0, 0.0, Direction::Forward);
        let d = direct_warp(&src, &flow).unwrap();
        let (oracle, oracle_cov) = brute_splat(&src, &flow);
        for y in 0..4 {
            assert!(!d.is_defined(0, y));
            for x in 1..4 {
                assert_eq!(d.value(x, y), Some(src.get(x - 1, y)));
            }
            for x in 0..4 {
                assert_eq!(d.value(x, y), oracle[y * 4 + x]);
            }
        }
        assert_eq!(d.coverage(), &oracle_cov[..]);
        // column 3 of the source fell off the grid
        assert_eq!(d.coverage().iter().sum::<u32>(), 12);
    }

    #[test]
    fn reverse_shift_of_ramp() {
        let w = 8;
        let src = ScalarMap::from_fn(w, 3, RangeTag::Free, |x, _| 0.5 * x as f64).unwrap();
        let flow = FlowField::uniform(w, 3, -1.0, 0.0, Direction::Backward);
        let r = reverse_warp(&src, &flow).unwrap();
        for y in 0..3 {
            for x in 1..w {
                assert!((r.get(x, y) - 0.5 * (x as f64 - 1.0)).abs() < 1e-6);
            }
            // clamped at the border
            assert_eq!(r.get(0, y), 0.0);
        }
    }

    #[test]
    fn dimension_and_direction_errors() {
        let src = ramp(4, 4);
        let flow = FlowField::zeros(3, 4, Direction::Forward);
        assert!(matches!(direct_warp(&src, &flow), Err(Error::DimensionMismatch(_))));
        assert!(matches!(reverse_warp(&src, &flow), Err(Error::DimensionMismatch(_))));
        let f = FlowField::zeros(4, 4, Direction::Forward);
        assert!(matches!(
            flow_symmetry_residual(&f, &f),
            Err(Error::DirectionMismatch(..))
        ));
    }

    #[test]
    fn residual_of_inverse_pairs() {
        let f12 = FlowField::uniform(6, 5, 1.5, -2.0, Direction::Forward);
        let r = flow_symmetry_residual(&f12, &f12.negated()).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        let z = FlowField::zeros(6, 5, Direction::Forward);
        let r = flow_symmetry_residual(&z, &z.negated()).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_aggregation_on_collisions() {
        // both pixels of a 2x1 map land on pixel 1
        let src = ScalarMap::new(2, 1, vec![0.9, 0.2], RangeTag::Unit).unwrap();
        let flow = FlowField::new(2, 1, vec![1.0, 0.0], vec![0.0, 0.0], Direction::Forward).unwrap();
        let d = direct_warp(&src, &flow).unwrap();
        assert_eq!(d.value(1, 0), Some(0.9));
        assert_eq!(d.coverage(), &[0, 2]);
    }

    fn random_flow(w: usize, h: usize, rng: &mut ChaCha8Rng, integer: bool) -> FlowField {
        FlowField::from_fn(w, h, Direction::Forward, |_, _| {
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            if integer {
                (a.round(), b.round())
            } else {
                (a, b)
            }
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn direct_warp_matches_enumeration(seed in 0u64..300, w in 1usize..33, h in 1usize..33) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = ScalarMap::from_fn(w, h, RangeTag::Unit, |_, _| rng.random::<f64>()).unwrap();
            let flow = random_flow(w, h, &mut rng, false);
            let d = direct_warp(&src, &flow).unwrap();
            let (vals, cov) = brute_splat(&src, &flow);
            prop_assert_eq!(d.coverage(), &cov[..]);
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(d.value(x, y), vals[y * w + x]);
                }
            }
            // conservation: every in-grid splat is counted once
            let in_grid = (0..w * h).filter(|&i| {
                let tx = ((i % w) as f64 + flow.u()[i]).round();
                let ty = ((i / w) as f64 + flow.v()[i]).round();
                tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64
            }).count() as u32;
            prop_assert_eq!(d.coverage().iter().sum::<u32>(), in_grid);
            // reverse warping is always fully defined and finite
            let r = reverse_warp(&src, &flow).unwrap();
            prop_assert!(r.values().iter().all(|v| v.is_finite()));
        }

        #[test]
        fn collision_free_round_trip(seed in 0u64..300, dx in -3i32..=3, dy in -3i32..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (9, 7);
            let src = ScalarMap::from_fn(w, h, RangeTag::Unit, |_, _| rng.random::<f64>()).unwrap();
            let f12 = FlowField::uniform(w, h, dx as f64, dy as f64, Direction::Forward);
            let d = direct_warp(&src, &f12).unwrap();
            // pulling the frame-2 map back into frame 1 samples along F_{1->2}
            let back = reverse_warp(d.map(), &f12).unwrap();
            // pixels whose forward image is defined come back unchanged
            for y in 0..h {
                for x in 0..w {
                    let tx = x as i32 + dx;
                    let ty = y as i32 + dy;
                    if tx >= 0 && ty >= 0 && tx < w as i32 && ty < h as i32 {
                        prop_assert_eq!(back.get(x, y), src.get(x, y));
                    }
                }
            }
        }
    }
}
