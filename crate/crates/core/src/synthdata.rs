//! Procedural frame pairs with exact ground truth.
//!
//! A scene is a textured background plus flat-coloured rectangles and
//! ellipses, each translating by an integer vector between the two frames.
//! Because motion is integer and visibility is resolved by depth order,
//! flow, occlusion and motion-boundary labels are computed exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Direction, FeatureMap, FlowField, RangeTag, ScalarMap};
use crate::warping::{direct_warp, flow_symmetry_residual};

/// Default forward-backward threshold, in pixels.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// One moving object. `x`, `y`, `width`, `height` give its frame-1 bounding
/// box; smaller `depth` is nearer the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x: i32,
    pub y: i32,
    pub width: u32,
    pub height: u32,
    pub depth: i32,
    pub translation: [i32; 2],
    pub color: [f64; 3],
}

impl Shape {
    /// Whether pixel `(px, py)` is covered in frame `t` (0 or 1).
    fn covers(&self, px: i32, py: i32, t: i32) -> bool {
        let x0 = self.x + t * self.translation[0];
        let y0 = self.y + t * self.translation[1];
        let (w, h) = (self.width as i32, self.height as i32);
        if px < x0 || py < y0 || px >= x0 + w || py >= y0 + h {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let cx = x0 as f64 + (w as f64 - 1.0) / 2.0;
                let cy = y0 as f64 + (h as f64 - 1.0) / 2.0;
                let rx = w as f64 / 2.0;
                let ry = h as f64 / 2.0;
                let dx = (px as f64 - cx) / rx;
                let dy = (py as f64 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn overlaps_grid(&self, t: i32, w: i32, h: i32) -> bool {
        let x0 = self.x + t * self.translation[0];
        let y0 = self.y + t * self.translation[1];
        (0..self.height as i32).any(|dy| {
            (0..self.width as i32).any(|dx| {
                let (px, py) = (x0 + dx, y0 + dy);
                px >= 0 && py >= 0 && px < w && py < h && self.covers(px, py, t)
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub color: [f64; 3],
    /// Seed of the value-noise texture carried by the background.
    #[serde(default)]
    pub texture_seed: u64,
    /// Peak-to-peak amplitude of the texture; 0 for a flat background.
    #[serde(default)]
    pub texture_amplitude: f64,
    #[serde(default)]
    pub translation: [i32; 2],
}

impl Default for Background {
    fn default() -> Self {
        Self {
            color: [1.0, 1.0, 1.0],
            texture_seed: 0,
            texture_amplitude: 0.0,
            translation: [0, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub background: Background,
    pub shapes: Vec<Shape>,
    /// Standard deviation of per-pixel Gaussian noise added to both frames.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::InvalidScene("scene has no shapes".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidScene("empty grid".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidScene("noise_sigma must be finite and >= 0".into()));
        }
        let (w, h) = (self.width as i32, self.height as i32);
        for (i, s) in self.shapes.iter().enumerate() {
            if s.width == 0 || s.height == 0 {
                return Err(Error::InvalidScene(format!("shape {i} has zero size")));
            }
            if !s.overlaps_grid(0, w, h) || !s.overlaps_grid(1, w, h) {
                return Err(Error::InvalidScene(format!(
                    "shape {i} must be at least partly visible in both frames"
                )));
            }
            if self.shapes[..i].iter().any(|o| o.depth == s.depth) {
                return Err(Error::InvalidScene(format!("duplicate depth {}", s.depth)));
            }
        }
        Ok(())
    }

    /// Owner of pixel `(x, y)` in frame `t`: a shape index, or `None` for
    /// the background.
    fn owner(&self, x: i32, y: i32, t: i32) -> Option<usize> {
        self.shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.covers(x, y, t))
            .min_by_key(|(_, s)| s.depth)
            .map(|(i, _)| i)
    }

    fn translation(&self, owner: Option<usize>) -> [i32; 2] {
        owner.map_or(self.background.translation, |i| self.shapes[i].translation)
    }

    /// `true` when `a` is nearer than `b` (background is farthest).
    fn in_front(&self, a: Option<usize>, b: Option<usize>) -> bool {
        match (a, b) {
            (Some(i), Some(j)) => self.shapes[i].depth < self.shapes[j].depth,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}

/// Frames, bidirectional flow and per-frame occlusion / boundary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub frame1: FeatureMap,
    pub frame2: FeatureMap,
    pub flow12: FlowField,
    pub flow21: FlowField,
    pub occ1: ScalarMap,
    pub occ2: ScalarMap,
    pub mb1: ScalarMap,
    pub mb2: ScalarMap,
}

impl SamplePair {
    pub fn width(&self) -> usize {
        self.occ1.width()
    }

    pub fn height(&self) -> usize {
        self.occ1.height()
    }

    /// Swap the roles of the two frames.
    pub fn time_reversed(&self) -> SamplePair {
        SamplePair {
            frame1: self.frame2.clone(),
            frame2: self.frame1.clone(),
            flow12: self.flow21.clone().with_direction(Direction::Forward),
            flow21: self.flow12.clone().with_direction(Direction::Backward),
            occ1: self.occ2.clone(),
            occ2: self.occ1.clone(),
            mb1: self.mb2.clone(),
            mb2: self.mb1.clone(),
        }
    }
}

/// Hash-based lattice noise in `[0, 1)`, smooth-ish via bilinear blending of
/// a 4-pixel lattice. Defined on all of Z^2 so a moving background keeps its
/// texture.
fn texture(seed: u64, x: i32, y: i32) -> f64 {
    fn hash(seed: u64, x: i64, y: i64) -> f64 {
        let mut z = seed
            .wrapping_add((x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add((y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }
    const CELL: i64 = 4;
    let (x, y) = (x as i64, y as i64);
    let (cx, cy) = (x.div_euclid(CELL), y.div_euclid(CELL));
    let tx = x.rem_euclid(CELL) as f64 / CELL as f64;
    let ty = y.rem_euclid(CELL) as f64 / CELL as f64;
    let a = hash(seed, cx, cy) * (1.0 - tx) + hash(seed, cx + 1, cy) * tx;
    let b = hash(seed, cx, cy + 1) * (1.0 - tx) + hash(seed, cx + 1, cy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

/// Render frames and compute exact ground truth. `seed` drives only the
/// pixel noise, so the labels depend on `spec` alone.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let (wi, hi) = (w as i32, h as i32);
    let owners: [Vec<Option<usize>>; 2] = std::array::from_fn(|t| {
        (0..w * h)
            .map(|i| spec.owner((i % w) as i32, (i / w) as i32, t as i32))
            .collect()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidScene(e.to_string()))?;
    let bg = &spec.background;
    let mut frames = Vec::with_capacity(2);
    for t in 0..2 {
        let mut values = vec![0.0; 3 * w * h];
        for i in 0..w * h {
            let (x, y) = ((i % w) as i32, (i / w) as i32);
            let color = match owners[t][i] {
                Some(k) => spec.shapes[k].color,
                None => {
                    let bx = x - t as i32 * bg.translation[0];
                    let by = y - t as i32 * bg.translation[1];
                    let tex = bg.texture_amplitude * (texture(bg.texture_seed, bx, by) - 0.5);
                    [bg.color[0] + tex, bg.color[1] + tex, bg.color[2] + tex]
                }
            };
            for c in 0..3 {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                values[c * w * h + i] = color[c] + n;
            }
        }
        frames.push(FeatureMap::new(w, h, 3, values)?);
    }
    let frame2 = frames.pop().unwrap();
    let frame1 = frames.pop().unwrap();

    let flow_of = |t: usize, sign: f64, dir: Direction| {
        FlowField::from_fn(w, h, dir, |x, y| {
            let tr = spec.translation(owners[t][y * w + x]);
            (sign * tr[0] as f64, sign * tr[1] as f64)
        })
    };
    let flow12 = flow_of(0, 1.0, Direction::Forward)?;
    let flow21 = flow_of(1, -1.0, Direction::Backward)?;

    // A pixel is occluded when its correspondent leaves the grid or is owned
    // by something else in the other frame.
    let occlusion = |t: usize, sign: i32| -> Result<ScalarMap> {
        let other = 1 - t;
        let mask: Vec<bool> = (0..w * h)
            .map(|i| {
                let owner = owners[t][i];
                let tr = spec.translation(owner);
                let tx = (i % w) as i32 + sign * tr[0];
                let ty = (i / w) as i32 + sign * tr[1];
                if tx < 0 || ty < 0 || tx >= wi || ty >= hi {
                    return true;
                }
                owners[other][ty as usize * w + tx as usize] != owner
            })
            .collect();
        ScalarMap::from_mask(w, h, &mask)
    };
    let occ1 = occlusion(0, 1)?;
    let occ2 = occlusion(1, -1)?;

    // Foreground-side pixels of every flow discontinuity (4-neighbourhood).
    let boundaries = |t: usize| -> Result<ScalarMap> {
        let own = &owners[t];
        let mask: Vec<bool> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as i32, (i / w) as i32);
                let tr = spec.translation(own[i]);
                [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= wi || ny >= hi {
                        return false;
                    }
                    let j = ny as usize * w + nx as usize;
                    spec.translation(own[j]) != tr && spec.in_front(own[i], own[j])
                })
            })
            .collect();
        ScalarMap::from_mask(w, h, &mask)
    };
    let mb1 = boundaries(0)?;
    let mb2 = boundaries(1)?;

    Ok(SamplePair {
        frame1,
        frame2,
        flow12,
        flow21,
        occ1,
        occ2,
        mb1,
        mb2,
    })
}

/// The canonical small scene: an 8x8 white world with a 3x3 blue square in
/// columns and rows 2-4, moving two pixels to the right.
pub fn translating_square() -> SceneSpec {
    translating_square_with(8, 8, 2, 2, 3, [2, 0])
}

/// A blue square of side `side` at `(x, y)` moving by `translation` over a
/// static white background.
pub fn translating_square_with(
    width: usize,
    height: usize,
    x: i32,
    y: i32,
    side: u32,
    translation: [i32; 2],
) -> SceneSpec {
    SceneSpec {
        width,
        height,
        background: Background::default(),
        shapes: vec![Shape {
            kind: ShapeKind::Rect,
            x,
            y,
            width: side,
            height: side,
            depth: 1,
            translation,
            color: [0.1, 0.2, 0.9],
        }],
        noise_sigma: 0.0,
    }
}

/// Options for [`random_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSceneOptions {
    pub max_shapes: usize,
    pub max_translation: i32,
    pub noise_sigma: f64,
    /// Keep the background static and every shape inside the grid in both
    /// frames, so no pixel leaves the image.
    pub keep_inside: bool,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            max_shapes: 3,
            max_translation: 3,
            noise_sigma: 0.0,
            keep_inside: false,
        }
    }
}

/// Random valid scene of the given size.
pub fn random_scene(width: usize, height: usize, opts: RandomSceneOptions, rng: &mut impl Rng) -> SceneSpec {
    let (wi, hi) = (width as i32, height as i32);
    let t = opts.max_translation.max(0);
    loop {
        let n = rng.random_range(1..=opts.max_shapes.max(1));
        let mut shapes = Vec::with_capacity(n);
        for k in 0..n {
            let sw = rng.random_range((width as u32 / 8).max(2)..=(width as u32 / 3).max(3));
            let sh = rng.random_range((height as u32 / 8).max(2)..=(height as u32 / 3).max(3));
            let translation = [rng.random_range(-t..=t), rng.random_range(-t..=t)];
            let (x, y) = if opts.keep_inside {
                let lo_x = (-translation[0]).max(0);
                let hi_x = wi - sw as i32 - translation[0].max(0);
                let lo_y = (-translation[1]).max(0);
                let hi_y = hi - sh as i32 - translation[1].max(0);
                if hi_x < lo_x || hi_y < lo_y {
                    continue;
                }
                (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y))
            } else {
                (
                    rng.random_range(-(sw as i32) / 2..wi - sw as i32 / 2),
                    rng.random_range(-(sh as i32) / 2..hi - sh as i32 / 2),
                )
            };
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Ellipse
            };
            shapes.push(Shape {
                kind,
                x,
                y,
                width: sw,
                height: sh,
                depth: k as i32 + 1,
                translation,
                color: [rng.random(), rng.random(), rng.random()],
            });
        }
        let background = Background {
            color: [rng.random(), rng.random(), rng.random()],
            texture_seed: rng.random(),
            texture_amplitude: rng.random_range(0.0..0.4),
            translation: if opts.keep_inside {
                [0, 0]
            } else {
                [rng.random_range(-1..=1), rng.random_range(-1..=1)]
            },
        };
        let spec = SceneSpec {
            width,
            height,
            background,
            shapes,
            noise_sigma: opts.noise_sigma,
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

/// `n` random samples; sample `i` is derived from `(seed, i)` only.
pub fn random_dataset(
    n: usize,
    width: usize,
    height: usize,
    opts: RandomSceneOptions,
    seed: u64,
) -> Vec<SamplePair> {
    crate::par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let spec = random_scene(width, height, opts, &mut rng);
        generate(&spec, rng.random()).expect("random scenes are valid")
    })
}

/// Forward-backward occlusion check: 1 where the symmetry residual exceeds
/// `tau`, or where `x + F_{1->2}(x)` lands more than `tau` beyond the
/// outermost pixel centres.
pub fn occ_from_flow(f12: &FlowField, f21: &FlowField, tau: f64) -> Result<ScalarMap> {
    let residual = flow_symmetry_residual(f12, f21)?;
    let (w, h) = (f12.width(), f12.height());
    let mask: Vec<bool> = (0..w * h)
        .map(|i| {
            let tx = (i % w) as f64 + f12.u()[i];
            let ty = (i / w) as f64 + f12.v()[i];
            let outside = tx < -tau
                || ty < -tau
                || tx > (w - 1) as f64 + tau
                || ty > (h - 1) as f64 + tau;
            outside || residual.values()[i] > tau
        })
        .collect();
    ScalarMap::from_mask(w, h, &mask)
}

/// Per-pixel flow-gradient magnitude (max over the `u` and `v` channels).
pub fn flow_gradient(f: &FlowField) -> Result<ScalarMap> {
    let (u, v) = f.components();
    let gu = u.gradient_magnitude()?;
    let gv = v.gradient_magnitude()?;
    let values = gu.values().iter().zip(gv.values()).map(|(a, b)| a.max(*b)).collect();
    ScalarMap::new(f.width(), f.height(), values, RangeTag::NonNeg)
}

/// Largest flow-gradient magnitude over a collection of flows.
pub fn dataset_gradient_max<'a>(flows: impl IntoIterator<Item = &'a FlowField>) -> Result<f64> {
    let mut best: f64 = 0.0;
    for f in flows {
        best = flow_gradient(f)?.values().iter().fold(best, |a, &b| a.max(b));
    }
    Ok(best)
}

/// Flow-gradient boundary baseline, capped at `cap_fraction * max_gradient`
/// and rescaled to `[0, 1]`.
pub fn mb_from_flow_gradient_with_max(f: &FlowField, cap_fraction: f64, max_gradient: f64) -> Result<ScalarMap> {
    if !(cap_fraction > 0.0 && cap_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cap fraction {cap_fraction} outside (0, 1]"
        )));
    }
    let g = flow_gradient(f)?;
    let cap = cap_fraction * max_gradient;
    let values = if cap > 0.0 {
        g.values().iter().map(|&v| v.min(cap) / cap).collect()
    } else {
        vec![0.0; g.len()]
    };
    ScalarMap::new(f.width(), f.height(), values, RangeTag::Unit)
}

/// [`mb_from_flow_gradient_with_max`] with this flow's own maximum.
pub fn mb_from_flow_gradient(f: &FlowField, cap_fraction: f64) -> Result<ScalarMap> {
    let max = dataset_gradient_max([f])?;
    mb_from_flow_gradient_with_max(f, cap_fraction, max)
}

/// Occlusion evidence available in frame `a`: its own occlusions united with
/// the other frame's occlusions moved into frame `a` by direct warping.
pub fn occ_union(own_occ: &ScalarMap, other_occ: &ScalarMap, flow_other_to_own: &FlowField) -> Result<ScalarMap> {
    let warped = direct_warp(other_occ, flow_other_to_own)?;
    let mask: Vec<bool> = (0..own_occ.len())
        .map(|i| {
            let (x, y) = (i % own_occ.width(), i / own_occ.width());
            own_occ.values()[i] >= 0.5 || warped.value(x, y).is_some_and(|v| v >= 0.5)
        })
        .collect();
    ScalarMap::from_mask(own_occ.width(), own_occ.height(), &mask)
}

/// Occlusion pixels with at least one non-occluded 4-neighbour.
pub fn occ_boundary(o: &ScalarMap) -> Vec<bool> {
    let (w, h) = (o.width(), o.height());
    let m = o.to_mask();
    (0..w * h)
        .map(|i| {
            if !m[i] {
                return false;
            }
            let (x, y) = (i % w, i / w);
            (x > 0 && !m[i - 1])
                || (x + 1 < w && !m[i + 1])
                || (y > 0 && !m[i - w])
                || (y + 1 < h && !m[i + w])
        })
        .collect()
}

/// For each radius `r`, the fraction of boundary pixels of `mb` within
/// Chebyshev distance `r` of an occlusion-boundary pixel. `None` when `mb`
/// has no positive pixels.
pub fn adjacency_stats(mb: &ScalarMap, occ: &ScalarMap, radii: &[usize]) -> Result<Vec<Option<f64>>> {
    if !mb.same_shape(occ) {
        return Err(Error::DimensionMismatch("mb and occ maps differ in size".into()));
    }
    let (w, h) = (mb.width(), mb.height());
    let boundary = occ_boundary(occ);
    let mbs: Vec<usize> = (0..w * h).filter(|&i| mb.values()[i] >= 0.5).collect();
    if mbs.is_empty() {
        return Ok(vec![None; radii.len()]);
    }
    // Chebyshev distance to the nearest boundary pixel, by brute force on
    // the occupied set (maps here are small).
    let targets: Vec<(i64, i64)> = (0..w * h)
        .filter(|&i| boundary[i])
        .map(|i| ((i % w) as i64, (i / w) as i64))
        .collect();
    let nearest: Vec<Option<i64>> = mbs
        .iter()
        .map(|&i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            targets.iter().map(|(tx, ty)| (tx - x).abs().max((ty - y).abs())).min()
        })
        .collect();
    Ok(radii
        .iter()
        .map(|&r| {
            let hits = nearest.iter().filter(|d| d.is_some_and(|d| d <= r as i64)).count();
            Some(hits as f64 / mbs.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(m: &ScalarMap) -> Vec<(usize, usize)> {
        (0..m.len())
            .filter(|&i| m.values()[i] >= 0.5)
            .map(|i| (i % m.width(), i / m.width()))
            .collect()
    }

    fn rect(x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                v.push((x, y));
            }
        }
        v
    }

    #[test]
    fn static_scene_has_no_motion_labels() {
        let spec = translating_square_with(10, 10, 3, 3, 4, [0, 0]);
        let s = generate(&spec, 1).unwrap();
        assert!(s.flow12.u().iter().chain(s.flow12.v()).all(|&v| v == 0.0));
        assert!(s.flow21.u().iter().chain(s.flow21.v()).all(|&v| v == 0.0));
        for m in [&s.occ1, &s.occ2, &s.mb1, &s.mb2] {
            assert_eq!(m.count_positive(), 0);
        }
    }

    #[test]
    fn translating_square_labels() {
        let s = generate(&translating_square(), 0).unwrap();
        // leading-edge band covered in frame 2
        assert_eq!(mask_of(&s.occ1), rect(5, 6, 2, 4));
        // trailing-edge band revealed in frame 2
        assert_eq!(mask_of(&s.occ2), rect(2, 3, 2, 4));
        // square outline, centre pixel excluded
        let mut outline = rect(2, 4, 2, 4);
        outline.retain(|&p| p != (3, 3));
        assert_eq!(mask_of(&s.mb1), outline);
        assert_eq!(s.flow12.at(3, 3), (2.0, 0.0));
        assert_eq!(s.flow12.at(0, 0), (0.0, 0.0));
        assert_eq!(s.flow21.at(5, 3), (-2.0, 0.0));
    }

    #[test]
    fn empty_and_invalid_specs_are_rejected() {
        let mut spec = translating_square();
        spec.shapes.clear();
        assert!(matches!(generate(&spec, 0), Err(Error::InvalidScene(_))));

        let mut spec = translating_square();
        spec.shapes.push(spec.shapes[0].clone());
        assert!(generate(&spec, 0).is_err(), "duplicate depth");

        let spec = translating_square_with(8, 8, 20, 20, 3, [0, 0]);
        assert!(generate(&spec, 0).is_err(), "off-grid shape");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = translating_square();
        spec.noise_sigma = 0.05;
        assert_eq!(generate(&spec, 7).unwrap(), generate(&spec, 7).unwrap());
        assert_ne!(generate(&spec, 7).unwrap().frame1, generate(&spec, 8).unwrap().frame1);
    }

    #[test]
    fn occ_from_flow_examples() {
        let f = FlowField::uniform(6, 6, 1.0, 1.0, Direction::Forward);
        let o = occ_from_flow(&f, &f.negated(), 0.25).unwrap();
        // only pixels pushed off the grid are flagged
        assert_eq!(o.count_positive(), 11);
        let inner = FlowField::uniform(6, 6, 0.0, 0.0, Direction::Forward);
        assert_eq!(occ_from_flow(&inner, &inner.negated(), 0.1).unwrap().count_positive(), 0);

        let s = generate(&translating_square(), 0).unwrap();
        assert_eq!(occ_from_flow(&s.flow12, &s.flow21, DEFAULT_TAU).unwrap(), s.occ1);
        assert_eq!(occ_from_flow(&s.flow21, &s.flow12, DEFAULT_TAU).unwrap(), s.occ2);
    }

    #[test]
    fn noisy_static_flows_pass_the_check() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 0.1).unwrap();
            let mut noisy = |dir| {
                FlowField::from_fn(16, 16, dir, |_, _| (n.sample(&mut rng), n.sample(&mut rng))).unwrap()
            };
            let f12 = noisy(Direction::Forward);
            let f21 = noisy(Direction::Backward);
            assert_eq!(occ_from_flow(&f12, &f21, 1.0).unwrap().count_positive(), 0, "seed {seed}");
        }
    }

    #[test]
    fn gradient_baseline_examples() {
        let f = FlowField::uniform(6, 6, 2.0, 1.0, Direction::Forward);
        assert!(mb_from_flow_gradient(&f, 0.5).unwrap().values().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FlowField::from_fn(8, 8, Direction::Forward, |_, _| (rng.random(), rng.random())).unwrap();
        let m = mb_from_flow_gradient(&f, 1.0).unwrap();
        assert_eq!(m.values().iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(mb_from_flow_gradient(&f, 0.0).is_err());
    }

    #[test]
    fn gradient_baseline_hugs_true_boundaries() {
        let s = generate(&translating_square(), 0).unwrap();
        let mb = mask_of(&s.mb1);
        for cap in [0.25, 0.5, 0.75, 1.0] {
            let g = mb_from_flow_gradient(&s.flow12, cap).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let near = mb.iter().any(|&(mx, my)| mx.abs_diff(x) <= 1 && my.abs_diff(y) <= 1);
                    if g.get(x, y) > 0.0 {
                        assert!(near, "({x},{y}) nonzero away from boundary");
                    }
                }
            }
            for &(mx, my) in &mb {
                assert!(g.get(mx, my) > 0.0);
            }
        }
    }

    #[test]
    fn adjacency_examples() {
        let s = generate(&translating_square(), 0).unwrap();
        let boundary = occ_boundary(&s.occ1);
        let b = ScalarMap::from_mask(8, 8, &boundary).unwrap();
        assert_eq!(adjacency_stats(&b, &s.occ1, &[0]).unwrap(), vec![Some(1.0)]);

        let empty = ScalarMap::zeros(8, 8, RangeTag::Unit);
        assert_eq!(adjacency_stats(&empty, &s.occ1, &[1, 3]).unwrap(), vec![None, None]);

        let occ = occ_union(&s.occ1, &s.occ2, &s.flow21).unwrap();
        assert_eq!(mask_of(&occ), {
            let mut v = rect(2, 3, 2, 4);
            v.extend(rect(5, 6, 2, 4));
            v.sort_by_key(|&(x, y)| (y, x));
            v
        });
        assert_eq!(adjacency_stats(&s.mb1, &occ, &[1]).unwrap(), vec![Some(1.0)]);
        // own occlusions alone only reach the leading edge
        assert_eq!(adjacency_stats(&s.mb1, &s.occ1, &[1]).unwrap(), vec![Some(3.0 / 8.0)]);
    }

    #[test]
    fn random_scenes_are_valid_and_reproducible() {
        let a = random_dataset(6, 24, 20, RandomSceneOptions::default(), 5);
        let b = random_dataset(6, 24, 20, RandomSceneOptions::default(), 5);
        assert_eq!(a, b);
        for s in &a {
            assert_eq!((s.width(), s.height()), (24, 20));
        }
    }
}
