//! Grid types shared by every stage, plus the resampling primitives they need.
//!
//! Coordinates: pixel centers sit on integer coordinates, origin top-left,
//! `x` grows to the right and `y` grows downward. All planes are stored
//! row-major (`y * width + x`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value range of a [`ScalarMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Every value lies in `[0, 1]` (scores, probabilities, binary labels).
    Unit,
    /// Every value is `>= 0` (costs, distances, gradient magnitudes).
    NonNeg,
    /// Any finite value.
    Free,
}

impl RangeTag {
    fn admits(self, v: f64) -> bool {
        match self {
            RangeTag::Unit => (0.0..=1.0).contains(&v),
            RangeTag::NonNeg => v >= 0.0,
            RangeTag::Free => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RangeTag::Unit => "[0,1]",
            RangeTag::NonNeg => "[0,inf)",
            RangeTag::Free => "(-inf,inf)",
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyGrid { width, height });
    }
    Ok(())
}

fn check_values(values: &[f64], range: RangeTag) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index });
        }
        if !range.admits(value) {
            return Err(Error::OutOfRange {
                index,
                value,
                range: range.name(),
            });
        }
    }
    Ok(())
}

/// A `width x height` grid of finite reals with a declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    range: RangeTag,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, range: RangeTag) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: values.len(),
            });
        }
        check_values(&values, range)?;
        Ok(Self {
            width,
            height,
            range,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64, range: RangeTag) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], range)
    }

    /// All-zero map. Panics on an empty grid.
    pub fn zeros(width: usize, height: usize, range: RangeTag) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        Self {
            width,
            height,
            range,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        range: RangeTag,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values, range)
    }

    /// Binary map (`1.0` where `pred` holds).
    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        Self::new(
            width,
            height,
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            RangeTag::Unit,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Re-validate under a different range tag.
    pub fn with_range(self, range: RangeTag) -> Result<Self> {
        check_values(&self.values, range)?;
        Ok(Self { range, ..self })
    }

    pub fn same_shape(&self, other: &ScalarMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixels with value >= 0.5.
    pub fn to_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    /// 2x2 average pooling to `ceil(h/2) x ceil(w/2)`; the range tag is kept.
    pub fn downsample2(&self) -> ScalarMap {
        let r = Resampler::pool2(self.width, self.height);
        ScalarMap {
            width: r.out_w,
            height: r.out_h,
            range: self.range,
            values: r.apply(&self.values),
        }
    }

    /// Corner-aligned bilinear upsampling to `width x height`.
    pub fn upsample_to(&self, width: usize, height: usize) -> Result<ScalarMap> {
        if width < self.width || height < self.height {
            return Err(Error::TargetTooSmall {
                src_w: self.width,
                src_h: self.height,
                target_w: width,
                target_h: height,
            });
        }
        let r = Resampler::upsample(self.width, self.height, width, height);
        Ok(ScalarMap {
            width,
            height,
            range: self.range,
            values: r.apply(&self.values),
        })
    }

    /// `sqrt(gx^2 + gy^2)` with central differences inside and one-sided
    /// differences on the border.
    pub fn gradient_magnitude(&self) -> Result<ScalarMap> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Degenerate {
                width: self.width,
                height: self.height,
            });
        }
        let (gx, gy) = gradient_components(self.width, self.height, &self.values);
        let values = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect();
        Ok(ScalarMap {
            width: self.width,
            height: self.height,
            range: RangeTag::NonNeg,
            values,
        })
    }
}

/// Temporal direction of a flow field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Frame 1 to frame 2.
    Forward,
    /// Frame 2 to frame 1.
    Backward,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Forward => "1->2",
            Direction::Backward => "2->1",
        }
    }
}

/// Per-pixel displacement `(u, v)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    direction: Direction,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<f64>,
        v: Vec<f64>,
        direction: Direction,
    ) -> Result<Self> {
        check_dims(width, height)?;
        for comp in [&u, &v] {
            if comp.len() != width * height {
                return Err(Error::LengthMismatch {
                    expected: width * height,
                    actual: comp.len(),
                });
            }
            check_values(comp, RangeTag::Free)?;
        }
        Ok(Self {
            width,
            height,
            direction,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize, direction: Direction) -> Self {
        Self::uniform(width, height, 0.0, 0.0, direction)
    }

    pub fn uniform(width: usize, height: usize, du: f64, dv: f64, direction: Direction) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        assert!(du.is_finite() && dv.is_finite());
        let n = width * height;
        Self {
            width,
            height,
            direction,
            u: vec![du; n],
            v: vec![dv; n],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        direction: Direction,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(width, height, u, v, direction)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            direction: self.direction.opposite(),
            u: self.u.iter().map(|a| -a).collect(),
            v: self.v.iter().map(|a| -a).collect(),
        }
    }

    /// Pool to half resolution and halve the displacements, so vectors stay
    /// in units of the coarser grid's pixels.
    pub fn downsample_scaled(&self) -> FlowField {
        let r = Resampler::pool2(self.width, self.height);
        FlowField {
            width: r.out_w,
            height: r.out_h,
            direction: self.direction,
            u: r.apply(&self.u).into_iter().map(|a| a * 0.5).collect(),
            v: r.apply(&self.v).into_iter().map(|a| a * 0.5).collect(),
        }
    }

    /// `u` and `v` as separate free-range maps.
    pub fn components(&self) -> (ScalarMap, ScalarMap) {
        let mk = |vals: &Vec<f64>| ScalarMap {
            width: self.width,
            height: self.height,
            range: RangeTag::Free,
            values: vals.clone(),
        };
        (mk(&self.u), mk(&self.v))
    }

    pub fn same_shape_as(&self, m: &ScalarMap) -> bool {
        self.width == m.width() && self.height == m.height()
    }
}

/// Output of direct warping: values plus how many source pixels landed on
/// each target. Pixels with zero coverage are undefined and hold `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    map: ScalarMap,
    coverage: Vec<u32>,
}

impl MaskedMap {
    pub(crate) fn from_parts(map: ScalarMap, coverage: Vec<u32>) -> Self {
        debug_assert_eq!(map.len(), coverage.len());
        debug_assert!(map
            .values()
            .iter()
            .zip(&coverage)
            .all(|(&v, &c)| c > 0 || v == 0.0));
        Self { map, coverage }
    }

    /// Raw values; undefined pixels read as the `0.0` sentinel.
    pub fn map(&self) -> &ScalarMap {
        &self.map
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn is_defined(&self, x: usize, y: usize) -> bool {
        self.coverage[y * self.map.width() + x] > 0
    }

    pub fn value(&self, x: usize, y: usize) -> Option<f64> {
        self.is_defined(x, y).then(|| self.map.get(x, y))
    }

    pub fn undefined_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c == 0).count()
    }

    /// `1.0` on defined pixels, `0.0` elsewhere.
    pub fn defined_mask(&self) -> ScalarMap {
        let mask: Vec<bool> = self.coverage.iter().map(|&c| c > 0).collect();
        ScalarMap::from_mask(self.width(), self.height(), &mask).expect("mask is binary")
    }
}

/// `channels x height x width` features (channel-major planes).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if channels == 0 {
            return Err(Error::InvalidArgument("feature map needs >= 1 channel".into()));
        }
        if values.len() != width * height * channels {
            return Err(Error::LengthMismatch {
                expected: width * height * channels,
                actual: values.len(),
            });
        }
        check_values(&values, RangeTag::Free)?;
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    /// `f(channel, x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, x, y));
                }
            }
        }
        Self::new(width, height, channels, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, x, y)).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn downsample2(&self) -> FeatureMap {
        let r = Resampler::pool2(self.width, self.height);
        let mut values = Vec::with_capacity(r.out_w * r.out_h * self.channels);
        for c in 0..self.channels {
            values.extend(r.apply(self.channel(c)));
        }
        FeatureMap {
            width: r.out_w,
            height: r.out_h,
            channels: self.channels,
            values,
        }
    }

    /// Single-channel view as a free-range map.
    pub fn channel_map(&self, c: usize) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            range: RangeTag::Free,
            values: self.channel(c).to_vec(),
        }
    }
}

/// Central differences inside, one-sided on the border.
pub fn gradient_components(width: usize, height: usize, plane: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; width * height];
    let mut gy = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            gx[i] = if width < 2 {
                0.0
            } else if x == 0 {
                plane[i + 1] - plane[i]
            } else if x == width - 1 {
                plane[i] - plane[i - 1]
            } else {
                (plane[i + 1] - plane[i - 1]) * 0.5
            };
            gy[i] = if height < 2 {
                0.0
            } else if y == 0 {
                plane[i + width] - plane[i]
            } else if y == height - 1 {
                plane[i] - plane[i - width]
            } else {
                (plane[i + width] - plane[i - width]) * 0.5
            };
        }
    }
    (gx, gy)
}

/// Bilinear taps at `(x, y)`, clamped to the grid. Zero-weight taps are
/// dropped, so integer coordinates produce a single exact tap.
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> Vec<(usize, f64)> {
    let cx = x.clamp(0.0, (width - 1) as f64);
    let cy = y.clamp(0.0, (height - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let mut taps = Vec::with_capacity(4);
    let mut push = |xx: usize, yy: usize, w: f64| {
        if w != 0.0 {
            taps.push((yy * width + xx, w));
        }
    };
    push(x0, y0, (1.0 - fx) * (1.0 - fy));
    push(x1, y0, fx * (1.0 - fy));
    push(x0, y1, (1.0 - fx) * fy);
    push(x1, y1, fx * fy);
    taps
}

/// A fixed sparse linear map from one plane size to another, applied
/// identically to every channel. Used for pooling, upsampling and
/// backward sampling, both on plain maps and inside the network graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub in_w: usize,
    pub in_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Resampler {
    fn from_rows(
        in_w: usize,
        in_h: usize,
        out_w: usize,
        out_h: usize,
        rows: impl Iterator<Item = Vec<(usize, f64)>>,
    ) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        debug_assert_eq!(row_ptr.len(), out_w * out_h + 1);
        Self {
            in_w,
            in_h,
            out_w,
            out_h,
            row_ptr,
            cols,
            weights,
        }
    }

    /// 2x2 mean pooling; odd edges replicate the last row/column.
    pub fn pool2(width: usize, height: usize) -> Self {
        let ow = width.div_ceil(2);
        let oh = height.div_ceil(2);
        let rows = (0..oh).flat_map(move |oy| {
            (0..ow).map(move |ox| {
                let xs = [2 * ox, (2 * ox + 1).min(width - 1)];
                let ys = [2 * oy, (2 * oy + 1).min(height - 1)];
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &yy in &ys {
                    for &xx in &xs {
                        let idx = yy * width + xx;
                        match row.iter_mut().find(|(c, _)| *c == idx) {
                            Some(entry) => entry.1 += 0.25,
                            None => row.push((idx, 0.25)),
                        }
                    }
                }
                row
            })
        });
        Self::from_rows(width, height, ow, oh, rows)
    }

    /// Corner-aligned bilinear upsampling (`out >= in` on both axes).
    pub fn upsample(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Self {
        let scale = |n_in: usize, n_out: usize| {
            if n_out > 1 && n_in > 1 {
                (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            }
        };
        let sx = scale(in_w, out_w);
        let sy = scale(in_h, out_h);
        let rows = (0..out_h).flat_map(move |y| {
            (0..out_w).map(move |x| bilinear_taps(in_w, in_h, x as f64 * sx, y as f64 * sy))
        });
        Self::from_rows(in_w, in_h, out_w, out_h, rows)
    }

    /// Bilinear, border-clamped sampling at one point per output pixel.
    pub fn sample_points(
        in_w: usize,
        in_h: usize,
        out_w: usize,
        out_h: usize,
        points: impl Iterator<Item = (f64, f64)>,
    ) -> Self {
        Self::from_rows(
            in_w,
            in_h,
            out_w,
            out_h,
            points.map(|(x, y)| bilinear_taps(in_w, in_h, x, y)),
        )
    }

    /// Backward sampling along a flow: output `x` reads input at `x + F(x)`.
    pub fn along_flow(flow: &FlowField) -> Self {
        let (w, h) = (flow.width(), flow.height());
        let pts = (0..h).flat_map(move |y| {
            (0..w).map(move |x| {
                let (u, v) = flow.at(x, y);
                (x as f64 + u, y as f64 + v)
            })
        });
        Self::sample_points(w, h, w, h, pts)
    }

    pub fn in_len(&self) -> usize {
        self.in_w * self.in_h
    }

    pub fn out_len(&self) -> usize {
        self.out_w * self.out_h
    }

    pub fn apply(&self, plane: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len()];
        self.apply_into(plane, &mut out);
        out
    }

    pub fn apply_into(&self, plane: &[f64], out: &mut [f64]) {
        debug_assert_eq!(plane.len(), self.in_len());
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[o]..self.row_ptr[o + 1] {
                acc += self.weights[k] * plane[self.cols[k]];
            }
            *slot = acc;
        }
    }

    /// Accumulate the transpose: `grad_in += R^T grad_out`.
    pub fn apply_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in self.row_ptr[o]..self.row_ptr[o + 1] {
                grad_in[self.cols[k]] += self.weights[k] * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, seed: u64) -> ScalarMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarMap::from_fn(w, h, RangeTag::Unit, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            ScalarMap::new(0, 3, vec![], RangeTag::Free),
            Err(Error::EmptyGrid { .. })
        ));
        assert!(matches!(
            ScalarMap::new(2, 1, vec![0.0], RangeTag::Free),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            ScalarMap::new(1, 1, vec![f64::NAN], RangeTag::Free),
            Err(Error::NonFinite { index: 0 })
        ));
        assert!(matches!(
            ScalarMap::new(1, 1, vec![1.5], RangeTag::Unit),
            Err(Error::OutOfRange { .. })
        ));
        assert!(ScalarMap::new(1, 1, vec![-1.0], RangeTag::NonNeg).is_err());
    }

    #[test]
    fn downsample_constant_and_mean() {
        let m = ScalarMap::constant(2, 2, 1.0, RangeTag::Unit).unwrap();
        let d = m.downsample2();
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.get(0, 0), 1.0);

        let m = ScalarMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0], RangeTag::Unit).unwrap();
        assert_eq!(m.downsample2().get(0, 0), 0.5);
    }

    #[test]
    fn downsample_matches_block_means() {
        let m = random_map(8, 8, 7);
        let d = m.downsample2();
        assert_eq!((d.width(), d.height()), (4, 4));
        for by in 0..4 {
            for bx in 0..4 {
                let mean = (m.get(2 * bx, 2 * by)
                    + m.get(2 * bx + 1, 2 * by)
                    + m.get(2 * bx, 2 * by + 1)
                    + m.get(2 * bx + 1, 2 * by + 1))
                    / 4.0;
                assert!((d.get(bx, by) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn downsample_odd_dimensions_replicate_edges() {
        let m = ScalarMap::new(3, 1, vec![1.0, 2.0, 4.0], RangeTag::Free).unwrap();
        let d = m.downsample2();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.values(), &[1.5, 4.0]);
    }

    #[test]
    fn upsample_examples() {
        let m = ScalarMap::constant(1, 1, 0.7, RangeTag::Unit).unwrap();
        let u = m.upsample_to(4, 4).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.7));

        let m = ScalarMap::new(2, 1, vec![0.0, 1.0], RangeTag::Unit).unwrap();
        let u = m.upsample_to(3, 1).unwrap();
        assert_eq!(u.values(), &[0.0, 0.5, 1.0]);

        assert!(matches!(
            m.upsample_to(1, 1),
            Err(Error::TargetTooSmall { .. })
        ));
    }

    /// Independent corner-aligned bilinear evaluation at one output pixel.
    fn reference_bilinear(m: &ScalarMap, w_out: usize, h_out: usize, x: usize, y: usize) -> f64 {
        let sx = x as f64 * (m.width() - 1) as f64 / (w_out - 1) as f64;
        let sy = y as f64 * (m.height() - 1) as f64 / (h_out - 1) as f64;
        let x0 = sx.floor().min((m.width() - 2) as f64) as usize;
        let y0 = sy.floor().min((m.height() - 2) as f64) as usize;
        let tx = sx - x0 as f64;
        let ty = sy - y0 as f64;
        let top = m.get(x0, y0) * (1.0 - tx) + m.get(x0 + 1, y0) * tx;
        let bottom = m.get(x0, y0 + 1) * (1.0 - tx) + m.get(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    #[test]
    fn upsample_then_downsample_matches_reference() {
        let m = random_map(4, 4, 11);
        let round = m.upsample_to(8, 8).unwrap().downsample2();
        for y in 0..4 {
            for x in 0..4 {
                let mut acc = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    acc += reference_bilinear(&m, 8, 8, 2 * x + dx, 2 * y + dy);
                }
                assert!((round.get(x, y) - acc / 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_examples() {
        let c = ScalarMap::constant(5, 4, 0.3, RangeTag::Unit).unwrap();
        assert!(c.gradient_magnitude().unwrap().values().iter().all(|&v| v == 0.0));

        let col = 3;
        let step =
            ScalarMap::from_fn(8, 5, RangeTag::Unit, |x, _| if x >= col { 1.0 } else { 0.0 })
                .unwrap();
        let g = step.gradient_magnitude().unwrap();
        for y in 0..5 {
            for x in 0..8 {
                let near = x + 1 >= col && x <= col;
                assert_eq!(g.get(x, y) != 0.0, near, "x={x} y={y}");
            }
        }

        let w = 10;
        let ramp = ScalarMap::from_fn(w, 6, RangeTag::Unit, |x, _| x as f64 / w as f64).unwrap();
        let g = ramp.gradient_magnitude().unwrap();
        for y in 1..5 {
            for x in 1..w - 1 {
                assert!((g.get(x, y) - 1.0 / w as f64).abs() < 1e-9);
            }
        }

        let thin = ScalarMap::zeros(1, 4, RangeTag::Free);
        assert!(matches!(
            thin.gradient_magnitude(),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn bilinear_taps_are_exact_on_integers() {
        assert_eq!(bilinear_taps(4, 4, 2.0, 1.0), vec![(6, 1.0)]);
        // clamped outside
        assert_eq!(bilinear_taps(4, 4, -3.0, 9.0), vec![(12, 1.0)]);
        let taps = bilinear_taps(4, 4, 1.25, 0.5);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flow_downsample_scales_vectors() {
        let f = FlowField::uniform(4, 4, 2.0, -4.0, Direction::Forward);
        let d = f.downsample_scaled();
        assert_eq!((d.width(), d.height()), (2, 2));
        assert!(d.u().iter().all(|&u| u == 1.0));
        assert!(d.v().iter().all(|&v| v == -2.0));
        assert_eq!(f.negated().direction(), Direction::Backward);
    }

    proptest! {
        #[test]
        fn constants_survive_resampling(v in 0.0f64..=1.0, w in 1usize..9, h in 1usize..9,
                                        tw in 0usize..7, th in 0usize..7) {
            let m = ScalarMap::constant(w, h, v, RangeTag::Unit).unwrap();
            let d = m.downsample2();
            prop_assert!(d.values().iter().all(|&x| (x - v).abs() < 1e-15));
            let u = m.upsample_to(w + tw, h + th).unwrap();
            prop_assert!(u.values().iter().all(|&x| (x - v).abs() < 1e-15));
        }

        #[test]
        fn unit_range_is_preserved(seed in 0u64..500, w in 1usize..7, h in 1usize..7) {
            let m = random_map(w, h, seed);
            let d = m.downsample2();
            prop_assert!(d.values().iter().all(|x| (0.0..=1.0).contains(x)));
            let u = m.upsample_to(2 * w + 1, 2 * h).unwrap();
            prop_assert!(u.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn gradient_vanishes_only_on_constants(seed in 0u64..500, w in 2usize..8, h in 2usize..8) {
            let m = random_map(w, h, seed);
            let g = m.gradient_magnitude().unwrap();
            prop_assert!(g.values().iter().any(|&x| x > 1e-12));
        }

        #[test]
        fn resampler_adjoint_is_transpose(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flow = FlowField::from_fn(5, 4, Direction::Forward, |_, _| {
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            }).unwrap();
            let r = Resampler::along_flow(&flow);
            let a: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let ra = r.apply(&a);
            let mut rtb = vec![0.0; 20];
            r.apply_adjoint(&b, &mut rtb);
            let lhs: f64 = ra.iter().zip(&b).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.iter().zip(&rtb).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
