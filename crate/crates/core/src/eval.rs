//! Scoring predictions against ground truth.
//!
//! Occlusions are scored by F1 after thresholding at 0.5. Boundaries are
//! thinned by non-maximum suppression, matched one-to-one to ground-truth
//! boundary pixels within a distance tolerance, and summarised by average
//! precision. [`stratified`] splits error rates by distance to the nearest
//! true occlusion or boundary pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{FeatureMap, ScalarMap};

/// Binarisation threshold for occlusion and stratified scores.
pub const THRESHOLD: f64 = 0.5;

/// Number of thresholds in the reported precision/recall sweep.
pub const DEFAULT_THRESHOLDS: usize = 25;

fn check_same(a: &ScalarMap, b: &ScalarMap) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)` with `pred >= 0.5` as positive; 1 when neither
/// side has positives.
pub fn f1_occ(pred: &ScalarMap, gt: &ScalarMap) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p >= THRESHOLD, g >= THRESHOLD) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Default matching tolerance for a `width x height` image:
/// `max(1, round(0.0075 * diagonal))`.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.0075 * diag).round().max(1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn positions(mask: &[bool], w: usize) -> Vec<(i64, i64)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| ((i % w) as i64, (i / w) as i64))
        .collect()
}

/// Size of a maximum one-to-one matching between `pred` and `gt` pixels no
/// farther apart than `tol`. Nearest pairs are matched greedily first; the
/// greedy matching is then grown by augmenting paths until no unmatched
/// prediction can be added.
fn match_masks(pred: &[bool], gt: &[bool], w: usize, h: usize, tol: f64) -> MatchCounts {
    let ps = positions(pred, w);
    let gs = positions(gt, w);
    let r = tol.floor() as i64;
    let tol2 = tol * tol;
    let mut gt_index = vec![usize::MAX; w * h];
    for (k, &(x, y)) in gs.iter().enumerate() {
        gt_index[(y * w as i64 + x) as usize] = k;
    }
    // candidate edges per prediction, nearest first
    let mut adj: Vec<Vec<(i64, usize)>> = Vec::with_capacity(ps.len());
    let mut edges = Vec::new();
    for (pi, &(x, y)) in ps.iter().enumerate() {
        let mut list = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = dx * dx + dy * dy;
                if d2 as f64 > tol2 {
                    continue;
                }
                let (gx, gy) = (x + dx, y + dy);
                if gx < 0 || gy < 0 || gx >= w as i64 || gy >= h as i64 {
                    continue;
                }
                let gi = gt_index[(gy * w as i64 + gx) as usize];
                if gi != usize::MAX {
                    list.push((d2, gi));
                    edges.push((d2, pi, gi));
                }
            }
        }
        list.sort_unstable();
        adj.push(list);
    }
    edges.sort_unstable();
    let mut match_p = vec![usize::MAX; ps.len()];
    let mut match_g = vec![usize::MAX; gs.len()];
    for &(_, pi, gi) in &edges {
        if match_p[pi] == usize::MAX && match_g[gi] == usize::MAX {
            match_p[pi] = gi;
            match_g[gi] = pi;
        }
    }

    fn augment(
        pi: usize,
        adj: &[Vec<(i64, usize)>],
        seen: &mut [bool],
        match_p: &mut [usize],
        match_g: &mut [usize],
    ) -> bool {
        for &(_, gi) in &adj[pi] {
            if seen[gi] {
                continue;
            }
            seen[gi] = true;
            if match_g[gi] == usize::MAX || augment(match_g[gi], adj, seen, match_p, match_g) {
                match_p[pi] = gi;
                match_g[gi] = pi;
                return true;
            }
        }
        false
    }

    let mut seen = vec![false; gs.len()];
    for pi in 0..ps.len() {
        if match_p[pi] != usize::MAX || adj[pi].is_empty() {
            continue;
        }
        seen.fill(false);
        augment(pi, &adj, &mut seen, &mut match_p, &mut match_g);
    }
    let tp = match_p.iter().filter(|&&m| m != usize::MAX).count();
    MatchCounts {
        tp,
        fp: ps.len() - tp,
        fn_: gs.len() - tp,
    }
}

/// One-to-one matching of predicted to ground-truth boundary pixels within
/// Euclidean distance `tol`.
pub fn boundary_match(pred_bin: &ScalarMap, gt_bin: &ScalarMap, tol: f64) -> Result<MatchCounts> {
    check_same(pred_bin, gt_bin)?;
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be finite and >= 0")));
    }
    Ok(match_masks(
        &pred_bin.to_mask(),
        &gt_bin.to_mask(),
        pred_bin.width(),
        pred_bin.height(),
        tol,
    ))
}

/// Dense rank of every value (equal values share a rank).
fn dense_ranks(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    values
        .iter()
        .map(|v| sorted.binary_search_by(|s| s.total_cmp(v)).expect("value present") as f64)
        .collect()
}

/// Non-maximum suppression: a pixel survives unless a neighbour along its
/// (quantised) gradient direction has a strictly larger score. The gradient
/// is taken on the rank-transformed map, so the surviving set depends only
/// on the ordering of scores.
pub fn nms_mask(pred: &ScalarMap) -> Vec<bool> {
    let (w, h) = (pred.width(), pred.height());
    let v = pred.values();
    let ranks = dense_ranks(v);
    let (gx, gy) = crate::grids::gradient_components(w, h, &ranks);
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            if gx[i] == 0.0 && gy[i] == 0.0 {
                return true;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            for s in [-1, 1] {
                let (nx, ny) = (x + s * dx, y + s * dy);
                if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && v[(ny * w as i64 + nx) as usize] > v[i] {
                    return false;
                }
            }
            true
        })
        .collect()
}

/// Thinned score map: suppressed pixels set to 0.
pub fn nms(pred: &ScalarMap) -> ScalarMap {
    let keep = nms_mask(pred);
    let values = pred
        .values()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    ScalarMap::new(pred.width(), pred.height(), values, pred.range()).expect("subset of valid values")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: MatchCounts,
}

/// Precision/recall of thinned boundary predictions.
///
/// `thresholds`, `precision` and `recall` hold the uniform sweep; entries
/// with no predicted pixels have precision 1 by convention. `points` holds
/// the achievable operating points (one per distinct surviving score,
/// highest threshold first, rank-subsampled to [`MAX_LEVELS`]), and
/// `average_precision` is the step integral `sum_k (R_k - R_{k-1}) P_k`
/// over `points`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// Step integral of precision over recall for points ordered by
/// non-decreasing recall.
pub fn step_ap(points: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for p in points {
        ap += (p.recall - last_r) * p.precision;
        last_r = p.recall;
    }
    ap
}

fn pr_point(threshold: f64, counts: MatchCounts) -> PrPoint {
    let predicted = counts.tp + counts.fp;
    let positives = counts.tp + counts.fn_;
    PrPoint {
        threshold,
        precision: if predicted == 0 {
            1.0
        } else {
            counts.tp as f64 / predicted as f64
        },
        recall: if positives == 0 {
            0.0
        } else {
            counts.tp as f64 / positives as f64
        },
        counts,
    }
}

/// Cap on operating points used for AP. Beyond it, levels are taken at
/// evenly spaced ranks (always including the lowest), so AP still depends
/// only on the ordering of scores.
pub const MAX_LEVELS: usize = 256;

/// Boundary precision/recall of `pred` against `gt`. Returns `None` when
/// `gt` has no boundary pixels (AP undefined).
pub fn map_mb(pred: &ScalarMap, gt: &ScalarMap, tol: f64, n_thresholds: usize) -> Result<Option<PrCurve>> {
    check_same(pred, gt)?;
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument("need at least 2 thresholds".into()));
    }
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be finite and >= 0")));
    }
    let gt_mask = gt.to_mask();
    if !gt_mask.iter().any(|&g| g) {
        return Ok(None);
    }
    let (w, h) = (pred.width(), pred.height());
    let keep = nms_mask(pred);
    let v = pred.values();
    let predicted_at = |t: f64| -> Vec<bool> { (0..w * h).map(|i| keep[i] && v[i] >= t).collect() };

    let mut levels: Vec<f64> = (0..w * h).filter(|&i| keep[i]).map(|i| v[i]).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    if levels.len() > MAX_LEVELS {
        let n = levels.len();
        levels = (0..MAX_LEVELS).map(|k| levels[k * (n - 1) / (MAX_LEVELS - 1)]).collect();
    }
    let points: Vec<PrPoint> = crate::par::map_slice(&levels, |&t| {
        pr_point(t, match_masks(&predicted_at(t), &gt_mask, w, h, tol))
    });
    let average_precision = step_ap(&points);

    let thresholds: Vec<f64> = (1..=n_thresholds).map(|k| k as f64 / (n_thresholds + 1) as f64).collect();
    let sweep: Vec<PrPoint> = crate::par::map_slice(&thresholds, |&t| {
        pr_point(t, match_masks(&predicted_at(t), &gt_mask, w, h, tol))
    });
    Ok(Some(PrCurve {
        thresholds,
        precision: sweep.iter().map(|p| p.precision).collect(),
        recall: sweep.iter().map(|p| p.recall).collect(),
        points,
        average_precision,
    }))
}

/// Mean AP over samples with non-empty ground truth; samples without
/// boundaries are skipped with a warning. `None` if every sample was skipped.
pub fn mean_ap(curves: &[Option<PrCurve>]) -> Option<f64> {
    let aps: Vec<f64> = curves
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            if c.is_none() {
                log::warn!("sample {i} has no ground-truth boundary pixels; AP undefined, skipped");
            }
            c.as_ref().map(|c| c.average_precision)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Exact squared Euclidean distance transform along one line (lower
/// envelope of parabolas). `f` holds 0 at sources and `INFINITY` elsewhere.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return d,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
    d
}

/// Squared Euclidean distance from every pixel to the nearest source pixel,
/// by two separable passes. `INFINITY` everywhere if there is no source.
pub fn squared_distance_transform(source: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut cols = vec![f64::INFINITY; width * height];
    for x in 0..width {
        let f: Vec<f64> = (0..height)
            .map(|y| if source[y * width + x] { 0.0 } else { f64::INFINITY })
            .collect();
        for (y, d) in edt_1d(&f).into_iter().enumerate() {
            cols[y * width + x] = d;
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let row = edt_1d(&cols[y * width..(y + 1) * width]);
        out[y * width..(y + 1) * width].copy_from_slice(&row);
    }
    out
}

/// Euclidean distance to the nearest positive pixel of `source`.
pub fn distance_transform(source: &ScalarMap) -> Vec<f64> {
    squared_distance_transform(&source.to_mask(), source.width(), source.height())
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratBin {
    pub lo: f64,
    pub hi: f64,
    pub pixels: usize,
    pub negatives: usize,
    pub false_positives: usize,
    pub correct: usize,
    /// `FP / (FP + TN)`; `None` without ground-truth negatives.
    pub fpr: Option<f64>,
    pub accuracy: f64,
}

impl StratBin {
    /// Pool bins with equal edges from several maps.
    pub fn pool<'a>(bins: impl IntoIterator<Item = &'a StratBin>) -> Option<StratBin> {
        let mut out: Option<StratBin> = None;
        for b in bins {
            let o = out.get_or_insert(StratBin {
                lo: b.lo,
                hi: b.hi,
                pixels: 0,
                negatives: 0,
                false_positives: 0,
                correct: 0,
                fpr: None,
                accuracy: 0.0,
            });
            o.pixels += b.pixels;
            o.negatives += b.negatives;
            o.false_positives += b.false_positives;
            o.correct += b.correct;
        }
        out.map(|mut o| {
            o.fpr = (o.negatives > 0).then(|| o.false_positives as f64 / o.negatives as f64);
            o.accuracy = o.correct as f64 / o.pixels as f64;
            o
        })
    }
}

/// FPR and accuracy of `pred >= 0.5` against `gt`, per distance bin
/// `[edges[k], edges[k+1])` of the distance to `strat_source`. Empty bins
/// are `None`.
pub fn stratified(
    pred: &ScalarMap,
    gt: &ScalarMap,
    strat_source: &ScalarMap,
    edges: &[f64],
) -> Result<Vec<Option<StratBin>>> {
    check_same(pred, gt)?;
    check_same(pred, strat_source)?;
    if edges.len() < 2 || edges.windows(2).any(|e| !(e[0] < e[1])) {
        return Err(Error::InvalidArgument("bin edges must be increasing, at least two".into()));
    }
    let dist = distance_transform(strat_source);
    let nb = edges.len() - 1;
    let mut counts = vec![[0usize; 4]; nb]; // tp, fp, tn, fn
    for i in 0..pred.len() {
        let d = dist[i];
        let Some(b) = (0..nb).find(|&b| d >= edges[b] && d < edges[b + 1]) else {
            continue;
        };
        let p = pred.values()[i] >= THRESHOLD;
        let g = gt.values()[i] >= THRESHOLD;
        let slot = match (p, g) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        counts[b][slot] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, &[tp, fp, tn, fn_])| {
            let n = tp + fp + tn + fn_;
            (n > 0).then(|| StratBin {
                lo: edges[b],
                hi: edges[b + 1],
                pixels: n,
                negatives: fp + tn,
                false_positives: fp,
                correct: tp + tn,
                fpr: (fp + tn > 0).then(|| fp as f64 / (fp + tn) as f64),
                accuracy: (tp + tn) as f64 / n as f64,
            })
        })
        .collect())
}

/// Render precision/recall curves (recall on x, precision on y) as an RGB
/// image, one colour per curve.
pub fn plot_pr(curves: &[&[(f64, f64)]], size: usize) -> FeatureMap {
    const COLORS: [[f64; 3]; 6] = [
        [0.85, 0.1, 0.1],
        [0.1, 0.4, 0.85],
        [0.1, 0.65, 0.2],
        [0.8, 0.5, 0.0],
        [0.55, 0.1, 0.7],
        [0.2, 0.2, 0.2],
    ];
    let size = size.max(16);
    let mut img = vec![1.0; 3 * size * size];
    let mut put = |x: i64, y: i64, c: [f64; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            for (ch, v) in c.iter().enumerate() {
                img[(ch * size + y as usize) * size + x as usize] = *v;
            }
        }
    };
    let margin = (size / 10) as i64;
    let span = size as i64 - 2 * margin;
    let to_px = |r: f64, p: f64| (margin + (r * span as f64).round() as i64, margin + ((1.0 - p) * span as f64).round() as i64);
    for t in 0..=span {
        put(margin + t, margin + span, [0.0; 3]);
        put(margin, margin + t, [0.0; 3]);
    }
    for (ci, curve) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        for seg in curve.windows(2) {
            let (x0, y0) = to_px(seg[0].0, seg[0].1);
            let (x1, y1) = to_px(seg[1].0, seg[1].1);
            let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=n {
                let x = x0 + (x1 - x0) * s / n;
                let y = y0 + (y1 - y0) * s / n;
                put(x, y, color);
            }
        }
        for &(r, p) in curve.iter() {
            let (x, y) = to_px(r, p);
            for d in -1..=1 {
                put(x + d, y, color);
                put(x, y + d, color);
            }
        }
    }
    FeatureMap::new(size, size, 3, img).expect("finite image")
}
