//! Component, decoder-order and task-coupling sweep.
//!
//! The grid crosses five component sets (`-DAB`, `-AB`, `-B`, `-A`, `full`)
//! with both decoder orders and with joint or single-task decoding. Without
//! joint decoding the attention module is never built, so single-task
//! variants differing only in `A` are the same network; they are trained once
//! and reported under every label they cover.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_tolerance, f1_occ, map_mb, mean_ap, DEFAULT_THRESHOLDS};
use crate::grids::ScalarMap;
use crate::network::{forward, train, DecoderOrder, NetConfig, NetInput, Params, TrainConfig, TrainError};
use crate::synthdata::{mb_from_flow_gradient, occ_from_flow, SamplePair, DEFAULT_TAU};

/// `(direct warp, attention, cost block)` in table order.
pub const COMPONENT_SETS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// Component tag such as `-AB`, or several joined by `=` for merged
    /// single-task variants.
    pub label: String,
    pub order: DecoderOrder,
    pub joint: bool,
    pub net: NetConfig,
}

/// Every distinct network in the grid, built on `base`.
pub fn grid(base: &NetConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    for joint in [true, false] {
        for order in [DecoderOrder::F2c, DecoderOrder::C2f] {
            for &(d, a, b) in &COMPONENT_SETS {
                let net = NetConfig {
                    use_direct_warp: d,
                    use_attention: a,
                    use_cost_block: b,
                    order,
                    joint_tasks: joint,
                    ..base.clone()
                };
                let label = net.flag_label();
                let effective = |n: &NetConfig| NetConfig {
                    use_attention: n.attention_active(),
                    ..n.clone()
                };
                match out.iter_mut().find(|v| effective(&v.net) == effective(&net)) {
                    Some(v) => v.label = format!("{}={label}", v.label),
                    None => out.push(Variant { label, order, joint, net }),
                }
            }
        }
    }
    out
}

/// Mean scores over a set of samples, both temporal directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub occ_f1: f64,
    /// `None` when no sample has boundary pixels.
    pub mb_map: Option<f64>,
}

/// Score per-direction `(occ, mb)` predictions for each sample.
pub fn score_maps(data: &[SamplePair], preds: &[[(ScalarMap, ScalarMap); 2]]) -> Result<Scores> {
    if data.is_empty() || data.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples vs {} predictions",
            data.len(),
            preds.len()
        )));
    }
    let per = crate::par::map_range(data.len(), |i| -> Result<_> {
        let s = &data[i];
        let tol = default_tolerance(s.width(), s.height());
        let gts = [(&s.occ1, &s.mb1), (&s.occ2, &s.mb2)];
        let mut f1 = 0.0;
        let mut curves = Vec::with_capacity(2);
        for ((occ, mb), (go, gm)) in preds[i].iter().zip(gts) {
            f1 += f1_occ(occ, go)? / 2.0;
            curves.push(map_mb(mb, gm, tol, DEFAULT_THRESHOLDS)?);
        }
        Ok((f1, curves))
    });
    let mut f1 = 0.0;
    let mut curves = Vec::with_capacity(2 * data.len());
    for p in per {
        let (f, c) = p?;
        f1 += f;
        curves.extend(c);
    }
    Ok(Scores {
        occ_f1: f1 / data.len() as f64,
        mb_map: mean_ap(&curves),
    })
}

/// Scores of a trained network on `data`.
pub fn score_network(data: &[SamplePair], params: &Params, cfg: &NetConfig) -> Result<Scores> {
    let preds = data
        .iter()
        .map(|s| {
            let p = forward(&NetInput::from_sample(s), params, cfg)?;
            let [o1, o2] = p.occ;
            let [m1, m2] = p.mb;
            Ok([(o1.fused, m1.fused), (o2.fused, m2.fused)])
        })
        .collect::<Result<Vec<_>>>()?;
    score_maps(data, &preds)
}

/// Scores of the flow-only reference: forward-backward occlusion check and
/// normalised flow-gradient magnitude as the boundary score.
pub fn score_flow_baseline(data: &[SamplePair]) -> Result<Scores> {
    let preds = data
        .iter()
        .map(|s| {
            Ok([
                (occ_from_flow(&s.flow12, &s.flow21, DEFAULT_TAU)?, mb_from_flow_gradient(&s.flow12, 1.0)?),
                (occ_from_flow(&s.flow21, &s.flow12, DEFAULT_TAU)?, mb_from_flow_gradient(&s.flow21, 1.0)?),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    score_maps(data, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// `None` if training diverged.
    pub scores: Option<Scores>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub diverged: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
    /// Means over non-diverged runs.
    pub mean: Option<Scores>,
}

/// A directional expectation between two table entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub description: String,
    pub metric: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub baseline: Scores,
    pub rows: Vec<Row>,
    pub expectations: Vec<Expectation>,
}

/// Sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: NetConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Train independent runs concurrently.
    pub parallel_runs: bool,
}

/// Train and score one variant with one seed. Divergence is recorded, not
/// propagated.
pub fn run_one(variant: &Variant, tcfg: &TrainConfig, seed: u64, train_set: &[SamplePair], eval_set: &[SamplePair]) -> Result<RunResult> {
    let start = Instant::now();
    let mut result = RunResult {
        seed,
        scores: None,
        initial_loss: None,
        final_loss: None,
        diverged: None,
        seconds: 0.0,
    };
    match train(train_set, &variant.net, tcfg, seed) {
        Ok(out) => {
            result.initial_loss = out.trace.first().copied();
            result.final_loss = out.trace.last().copied();
            result.scores = Some(score_network(eval_set, &out.params, &variant.net)?);
        }
        Err(TrainError::Diverged { step, reason, trace, .. }) => {
            result.initial_loss = trace.first().copied();
            result.final_loss = trace.last().copied();
            result.diverged = Some(format!("step {step}: {reason}"));
            log::warn!("{} {} seed {seed} diverged at step {step}: {reason}", variant.label, variant.order.label());
        }
        Err(TrainError::Invalid(e)) => return Err(e),
    }
    result.seconds = start.elapsed().as_secs_f64();
    log::info!(
        "{} {} {} seed {seed}: {:?} in {:.1}s",
        variant.label,
        variant.order.label(),
        if variant.joint { "joint" } else { "single" },
        result.scores,
        result.seconds
    );
    Ok(result)
}

fn mean_scores(runs: &[RunResult]) -> Option<Scores> {
    let ok: Vec<&Scores> = runs.iter().filter_map(|r| r.scores.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    let maps: Vec<f64> = ok.iter().filter_map(|s| s.mb_map).collect();
    Some(Scores {
        occ_f1: ok.iter().map(|s| s.occ_f1).sum::<f64>() / n,
        mb_map: (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64),
    })
}

/// Run `variants` over every seed.
pub fn run_sweep(
    variants: &[Variant],
    cfg: &AblationConfig,
    train_set: &[SamplePair],
    eval_set: &[SamplePair],
) -> Result<AblationTable> {
    cfg.base.validate()?;
    cfg.train.validate()?;
    if cfg.seeds.is_empty() || train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::InvalidArgument("need seeds, training and evaluation samples".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, seed): &(usize, u64)| run_one(&variants[v], &cfg.train, seed, train_set, eval_set);
    let results: Vec<Result<RunResult>> = if cfg.parallel_runs {
        crate::par::map_slice(&jobs, run)
    } else {
        jobs.iter().map(run).collect()
    };
    let mut rows: Vec<Row> = variants
        .iter()
        .map(|v| Row {
            variant: v.clone(),
            runs: Vec::new(),
            mean: None,
        })
        .collect();
    for (&(v, _), r) in jobs.iter().zip(results) {
        rows[v].runs.push(r?);
    }
    for row in &mut rows {
        row.mean = mean_scores(&row.runs);
    }
    let expectations = expectations(&rows);
    for e in &expectations {
        if e.holds {
            log::info!("expectation held: {} ({}: {:.4} >= {:.4})", e.description, e.metric, e.lhs, e.rhs);
        } else {
            log::warn!("expectation not met: {} ({}: {:.4} < {:.4})", e.description, e.metric, e.lhs, e.rhs);
        }
    }
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        train_samples: train_set.len(),
        eval_samples: eval_set.len(),
        baseline: score_flow_baseline(eval_set)?,
        rows,
        expectations,
    })
}

/// Full grid over `cfg.base`.
pub fn run_ablation(cfg: &AblationConfig, train_set: &[SamplePair], eval_set: &[SamplePair]) -> Result<AblationTable> {
    run_sweep(&grid(&cfg.base), cfg, train_set, eval_set)
}

fn has_tag(v: &Variant, tag: &str) -> bool {
    v.label.split('=').any(|t| t == tag)
}

/// Seed-averaged comparisons: full over `-DAB`, joint over single-task and
/// F2C over C2F, each on both metrics and averaged over the other factors.
pub fn expectations(rows: &[Row]) -> Vec<Expectation> {
    type Pick<'a> = &'a dyn Fn(&Variant) -> bool;
    let avg = |pick: Pick, metric: fn(&Scores) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| pick(&r.variant))
            .filter_map(|r| r.mean.as_ref().and_then(metric))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let full: Pick = &|v| v.joint && has_tag(v, "full");
    let bare: Pick = &|v| v.joint && has_tag(v, "-DAB");
    let joint: Pick = &|v| v.joint;
    let single: Pick = &|v| !v.joint;
    let f2c: Pick = &|v| v.order == DecoderOrder::F2c;
    let c2f: Pick = &|v| v.order == DecoderOrder::C2f;
    let comparisons: [(&str, Pick, Pick); 3] = [
        ("full >= -DAB (joint, both orders)", full, bare),
        ("joint >= single-task", joint, single),
        ("F2C >= C2F", f2c, c2f),
    ];
    let metrics: [(&str, fn(&Scores) -> Option<f64>); 2] = [("occ_f1", |s| Some(s.occ_f1)), ("mb_map", |s| s.mb_map)];
    let mut out = Vec::new();
    for (description, lhs, rhs) in comparisons {
        for (metric, get) in metrics {
            if let (Some(l), Some(r)) = (avg(lhs, get), avg(rhs, get)) {
                out.push(Expectation {
                    description: description.to_string(),
                    metric: metric.to_string(),
                    lhs: l,
                    rhs: r,
                    holds: l >= r,
                });
            }
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl AblationTable {
    /// Markdown rendering: one row per variant with seed means and the
    /// per-seed values, then the expectation checks.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "Seeds {:?}; {} training / {} evaluation samples. Scores in percent.\n\n",
            self.seeds, self.train_samples, self.eval_samples
        ));
        s.push_str("| tasks | order | components | Occ F1 | MB mAP | per seed (F1 / mAP) | diverged |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        s.push_str(&format!(
            "| flow only | - | gradient + fwd-bwd check | {} | {} | - | - |\n",
            fmt_opt(Some(self.baseline.occ_f1)),
            fmt_opt(self.baseline.mb_map)
        ));
        for row in &self.rows {
            let per: Vec<String> = row
                .runs
                .iter()
                .map(|r| match &r.scores {
                    Some(sc) => format!("{} / {}", fmt_opt(Some(sc.occ_f1)), fmt_opt(sc.mb_map)),
                    None => "diverged".to_string(),
                })
                .collect();
            let diverged = row.runs.iter().filter(|r| r.diverged.is_some()).count();
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                if row.variant.joint { "joint" } else { "single" },
                row.variant.order.label(),
                row.variant.label,
                fmt_opt(row.mean.map(|m| m.occ_f1)),
                fmt_opt(row.mean.and_then(|m| m.mb_map)),
                per.join(", "),
                diverged
            ));
        }
        if !self.expectations.is_empty() {
            s.push_str("\n| expectation | metric | lhs | rhs | holds |\n|---|---|---|---|---|\n");
            for e in &self.expectations {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    e.description,
                    e.metric,
                    fmt_opt(Some(e.lhs)),
                    fmt_opt(Some(e.rhs)),
                    if e.holds { "yes" } else { "no" }
                ));
            }
        }
        s
    }
}
