use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetConfig;
use super::model::{record, NetInput, Probes, Targets};
use super::params::{LayerClass, ParamKey, Params};
use crate::error::Result;
use crate::synthdata::SamplePair;

/// Finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckedEntry {
    pub key: ParamKey,
    pub bias: bool,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_class: BTreeMap<LayerClass, f64>,
    pub checked: usize,
    /// Entries where every step size crossed a kink (activation sign,
    /// max/min winner or clamp change).
    pub skipped: usize,
    pub worst: Option<CheckedEntry>,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval(input: &NetInput, targets: &Targets, params: &Params, cfg: &NetConfig) -> Result<(f64, u64)> {
    let r = record(input, params, cfg, Some(targets), &Probes::default())?;
    Ok((r.loss_value().expect("targets given"), r.graph.branch_signature()))
}

/// Compare reverse-mode gradients with central differences on up to
/// `per_class` random scalars of every layer class.
///
/// The numeric derivative is the Richardson combination
/// `(4 D(h/2) - D(h)) / 3` of central differences `D`, which cancels their
/// `h^2` error term.
///
/// Starting from `step`, the step is divided by ten while the perturbed
/// passes take different branches from the base pass; entries that never
/// settle are skipped and counted.
pub fn grad_check(
    params: &Params,
    sample_pair: &SamplePair,
    cfg: &NetConfig,
    per_class: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let input = NetInput::from_sample(sample_pair);
    let targets = Targets::from_sample(sample_pair);
    let base = record(&input, params, cfg, Some(&targets), &Probes::default())?;
    let sig0 = base.graph.branch_signature();
    let grads = base.grads(params)?;
    drop(base);

    let mut by_class: BTreeMap<LayerClass, Vec<(usize, bool, usize)>> = BTreeMap::new();
    for (li, layer) in params.layers().iter().enumerate() {
        let e = by_class.entry(layer.class).or_default();
        e.extend((0..layer.weight.len()).map(|j| (li, false, j)));
        e.extend((0..layer.bias.len()).map(|j| (li, true, j)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_class: BTreeMap::new(),
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut p = params.clone();
    for (class, entries) in by_class {
        let picks = sample(&mut rng, entries.len(), per_class.min(entries.len()));
        let mut class_max: f64 = 0.0;
        for pick in picks {
            let (li, is_bias, j) = entries[pick];
            let analytic = if is_bias { grads.bias[li][j] } else { grads.weight[li][j] };
            let original = if is_bias { p.layers()[li].bias[j] } else { p.layers()[li].weight[j] };
            let set = |p: &mut Params, v: f64| {
                let l = &mut p.layers_mut()[li];
                if is_bias {
                    l.bias[j] = v;
                } else {
                    l.weight[j] = v;
                }
            };
            let central = |p: &mut Params, h: f64| -> Result<Option<f64>> {
                set(p, original + h);
                let (lp, sp) = eval(&input, &targets, p, cfg)?;
                set(p, original - h);
                let (lm, sm) = eval(&input, &targets, p, cfg)?;
                set(p, original);
                Ok((sp == sig0 && sm == sig0).then(|| (lp - lm) / (2.0 * h)))
            };
            let mut h = step;
            let mut found = None;
            while h >= 1e-8 {
                if let (Some(d1), Some(d2)) = (central(&mut p, h)?, central(&mut p, h / 2.0)?) {
                    found = Some(((4.0 * d2 - d1) / 3.0, h));
                    break;
                }
                h /= 10.0;
            }
            let Some((numeric, used)) = found else {
                report.skipped += 1;
                continue;
            };
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            class_max = class_max.max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CheckedEntry {
                    key: p.layers()[li].key,
                    bias: is_bias,
                    index: j,
                    analytic,
                    numeric,
                    step: used,
                    rel_error: rel,
                });
            }
        }
        report.per_class.insert(class, class_max);
    }
    Ok(report)
}
