use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mbocc::ablation::{grid, run_sweep, score_network, AblationConfig, Scores};
use mbocc::eval::{default_tolerance, f1_occ, map_mb, mean_ap, plot_pr, stratified, PrCurve, StratBin};
use mbocc::network::{forward, train_with, NetInput, Params, RunConfig, TrainError};
use mbocc::raster::{read_features, write_map, write_png_rgb, Raster};
use mbocc::synthdata::{adjacency_stats, generate, occ_union, random_dataset, RandomSceneOptions, SceneSpec};
use mbocc::warping::{direct_warp, reverse_warp};
use mbocc::{Direction, RangeTag, ScalarMap};
use serde::{Deserialize, Serialize};

use crate::io::{
    list_samples, out_path, read_any_map, read_dataset, read_flow_file, read_prediction, read_sample, read_unit_map,
    sample_dir_name, write_prediction, write_sample,
};
use crate::manifest::Run;
use crate::{AblateArgs, CostblockArgs, EvalArgs, GenArgs, InferArgs, StatsArgs, TrainArgs, WarpArgs, WarpMode};

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg: RunConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.net.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn gen(a: GenArgs) -> Result<()> {
    let out = out_path(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let opts = RandomSceneOptions {
        max_shapes: a.max_shapes,
        max_translation: a.max_translation,
        noise_sigma: a.noise,
        keep_inside: a.keep_inside,
    };
    let config = serde_json::json!({
        "spec": a.spec,
        "random": a.random,
        "width": a.width,
        "height": a.height,
        "max_shapes": a.max_shapes,
        "max_translation": a.max_translation,
        "noise": a.noise,
        "keep_inside": a.keep_inside,
    });
    Run::in_dir(&out, "gen", config, Some(a.seed))?.execute(|run| {
        run.phase("generate");
        match (&a.spec, a.random) {
            (Some(spec_path), None) => {
                let text =
                    fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
                let spec: SceneSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
                let sample = generate(&spec, a.seed)?;
                run.phase("write");
                run.outputs(write_sample(&out, &sample)?);
                fs::write(out.join("scene.toml"), toml::to_string(&spec)?)?;
                run.output(out.join("scene.toml"));
            }
            (None, Some(n)) => {
                ensure!(n > 0, "--random needs at least one sample");
                let data = random_dataset(n, a.width, a.height, opts, a.seed);
                run.phase("write");
                for (i, s) in data.iter().enumerate() {
                    let dir = out.join(sample_dir_name(i));
                    write_sample(&dir, s)?;
                    run.output(dir);
                }
            }
            _ => bail!("pass exactly one of --spec or --random"),
        }
        log::info!("wrote samples to {}", out.display());
        Ok(())
    })
}

pub fn warp(a: WarpArgs) -> Result<()> {
    let out = out_path(&a.out);
    let coverage_out = a.coverage.as_deref().map(out_path);
    let config = serde_json::json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "map": a.map,
        "flow": a.flow,
        "coverage": coverage_out,
    });
    Run::beside_file(&out, "warp", config, None)?.execute(|run| {
        let map = read_any_map(&a.map)?;
        let flow = read_flow_file(&a.flow, Direction::Forward)?;
        run.phase("warp");
        match a.mode {
            WarpMode::Direct => {
                let w = direct_warp(&map, &flow)?;
                write_map(&out, w.map())?;
                run.output(out.clone());
                if let Some(c) = &coverage_out {
                    let counts: Vec<f64> = w.coverage().iter().map(|&n| n as f64).collect();
                    write_map(c, &ScalarMap::new(w.width(), w.height(), counts, RangeTag::NonNeg)?)?;
                    run.output(c.clone());
                }
                log::info!("{} undefined pixels", w.undefined_count());
            }
            WarpMode::Reverse => {
                ensure!(coverage_out.is_none(), "--coverage applies to direct warps only");
                write_map(&out, &reverse_warp(&map, &flow)?)?;
                run.output(out.clone());
            }
        }
        Ok(())
    })
}

pub fn costblock(a: CostblockArgs) -> Result<()> {
    let out = out_path(&a.out);
    let config = serde_json::json!({"fa": a.fa, "fb": a.fb, "flow": a.flow, "radius": a.radius});
    Run::beside_file(&out, "costblock", config, None)?.execute(|run| {
        let fa = read_features(&a.fa).with_context(|| format!("reading {}", a.fa.display()))?;
        let fb = read_features(&a.fb).with_context(|| format!("reading {}", a.fb.display()))?;
        let flow = read_flow_file(&a.flow, Direction::Forward)?;
        run.phase("cost_block");
        let b = mbocc::cost::cost_block(&fa, &fb, &flow, a.radius)?;
        write_map(&out, &b)?;
        run.output(out.clone());
        Ok(())
    })
}

/// Loss trace and periodic scores written by `train`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub evals: Vec<(usize, Scores)>,
    pub diverged: Option<String>,
}

const PARAMS_FILE: &str = "params.bin";
const CONFIG_FILE: &str = "config.toml";

fn write_params(path: &Path, p: &Params) -> Result<()> {
    let flat = p.flatten();
    let r = Raster {
        height: 1,
        width: flat.len(),
        channels: 1,
        data: flat.iter().map(|&v| v as f32).collect(),
    };
    r.write(path).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Params)> {
    let cfg = load_run_config(Some(&dir.join(CONFIG_FILE)))?;
    let path = dir.join(PARAMS_FILE);
    let r = Raster::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let flat: Vec<f64> = r.data.iter().map(|&v| v as f64).collect();
    let params = Params::from_flat(&cfg.net, &flat).context("checkpoint does not match its config")?;
    Ok((cfg, params))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let out = out_path(&a.out);
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let config = serde_json::json!({"run": json(&cfg), "data": a.data});
    Run::in_dir(&out, "train", config, Some(a.seed))?.execute(|run| {
        run.phase("load");
        let data = read_dataset(&a.data)?;
        fs::write(out.join(CONFIG_FILE), toml::to_string(&cfg)?)?;
        run.output(out.join(CONFIG_FILE));
        run.phase("train");
        let probe = &data[..data.len().min(8)];
        let mut evals = Vec::new();
        let result = train_with(&data, &cfg.net, &cfg.train, a.seed, |step, p| match score_network(probe, p, &cfg.net) {
            Ok(s) => {
                log::info!("step {step}: occ F1 {:.4}, MB mAP {:?}", s.occ_f1, s.mb_map);
                evals.push((step, s));
            }
            Err(e) => log::warn!("evaluation at step {step} failed: {e}"),
        });
        run.phase("write");
        let (params, log) = match result {
            Ok(o) => (o.params, TrainLog { loss: o.trace, evals, diverged: None }),
            Err(TrainError::Diverged { step, reason, last_good, trace }) => {
                write_params(&out.join(PARAMS_FILE), &last_good)?;
                write_json(&out.join("train_log.json"), &TrainLog {
                    loss: trace,
                    evals,
                    diverged: Some(format!("step {step}: {reason}")),
                })?;
                run.output(out.join(PARAMS_FILE));
                bail!("training diverged at step {step}: {reason}; last good parameters saved");
            }
            Err(TrainError::Invalid(e)) => return Err(e.into()),
        };
        write_params(&out.join(PARAMS_FILE), &params)?;
        write_json(&out.join("train_log.json"), &log)?;
        run.outputs([out.join(PARAMS_FILE), out.join("train_log.json")]);
        if let (Some(first), Some(last)) = (log.loss.first(), log.loss.last()) {
            log::info!("loss {first:.6} -> {last:.6} over {} steps", log.loss.len());
        }
        Ok(())
    })
}

pub fn infer(a: InferArgs) -> Result<()> {
    let out = out_path(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let config = serde_json::json!({"ckpt": a.ckpt, "pair": a.pair});
    Run::in_dir(&out, "infer", config, None)?.execute(|run| {
        let (cfg, params) = load_checkpoint(&a.ckpt)?;
        run.phase("infer");
        for (name, dir) in list_samples(&a.pair)? {
            let s = read_sample(&dir)?;
            let p = forward(&NetInput::from_sample(&s), &params, &cfg.net)?;
            run.outputs(write_prediction(&out.join(&name), &p)?);
        }
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleReport {
    pub name: String,
    pub occ_f1: [f64; 2],
    pub average_precision: [Option<f64>; 2],
    pub pr: [Option<PrCurve>; 2],
    pub stratified_occ: [Vec<Option<StratBin>>; 2],
    pub stratified_mb: [Vec<Option<StratBin>>; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub tolerance: f64,
    pub bins: Vec<f64>,
    /// Mean over samples and both frames.
    pub occ_f1: f64,
    /// Mean AP over maps with boundary pixels.
    pub mb_map: Option<f64>,
    /// Sweep thresholds with precision and recall averaged over maps that
    /// have boundary pixels.
    pub mean_pr: Vec<(f64, f64, f64)>,
    /// Bins pooled over all samples and frames.
    pub stratified_occ: Vec<Option<StratBin>>,
    pub stratified_mb: Vec<Option<StratBin>>,
    pub per_sample: Vec<SampleReport>,
}

fn pooled(per: &[&[Option<StratBin>]], nbins: usize) -> Vec<Option<StratBin>> {
    (0..nbins)
        .map(|b| StratBin::pool(per.iter().filter_map(|bins| bins[b].as_ref())))
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let report_path = out_path(&a.report);
    let plots = a.plots.as_deref().map(out_path);
    let config = serde_json::json!({
        "pred": a.pred, "gt": a.gt, "plots": plots, "tol": a.tol, "thresholds": a.thresholds, "bins": a.bins,
    });
    Run::beside_file(&report_path, "eval", config, None)?.execute(|run| {
        run.phase("score");
        let mut per_sample = Vec::new();
        let mut tolerance = None;
        for (name, dir) in list_samples(&a.gt)? {
            let s = read_sample(&dir)?;
            let pred = read_prediction(&a.pred.join(&name))?;
            let tol = a.tol.unwrap_or_else(|| default_tolerance(s.width(), s.height()));
            tolerance.get_or_insert(tol);
            let gts = [(&s.occ1, &s.mb1), (&s.occ2, &s.mb2)];
            let mut r = SampleReport {
                name,
                occ_f1: [0.0; 2],
                average_precision: [None, None],
                pr: [None, None],
                stratified_occ: [vec![], vec![]],
                stratified_mb: [vec![], vec![]],
            };
            for k in 0..2 {
                let ((po, pm), (go, gm)) = (&pred[k], gts[k]);
                r.occ_f1[k] = f1_occ(po, go)?;
                let curve = map_mb(pm, gm, tol, a.thresholds)?;
                r.average_precision[k] = curve.as_ref().map(|c| c.average_precision);
                r.pr[k] = curve;
                r.stratified_occ[k] = stratified(po, go, go, &a.bins)?;
                r.stratified_mb[k] = stratified(pm, gm, gm, &a.bins)?;
            }
            per_sample.push(r);
        }
        let n = per_sample.len();
        let curves: Vec<Option<PrCurve>> = per_sample.iter().flat_map(|r| r.pr.clone()).collect();
        let defined: Vec<&PrCurve> = curves.iter().flatten().collect();
        let mean_pr = if defined.is_empty() {
            Vec::new()
        } else {
            let m = defined.len() as f64;
            (0..defined[0].thresholds.len())
                .map(|t| {
                    let p = defined.iter().map(|c| c.precision[t]).sum::<f64>() / m;
                    let r = defined.iter().map(|c| c.recall[t]).sum::<f64>() / m;
                    (defined[0].thresholds[t], p, r)
                })
                .collect()
        };
        let nbins = a.bins.len() - 1;
        let occ_bins: Vec<&[Option<StratBin>]> = per_sample.iter().flat_map(|r| r.stratified_occ.iter().map(|v| v.as_slice())).collect();
        let mb_bins: Vec<&[Option<StratBin>]> = per_sample.iter().flat_map(|r| r.stratified_mb.iter().map(|v| v.as_slice())).collect();
        let report = EvalReport {
            samples: n,
            tolerance: tolerance.unwrap_or(0.0),
            bins: a.bins.clone(),
            occ_f1: per_sample.iter().map(|r| r.occ_f1[0] + r.occ_f1[1]).sum::<f64>() / (2 * n) as f64,
            mb_map: mean_ap(&curves),
            mean_pr,
            stratified_occ: pooled(&occ_bins, nbins),
            stratified_mb: pooled(&mb_bins, nbins),
            per_sample,
        };
        run.phase("write");
        write_json(&report_path, &report)?;
        run.output(report_path.clone());
        if let Some(dir) = &plots {
            fs::create_dir_all(dir)?;
            let mean: Vec<(f64, f64)> = report.mean_pr.iter().map(|&(_, p, r)| (r, p)).collect();
            let path = dir.join("pr_mean.png");
            write_png_rgb(&path, &plot_pr(&[&mean], 256))?;
            run.output(path);
            for r in &report.per_sample {
                let pts: Vec<Vec<(f64, f64)>> = r
                    .pr
                    .iter()
                    .flatten()
                    .map(|c| c.recall.iter().copied().zip(c.precision.iter().copied()).collect())
                    .collect();
                let refs: Vec<&[(f64, f64)]> = pts.iter().map(|v| v.as_slice()).collect();
                let name = if r.name.is_empty() { "sample" } else { &r.name };
                let path = dir.join(format!("pr_{name}.png"));
                write_png_rgb(&path, &plot_pr(&refs, 256))?;
                run.output(path);
            }
        }
        println!("samples {n}  occ F1 {:.4}  MB mAP {}", report.occ_f1, report.mb_map.map_or("n/a".into(), |v| format!("{v:.4}")));
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsRow {
    pub radius: usize,
    pub fraction: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub maps: usize,
    pub boundary_pixels: usize,
    pub occluded_pixels: usize,
    pub rows: Vec<StatsRow>,
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let pairs: Vec<(ScalarMap, ScalarMap)> = match (&a.mb, &a.occ, &a.data) {
        (Some(mb), Some(occ), None) => vec![(read_unit_map(mb)?, read_unit_map(occ)?)],
        (None, None, Some(data)) => {
            let mut v = Vec::new();
            for s in read_dataset(data)? {
                v.push((s.mb1.clone(), occ_union(&s.occ1, &s.occ2, &s.flow21)?));
                v.push((s.mb2.clone(), occ_union(&s.occ2, &s.occ1, &s.flow12)?));
            }
            v
        }
        _ => bail!("pass --mb and --occ, or --data"),
    };
    // Pool by boundary-pixel counts so every boundary pixel weighs the same.
    let mut hits = vec![0.0; a.radii.len()];
    let mut boundary = 0usize;
    let mut occluded = 0usize;
    for (mb, occ) in &pairs {
        let n = mb.count_positive();
        boundary += n;
        occluded += occ.count_positive();
        for (h, f) in hits.iter_mut().zip(adjacency_stats(mb, occ, &a.radii)?) {
            *h += f.unwrap_or(0.0) * n as f64;
        }
    }
    let report = StatsReport {
        maps: pairs.len(),
        boundary_pixels: boundary,
        occluded_pixels: occluded,
        rows: a
            .radii
            .iter()
            .zip(&hits)
            .map(|(&radius, &h)| StatsRow {
                radius,
                fraction: (boundary > 0).then(|| h / boundary as f64),
            })
            .collect(),
    };
    println!("maps {}  boundary pixels {}  occluded pixels {}", report.maps, boundary, occluded);
    println!("radius  fraction of boundary pixels near an occlusion boundary");
    for r in &report.rows {
        println!("{:>6}  {}", r.radius, r.fraction.map_or("n/a".into(), |f| format!("{f:.4}")));
    }
    if let Some(p) = &a.json {
        let p = out_path(p);
        let config = serde_json::json!({"mb": a.mb, "occ": a.occ, "data": a.data, "radii": a.radii});
        Run::beside_file(&p, "stats", config, None)?.execute(|run| {
            write_json(&p, &report)?;
            run.output(p.clone());
            Ok(())
        })?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let out = out_path(&a.out);
    let cfg = load_run_config(a.config.as_deref())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let sweep = AblationConfig {
        base: cfg.net.clone(),
        train: cfg.train.clone(),
        seeds: a.seeds.clone(),
        parallel_runs: a.parallel,
    };
    let config = serde_json::json!({
        "sweep": json(&sweep), "data": a.data, "eval_count": a.eval_count, "only": a.only,
    });
    Run::in_dir(&out, "ablate", config, None)?.execute(|run| {
        run.phase("load");
        let data = read_dataset(&a.data)?;
        ensure!(
            a.eval_count > 0 && a.eval_count < data.len(),
            "--eval-count must leave training samples ({} available)",
            data.len()
        );
        let (train_set, eval_set) = data.split_at(data.len() - a.eval_count);
        let mut variants = grid(&cfg.net);
        if !a.only.is_empty() {
            variants.retain(|v| v.label.split('=').any(|t| a.only.iter().any(|o| o == t)));
            ensure!(!variants.is_empty(), "no variant matches --only {:?}", a.only);
        }
        log::info!("{} variants x {} seeds", variants.len(), a.seeds.len());
        run.phase("sweep");
        let table = run_sweep(&variants, &sweep, train_set, eval_set)?;
        run.phase("write");
        let md = out.join("ablation.md");
        let js = out.join("ablation.json");
        fs::write(&md, table.to_markdown())?;
        write_json(&js, &table)?;
        run.outputs([md, js]);
        print!("{}", table.to_markdown());
        Ok(())
    })
}
