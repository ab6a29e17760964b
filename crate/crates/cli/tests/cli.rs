use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mbocc::raster::{read_flow, read_map};
use mbocc::synthdata::{adjacency_stats, generate, occ_union, translating_square_with};
use mbocc::warping::direct_warp;
use mbocc::{Direction, RangeTag};

fn mbocc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbocc"))
        .args(args)
        .env_remove("MBOCC_OUT_ROOT")
        .env("MBOCC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mbocc(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn square_scene(dir: &Path) -> PathBuf {
    let spec = translating_square_with(16, 16, 4, 5, 5, [3, 0]);
    let path = dir.join("scene.toml");
    fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
    path
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&["--help"]);
    for cmd in ["gen", "warp", "costblock", "train", "infer", "eval", "stats", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
        assert!(mbocc(&[cmd, "--help"]).status.success());
    }
}

#[test]
fn gen_warp_costblock_stats_on_a_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = square_scene(tmp.path());
    let sample = tmp.path().join("sample");
    ok(&["gen", "--spec", s(&scene), "--seed", "3", "--out", s(&sample)]);
    for f in ["frame1.bin", "frame1.png", "flow12.bin", "occ1.bin", "occ1.png", "mb2.bin", "scene.toml"] {
        assert!(sample.join(f).is_file(), "{f}");
    }
    let m = manifest(&sample.join("manifest.json"));
    assert_eq!(m["status"], "complete");
    assert_eq!(m["seed"], 3);
    assert!(m["git_describe"].as_str().is_some_and(|g| !g.is_empty()));

    let expected = generate(&translating_square_with(16, 16, 4, 5, 5, [3, 0]), 3).unwrap();
    let warped = tmp.path().join("d.bin");
    let cov = tmp.path().join("cov.bin");
    ok(&[
        "warp",
        "--mode",
        "direct",
        "--map",
        s(&sample.join("occ1.bin")),
        "--flow",
        s(&sample.join("flow12.bin")),
        "--out",
        s(&warped),
        "--coverage",
        s(&cov),
    ]);
    let lib = direct_warp(&expected.occ1, &expected.flow12).unwrap();
    assert_eq!(&read_map(&warped, RangeTag::Unit).unwrap(), lib.map());
    let counts: Vec<u32> = read_map(&cov, RangeTag::NonNeg).unwrap().values().iter().map(|&c| c as u32).collect();
    assert_eq!(counts, lib.coverage());
    assert_eq!(manifest(&tmp.path().join("d.bin.manifest.json"))["status"], "complete");

    let block = tmp.path().join("b.bin");
    ok(&[
        "costblock",
        "--fa",
        s(&sample.join("frame1.bin")),
        "--fb",
        s(&sample.join("frame2.bin")),
        "--flow",
        s(&sample.join("flow12.bin")),
        "--radius",
        "1",
        "--out",
        s(&block),
    ]);
    let b = read_map(&block, RangeTag::NonNeg).unwrap();
    assert_eq!((b.width(), b.height()), (16, 16));
    // Exact flow on a noise-free scene: visible pixels match perfectly.
    let f12 = read_flow(sample.join("flow12.bin"), Direction::Forward).unwrap();
    assert_eq!(f12, expected.flow12);
    assert!(b.values().iter().zip(expected.occ1.values()).all(|(&c, &o)| o > 0.5 || c < 1e-6));

    let json = tmp.path().join("stats.json");
    let text = ok(&["stats", "--data", s(&sample), "--radii", "0,1", "--json", s(&json)]);
    assert!(text.contains("radius"));
    let report = manifest(&json);
    let union = occ_union(&expected.occ1, &expected.occ2, &expected.flow21).unwrap();
    let r1 = adjacency_stats(&expected.mb1, &union, &[1]).unwrap()[0].unwrap();
    assert_eq!(r1, 1.0);
    assert_eq!(report["rows"][1]["fraction"].as_f64(), Some(1.0));
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--random", "3", "--width", "16", "--height", "16", "--seed", "1", "--out", s(&data)]);
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[net]\nnum_scales = 2\nenc_channels = 2\ndec_channels = 2\n\n[train]\nsteps = 4\nbatch_size = 2\neval_every = 2\n",
    )
    .unwrap();
    let ckpt = tmp.path().join("ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--seed", "5", "--out", s(&ckpt)]);
    for f in ["params.bin", "config.toml", "train_log.json", "manifest.json"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    let log = manifest(&ckpt.join("train_log.json"));
    assert_eq!(log["loss"].as_array().unwrap().len(), 4);
    assert_eq!(log["evals"].as_array().unwrap().len(), 2);

    let pred = tmp.path().join("pred");
    ok(&["infer", "--ckpt", s(&ckpt), "--pair", s(&data), "--out", s(&pred)]);
    for k in ["occ1", "occ2", "mb1", "mb2", "att1", "att2"] {
        let m = read_map(pred.join("sample_00000").join(format!("{k}.bin")), RangeTag::Unit).unwrap();
        assert!(m.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    let report = tmp.path().join("report.json");
    let plots = tmp.path().join("plots");
    ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data),
        "--report",
        s(&report),
        "--plots",
        s(&plots),
    ]);
    let r = manifest(&report);
    assert_eq!(r["samples"], 3);
    let f1 = r["occ_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(r["per_sample"].as_array().unwrap().len(), 3);
    assert_eq!(r["mean_pr"].as_array().unwrap().len(), mbocc::eval::DEFAULT_THRESHOLDS);
    assert!(r["stratified_occ"].is_array());
    assert!(plots.join("pr_mean.png").is_file());
    assert!(plots.join("pr_sample_00000.png").is_file());

    // Ground truth scored against itself is perfect.
    let gt_as_pred = tmp.path().join("gt_report.json");
    ok(&["eval", "--pred", s(&data), "--gt", s(&data), "--report", s(&gt_as_pred)]);
    let r = manifest(&gt_as_pred);
    assert_eq!(r["occ_f1"].as_f64(), Some(1.0));
}

#[test]
fn ablate_rows_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--random", "4", "--width", "16", "--height", "16", "--seed", "2", "--out", s(&data)]);
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[net]\nnum_scales = 2\nenc_channels = 2\ndec_channels = 2\n\n[train]\nsteps = 2\nbatch_size = 1\n",
    )
    .unwrap();
    let rows = |out: &Path| {
        ok(&[
            "ablate", "--config", s(&cfg), "--data", s(&data), "--seeds", "7", "--eval-count", "1", "--only", "full",
            "--out", s(out),
        ]);
        let t = manifest(&out.join("ablation.json"));
        assert!(out.join("ablation.md").is_file());
        let mut rows = t["rows"].as_array().unwrap().clone();
        for r in &mut rows {
            for run in r["runs"].as_array_mut().unwrap() {
                run["seconds"] = serde_json::Value::Null;
            }
        }
        rows
    };
    let a = rows(&tmp.path().join("a"));
    let b = rows(&tmp.path().join("b"));
    // `full` joint for both orders, and the merged single-task `-A=full`.
    assert_eq!(a.len(), 4);
    for r in &a {
        let run = &r["runs"][0];
        assert_eq!(run["seed"], 7);
        assert!(run["scores"]["occ_f1"].is_number());
        assert!(run["scores"].get("mb_map").is_some());
    }
    assert_eq!(a, b);
}

#[test]
fn failures_exit_nonzero_and_are_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    assert!(!mbocc(&["gen", "--out", s(&out)]).status.success());
    assert!(manifest(&out.join("manifest.json"))["status"].as_str().unwrap().starts_with("failed"));

    let o = tmp.path().join("w.bin");
    let missing = tmp.path().join("missing.bin");
    let r = mbocc(&["warp", "--mode", "reverse", "--map", s(&missing), "--flow", s(&missing), "--out", s(&o)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.bin"));
    assert!(manifest(&tmp.path().join("w.bin.manifest.json"))["status"].as_str().unwrap().starts_with("failed"));
    assert!(!o.exists());

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[net]\nnum_scales = 1\n").unwrap();
    let r = mbocc(&["train", "--config", s(&bad), "--data", s(tmp.path()), "--out", s(&tmp.path().join("c"))]);
    assert!(!r.status.success());
}

#[test]
fn relative_outputs_follow_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = square_scene(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_mbocc"))
        .args(["gen", "--spec", s(&scene), "--out", "rooted"])
        .env("MBOCC_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("rooted").join("occ1.bin").is_file());
}
