//! On-disk layout of samples, datasets and prediction sets.
//!
//! A sample directory holds `frame1.bin`, `frame2.bin` (3 channels),
//! `flow12.bin`, `flow21.bin` (2 channels) and the binary label maps
//! `occ1.bin`, `occ2.bin`, `mb1.bin`, `mb2.bin`, each with a PNG preview.
//! A dataset directory holds sample directories, visited in name order.
//! A prediction directory mirrors this with `occ{1,2}`, `mb{1,2}` and
//! optionally `att{1,2}`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mbocc::network::Prediction;
use mbocc::raster::{read_features, read_flow, read_map, write_features, write_flow, write_map, write_png_gray, write_png_rgb};
use mbocc::synthdata::SamplePair;
use mbocc::{Direction, FlowField, RangeTag, ScalarMap};

/// Resolve an output path against `MBOCC_OUT_ROOT` when it is relative.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("MBOCC_OUT_ROOT") {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn write_map_with_preview(dir: &Path, name: &str, m: &ScalarMap) -> Result<Vec<PathBuf>> {
    let bin = dir.join(format!("{name}.bin"));
    let png = dir.join(format!("{name}.png"));
    write_map(&bin, m).with_context(|| format!("writing {}", bin.display()))?;
    write_png_gray(&png, m).with_context(|| format!("writing {}", png.display()))?;
    Ok(vec![bin, png])
}

pub fn read_unit_map(path: &Path) -> Result<ScalarMap> {
    read_map(path, RangeTag::Unit).with_context(|| format!("reading {}", path.display()))
}

pub fn read_any_map(path: &Path) -> Result<ScalarMap> {
    read_map(path, RangeTag::Free).with_context(|| format!("reading {}", path.display()))
}

/// Flow rasters carry no direction; the caller supplies it.
pub fn read_flow_file(path: &Path, direction: Direction) -> Result<FlowField> {
    read_flow(path, direction).with_context(|| format!("reading {}", path.display()))
}

pub fn write_sample(dir: &Path, s: &SamplePair) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, f) in [("frame1", &s.frame1), ("frame2", &s.frame2)] {
        let bin = dir.join(format!("{name}.bin"));
        let png = dir.join(format!("{name}.png"));
        write_features(&bin, f)?;
        write_png_rgb(&png, f)?;
        written.extend([bin, png]);
    }
    for (name, f) in [("flow12", &s.flow12), ("flow21", &s.flow21)] {
        let bin = dir.join(format!("{name}.bin"));
        write_flow(&bin, f)?;
        written.push(bin);
    }
    for (name, m) in [("occ1", &s.occ1), ("occ2", &s.occ2), ("mb1", &s.mb1), ("mb2", &s.mb2)] {
        written.extend(write_map_with_preview(dir, name, m)?);
    }
    Ok(written)
}

pub fn read_sample(dir: &Path) -> Result<SamplePair> {
    let f = |n: &str| dir.join(format!("{n}.bin"));
    let frame = |n: &str| read_features(f(n)).with_context(|| format!("reading {}", f(n).display()));
    let label = |n: &str| read_map(f(n), RangeTag::Unit).with_context(|| format!("reading {}", f(n).display()));
    Ok(SamplePair {
        frame1: frame("frame1")?,
        frame2: frame("frame2")?,
        flow12: read_flow_file(&f("flow12"), Direction::Forward)?,
        flow21: read_flow_file(&f("flow21"), Direction::Backward)?,
        occ1: label("occ1")?,
        occ2: label("occ2")?,
        mb1: label("mb1")?,
        mb2: label("mb2")?,
    })
}

fn is_sample_dir(dir: &Path) -> bool {
    dir.join("frame1.bin").is_file()
}

/// Sample directories under `root` in name order, or `root` itself if it
/// is a sample directory. Each entry is `(name, path)`; a lone sample has
/// an empty name.
pub fn list_samples(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if is_sample_dir(root) {
        return Ok(vec![(String::new(), root.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry?.path();
        if path.is_dir() && is_sample_dir(&path) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no samples found under {}", root.display());
    }
    Ok(out)
}

pub fn read_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    list_samples(root)?.iter().map(|(_, p)| read_sample(p)).collect()
}

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:05}")
}

pub fn write_prediction(dir: &Path, p: &Prediction) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for k in 0..2 {
        written.extend(write_map_with_preview(dir, &format!("occ{}", k + 1), &p.occ[k].fused)?);
        written.extend(write_map_with_preview(dir, &format!("mb{}", k + 1), &p.mb[k].fused)?);
        if let Some(att) = &p.att {
            written.extend(write_map_with_preview(dir, &format!("att{}", k + 1), &att[k].fused)?);
        }
    }
    Ok(written)
}

/// `[(occ, mb); 2]` read from a prediction directory.
pub fn read_prediction(dir: &Path) -> Result<[(ScalarMap, ScalarMap); 2]> {
    let m = |n: &str| read_unit_map(&dir.join(format!("{n}.bin")));
    Ok([(m("occ1")?, m("mb1")?), (m("occ2")?, m("mb2")?)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbocc::synthdata::{generate, translating_square};

    #[test]
    fn sample_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let s = generate(&translating_square(), 0).unwrap();
        write_sample(tmp.path(), &s).unwrap();
        let r = read_sample(tmp.path()).unwrap();
        assert_eq!((&r.flow12, &r.flow21, &r.occ1, &r.occ2, &r.mb1, &r.mb2), (&s.flow12, &s.flow21, &s.occ1, &s.occ2, &s.mb1, &s.mb2));
        // Frames are stored as f32.
        for (a, b) in [(&r.frame1, &s.frame1), (&r.frame2, &s.frame2)] {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-7));
        }
        assert_eq!(list_samples(tmp.path()).unwrap(), vec![(String::new(), tmp.path().to_path_buf())]);
    }

    #[test]
    fn datasets_list_in_name_order() {
        let tmp = tempfile::tempdir().unwrap();
        let s = generate(&translating_square(), 0).unwrap();
        for i in [2, 0, 1] {
            write_sample(&tmp.path().join(sample_dir_name(i)), &s).unwrap();
        }
        fs::create_dir(tmp.path().join("other")).unwrap();
        let names: Vec<String> = list_samples(tmp.path()).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["sample_00000", "sample_00001", "sample_00002"]);
        assert!(list_samples(&tmp.path().join("other")).is_err());
    }
}
