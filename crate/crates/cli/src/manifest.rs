//! Run manifests written next to every artifact.
//!
//! A manifest is written with status `running` before any output, and
//! rewritten as `complete` or `failed: ...` at the end, so interrupted or
//! failed runs are always marked.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub version: String,
    pub parallel: bool,
    pub threads: usize,
    pub started_unix: u64,
    pub status: String,
    /// Seconds per named phase.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
}

pub struct Run {
    path: PathBuf,
    manifest: RunManifest,
    phase: Option<(String, Instant)>,
}

impl Run {
    /// Start a run whose manifest lives at `path`.
    pub fn start(path: PathBuf, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<Run> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let run = Run {
            path,
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config,
                seed,
                git_describe: env!("MBOCC_GIT_DESCRIBE").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                parallel: mbocc::par::is_parallel(),
                threads: crate::threads(),
                started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                status: "running".to_string(),
                timings: BTreeMap::new(),
                outputs: Vec::new(),
            },
            phase: None,
        };
        run.save()?;
        Ok(run)
    }

    /// Manifest next to a single output file: `<file>.manifest.json`.
    pub fn beside_file(out: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<Run> {
        let mut name = out.file_name().context("output path has no file name")?.to_os_string();
        name.push(".manifest.json");
        Run::start(out.with_file_name(name), command, config, seed)
    }

    /// Manifest inside an output directory.
    pub fn in_dir(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<Run> {
        Run::start(dir.join("manifest.json"), command, config, seed)
    }

    fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.phase.take() {
            self.manifest.timings.insert(name, t.elapsed().as_secs_f64());
        }
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.manifest.outputs.push(p.into());
    }

    pub fn outputs(&mut self, ps: impl IntoIterator<Item = PathBuf>) {
        self.manifest.outputs.extend(ps);
    }

    /// Run `f`, then mark the manifest with its outcome.
    pub fn execute<T>(mut self, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        let r = f(&mut self);
        self.finish(r)
    }

    /// Mark the run complete, or failed with the error's message.
    pub fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.end_phase();
        self.manifest.status = match &result {
            Ok(_) => "complete".to_string(),
            Err(e) => format!("failed: {e:#}"),
        };
        self.save()?;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn status(p: &Path) -> String {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        m.status
    }

    #[test]
    fn status_tracks_outcome() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("x.bin");
        let run = Run::beside_file(&out, "test", serde_json::json!({}), Some(1)).unwrap();
        let path = tmp.path().join("x.bin.manifest.json");
        assert_eq!(status(&path), "running");
        run.execute(|r| {
            r.phase("a");
            r.output(out.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(status(&path), "complete");

        let run = Run::in_dir(tmp.path(), "test", serde_json::json!({}), None).unwrap();
        let err = run.execute(|_| -> Result<()> { anyhow::bail!("boom") });
        assert!(err.is_err());
        assert_eq!(status(&tmp.path().join("manifest.json")), "failed: boom");
    }
}
