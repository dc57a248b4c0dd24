//! Output directories and run manifests.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const OUT_ENV: &str = "HARVEST_OUT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub scenario: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Twelve hex digits derived from the invocation and the wall clock.
fn run_id(command: &str, seed: u64, overrides: &[String]) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    let mut h = DefaultHasher::new();
    (command, seed, overrides, nanos, std::process::id()).hash(&mut h);
    format!("{:012x}", h.finish() & 0xffff_ffff_ffff)
}

pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates the output directory and writes the manifest before any work
    /// starts. `exact` wins over `root`; `root` falls back to `$HARVEST_OUT`
    /// and then `runs/`.
    pub fn start(
        command: &str,
        scenario: &str,
        overrides: Vec<String>,
        seed: u64,
        root: Option<&Path>,
        exact: Option<&Path>,
    ) -> Result<Self> {
        let id = run_id(command, seed, &overrides);
        let dir = match (exact, root) {
            (Some(dir), _) => dir.to_path_buf(),
            (None, Some(root)) => root.join(format!("{command}-{id}")),
            (None, None) => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(format!("{command}-{id}")),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let run = Run {
            manifest: RunManifest {
                run_id: id,
                command: command.to_string(),
                scenario: scenario.to_string(),
                overrides,
                seed,
                output_dir: dir.clone(),
                started_at: unix_now(),
                finished_at: None,
            },
            dir,
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path(MANIFEST), text + "\n").with_context(|| format!("writing manifest in {}", self.dir.display()))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finished_at = Some(unix_now());
        self.write_manifest()?;
        Ok(self.dir)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
