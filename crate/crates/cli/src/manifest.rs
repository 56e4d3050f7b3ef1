//! `run_manifest.json`: what is needed to repeat a command.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use glagan::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub glagan: &'static str,
    pub glagan_cli: &'static str,
    pub target: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub status: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: &'a ExperimentConfig,
    pub versions: Versions,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    /// Files under the output directory, relative to it.
    pub outputs: Vec<PathBuf>,
}

pub struct Clock {
    wall: u64,
    start: Instant,
}

impl Clock {
    pub fn start() -> Self {
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { wall, start: Instant::now() }
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    let mut entries: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out);
        } else if let Ok(rel) = p.strip_prefix(root) {
            if rel != Path::new("run_manifest.json") {
                out.push(rel.to_path_buf());
            }
        }
    }
}

pub fn write(out: &Path, command: &str, cfg: &ExperimentConfig, clock: &Clock, status: Result<(), &Error>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let mut outputs = Vec::new();
    list_files(out, out, &mut outputs);
    let manifest = RunManifest {
        command,
        argv: std::env::args().collect(),
        status: match status {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e}"),
        },
        seed: cfg.train.seed,
        config_sha256: cfg.sha256(),
        config: cfg,
        versions: Versions {
            glagan: glagan::VERSION,
            glagan_cli: env!("CARGO_PKG_VERSION"),
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        },
        started_unix: clock.wall,
        elapsed_secs: clock.start.elapsed().as_secs_f64(),
        outputs,
    };
    let path = out.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::Unwritable { path, reason: e.to_string() })
}
