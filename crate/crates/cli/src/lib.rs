//! Experiment runner behind the `bayeslora` binary: configuration,
//! checkpoints, and artifact emission for the toy benchmarks.

pub mod checkpoint;
pub mod config;
pub mod modes;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use thiserror::Error;

pub use config::{Mode, Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] bayeslora::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Core(_) => "compute",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        let errors = match self {
            CliError::Config(v) => v.clone(),
            other => vec![other.to_string()],
        };
        json!({ "status": "error", "kind": self.kind(), "errors": errors })
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", path.display()));
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out: PathBuf,
    pub files: Vec<String>,
    pub summary: serde_json::Value,
}

/// Validates, executes the mode and writes every artifact plus
/// `manifest.json` into the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let out = cfg.out.clone().expect("validated config has an output directory");
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    let artifacts = modes::execute(cfg)?;
    let mut files = Vec::new();
    for (name, bytes) in &artifacts.files {
        write_atomic(&out.join(name), bytes)?;
        files.push(json!({ "file": name, "bytes": bytes.len() }));
    }
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "status": "ok",
        "tool": "bayeslora",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": bayeslora::VERSION,
        "mode": cfg.mode.map(|m| m.name()),
        "seeds": cfg.seeds,
        "config": cfg,
        "artifacts": files,
        "summary": artifacts.summary,
        "created_unix": created,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&out.join("manifest.json"), text.as_bytes())?;
    let mut names: Vec<String> = artifacts.files.into_iter().map(|(n, _)| n).collect();
    names.push("manifest.json".into());
    Ok(RunReport { out, files: names, summary: artifacts.summary })
}

/// Loads the config, applies overrides and runs it. On failure the error
/// record is also written to `error.json` when the output directory is
/// known.
pub fn run_from_path(config: Option<&Path>, overrides: &Overrides) -> Result<RunReport, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    };
    if let Ok(c) = cfg.as_mut() {
        c.apply(overrides);
    }
    let out = cfg.as_ref().ok().and_then(|c| c.out.clone()).or_else(|| overrides.out.clone());
    let result = cfg.and_then(|c| run(&c));
    if let (Err(e), Some(dir)) = (&result, out) {
        if std::fs::create_dir_all(&dir).is_ok() {
            let _ = write_atomic(&dir.join("error.json"), e.record().to_string().as_bytes());
        }
    }
    result
}
