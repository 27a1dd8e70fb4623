//! `manifest.json`: written with status `running` before any result, rewritten when the run ends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'a str,
    started_unix: u64,
    wall_clock_seconds: Option<f64>,
    config: &'a RunConfig,
    seed: u64,
    /// sha256 of each result file; plots are not hashed.
    outputs: &'a BTreeMap<String, String>,
    plots: &'a [String],
    results: &'a serde_json::Value,
    error: Option<&'a str>,
}

pub struct Run {
    dir: PathBuf,
    config: RunConfig,
    started: Instant,
    started_unix: u64,
    outputs: BTreeMap<String, String>,
    plots: Vec<String>,
    pub results: serde_json::Value,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("cannot write {}: {e}", path.display()))
}

impl Run {
    pub fn start(config: &RunConfig) -> Result<Run, CliError> {
        std::fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
        let run = Run {
            dir: config.out.clone(),
            config: config.clone(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: BTreeMap::new(),
            plots: Vec::new(),
            results: serde_json::Value::Null,
        };
        run.write_manifest("running", None)?;
        Ok(run)
    }

    fn write_manifest(&self, status: &str, error: Option<&str>) -> Result<(), CliError> {
        let done = status != "running";
        let m = Manifest {
            tool: "rgflow",
            version: crate::VERSION,
            status,
            started_unix: self.started_unix,
            wall_clock_seconds: done.then(|| self.started.elapsed().as_secs_f64()),
            config: &self.config,
            seed: self.config.chain.seed,
            outputs: &self.outputs,
            plots: &self.plots,
            results: &self.results,
            error,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }

    /// Write a hashed result file.
    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        let digest = Sha256::digest(bytes);
        self.outputs.insert(name.to_string(), digest.iter().map(|b| format!("{b:02x}")).collect());
        Ok(())
    }

    pub fn plot(&mut self, name: &str, svg: String) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
        self.plots.push(name.to_string());
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        self.write_manifest("complete", None)
    }

    pub fn fail(self, err: &CliError) {
        // best effort: the original error is what the caller reports
        let _ = self.write_manifest("failed", Some(&err.to_string()));
    }
}
