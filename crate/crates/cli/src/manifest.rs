use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use game_ddp::io::write_json;
use game_ddp::ProblemSpec;

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub started_unix: f64,
    pub wall_seconds: Option<f64>,
}

/// What was run, with which settings, and which files it produced.
/// Written before any output and rewritten with timings at the end.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub problem: ProblemSpec,
    pub problem_notes: Vec<String>,
    pub provider: String,
    pub settings: serde_json::Value,
    pub output_dir: PathBuf,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub threads: usize,
    pub timings: Timings,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        problem: &ProblemSpec,
        notes: &[String],
        provider: &str,
        output_dir: &Path,
    ) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            problem: problem.clone(),
            problem_notes: notes.to_vec(),
            provider: provider.to_string(),
            settings: serde_json::Value::Null,
            output_dir: output_dir.to_path_buf(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            timings: Timings {
                started_unix,
                wall_seconds: None,
            },
            started: Some(Instant::now()),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join("manifest.json")
    }

    pub fn write(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        write_json(&self.path(), self)?;
        Ok(())
    }

    pub fn finish(&mut self) -> anyhow::Result<()> {
        self.timings.wall_seconds = self.started.map(|s| s.elapsed().as_secs_f64());
        self.write()
    }
}
