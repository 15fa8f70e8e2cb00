// Copyright 2026 The iontrap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Output artifacts: CSV files and the JSON run summary.
//!
//! Summary layout:
//!
//! ```text
//! {
//!   "command":  "truth-table",
//!   "ok":       true,
//!   "seed":     1,
//!   "config":   { ...fully resolved ExperimentConfig... },
//!   "results":  { ...command specific... },
//!   "files":    ["truth_table.csv"],
//!   "warnings": [],
//!   "meta":     { "version": "0.1.0", "threads": 4, "elapsed_s": 0.8, "generated_unix_s": 1760000000 }
//! }
//! ```
//!
//! Everything except `meta` is a deterministic function of config and seed.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::Result;

/// A named text file produced by a command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    pub fn new(name: impl Into<String>, contents: impl Into<String>) -> Self {
        Artifact {
            name: name.into(),
            contents: contents.into(),
        }
    }
}

/// Everything a command produced.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub command: String,
    pub files: Vec<Artifact>,
    pub results: Value,
    pub warnings: Vec<String>,
    /// False when a fit did not converge or a guard tripped.
    pub ok: bool,
}

impl CommandOutput {
    pub fn new(command: &str, results: impl Serialize) -> Self {
        CommandOutput {
            command: command.to_string(),
            files: Vec::new(),
            results: serde_json::to_value(results).expect("results are serialisable"),
            warnings: Vec::new(),
            ok: true,
        }
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }

    /// JSON summary; `meta` carries the run-dependent fields.
    pub fn summary(&self, config: Option<&ExperimentConfig>, threads: usize, elapsed: Duration) -> Value {
        let generated = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        json!({
            "command": self.command,
            "ok": self.ok,
            "seed": config.map(|c| c.run.seed),
            "config": config,
            "results": self.results,
            "files": self.files.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
            "warnings": self.warnings,
            "meta": {
                "version": env!("CARGO_PKG_VERSION"),
                "threads": threads,
                "elapsed_s": elapsed.as_secs_f64(),
                "generated_unix_s": generated,
            },
        })
    }

    /// Write every artifact and `summary.json` into `dir`.
    pub fn write(
        &self,
        dir: &Path,
        config: Option<&ExperimentConfig>,
        threads: usize,
        elapsed: Duration,
    ) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for a in &self.files {
            let p = dir.join(&a.name);
            std::fs::write(&p, &a.contents)?;
            written.push(p);
        }
        let p = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary(config, threads, elapsed)).expect("valid json");
        std::fs::write(&p, text + "\n")?;
        written.push(p);
        Ok(written)
    }
}

/// CSV writer with a fixed header and no locale.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            text: header.join(",") + "\n",
            columns: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns);
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Fixed-precision number for CSV output.
pub fn num(x: f64) -> String {
    format!("{x:.9}")
}
