//! Batch front end for `cvkf`: TOML experiment configs, deterministic runs
//! and CSV/JSON artifacts.

use std::path::PathBuf;

use serde_json::{json, Value};

pub mod config;
pub mod experiment;

pub use config::{parse_config, ExperimentConfig};
pub use experiment::{run_experiment, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{stage} failed: {source}")]
    Model {
        stage: String,
        #[source]
        source: cvkf::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Machine-readable error record written to stderr on failure.
    pub fn record(&self) -> Value {
        let mut err = json!({ "message": self.to_string() });
        match self {
            CliError::Parse { line, .. } => {
                err["kind"] = json!("parse");
                err["line"] = json!(line);
            }
            CliError::Invalid { field, .. } => {
                err["kind"] = json!("invalid");
                err["field"] = json!(field);
            }
            CliError::Model { stage, .. } => {
                err["kind"] = json!("model");
                err["stage"] = json!(stage);
            }
            CliError::Io { path, .. } => {
                err["kind"] = json!("io");
                err["path"] = json!(path.display().to_string());
            }
        }
        json!({ "error": err })
    }
}

/// Text of the `scenarios` subcommand.
pub fn scenario_listing() -> String {
    let mut out = String::new();
    for s in cvkf::models::SCENARIOS {
        out.push_str(&format!("{}\n  {}\n", s.name, s.summary));
        for p in s.params {
            out.push_str(&format!("  {:<8} = {:<6} {}\n", p.name, p.default, p.doc));
        }
    }
    out
}
