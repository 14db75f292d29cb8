//! Run manifests: one JSON sidecar per artifact, enough to reproduce it
//! byte-for-byte with the same build. `wall_time_ms` is the only field that
//! varies between identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use quantkit::Result;

#[derive(Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// A number, or the string "searched".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub tool_version: String,
    pub wall_time_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            seed: None,
            step: None,
            group_size: None,
            alpha: None,
            mode: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: 0,
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs
            .insert(key.to_string(), path.display().to_string());
        self
    }
}

/// Validation hook run on an artifact after it has been written.
pub type Validator = Box<dyn Fn(&Path) -> Result<()>>;

/// Declared outputs of one command plus the manifest that describes them.
pub struct Outcome {
    pub manifest: RunManifest,
    pub outputs: Vec<(PathBuf, Validator)>,
    /// Machine-readable summary printed on success.
    pub summary: Value,
}

impl Outcome {
    /// Validate every declared output, write manifests, print the summary.
    pub fn finish(self, wall_time_ms: u64) -> Result<()> {
        let mut manifest = self.manifest;
        manifest.wall_time_ms = wall_time_ms;
        for (path, validate) in &self.outputs {
            validate(path)?;
        }
        for (path, _) in &self.outputs {
            let sidecar = manifest_path(path);
            std::fs::write(&sidecar, serde_json::to_vec_pretty(&manifest)?)?;
        }
        println!("{}", serde_json::to_string(&self.summary)?);
        Ok(())
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// One-line machine-parseable error for stderr.
pub fn error_line(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}
