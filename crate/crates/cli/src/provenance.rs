//! Provenance records: tool version, the command, and the fully resolved
//! configuration. JSONL and binary artifacts get a
//! `<artifact>.provenance.json` sidecar; JSON artifacts embed the record.
//! Records carry no timestamps so identical runs produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use viewsel_core::fsutil::write_atomic;

pub const TOOL: &str = "viewsel";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Provenance {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
        }
    }

    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".provenance.json");
        artifact.with_file_name(name)
    }

    pub fn write_sidecar(&self, artifact: &Path) -> std::io::Result<PathBuf> {
        let path = Self::sidecar_path(artifact);
        let text = serde_json::to_string_pretty(self).expect("provenance serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// A JSON artifact with its provenance embedded under `provenance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_stamped<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> std::io::Result<()> {
    let doc = Stamped {
        provenance: provenance.clone(),
        body,
    };
    let text = serde_json::to_string_pretty(&doc).expect("artifact serializes");
    write_atomic(path, text.as_bytes())
}
