//! Result files: atomic writes and run summaries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const TOOL: &str = "latentlm";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> std::io::Result<OutDir> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temporary sibling and renames it into place, so a
    /// reader never sees a partial file.
    pub fn write(&self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }
}

/// Canonical JSON of `config`: object keys sorted, floats round-trip.
pub fn canonical_json<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    serde_json::to_string(&value).expect("value serializes")
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    format!("{:x}", Sha256::digest(canonical_json(config).as_bytes()))
}

/// Summary document for one run. Holds no timestamps, so equal configs give
/// equal bytes.
pub fn summary<T: Serialize>(command: &str, seed: u64, config: &T, results: Value) -> Vec<u8> {
    let doc = json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config).expect("config serializes"),
        "config_sha256": config_hash(config),
        "results": results,
    });
    let mut out = serde_json::to_string_pretty(&doc).expect("summary serializes");
    out.push('\n');
    out.into_bytes()
}
