//! Run manifest: a canonical config snapshot plus content hashes of every
//! emitted artifact, written once at the end of a run.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub code_version: &'static str,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Canonical serialization of the fully resolved config — every value,
    /// including ones the user never set.
    pub config_toml: String,
    /// Relative path -> sha256, for every file under the output directory.
    pub files: BTreeMap<String, String>,
}

pub fn unix_ms(t: SystemTime) -> u128 {
    t.duration_since(UNIX_EPOCH).unwrap_or_default().as_millis()
}

fn sha256_hex(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash everything under `dir` (except the manifest itself) and write
/// `manifest.json`.
pub fn emit_manifest(
    dir: &Path,
    config_toml: &str,
    seed: u64,
    started: SystemTime,
) -> io::Result<RunManifest> {
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    let mut files = BTreeMap::new();
    for p in &paths {
        let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        files.insert(rel, sha256_hex(p)?);
    }
    let manifest = RunManifest {
        schema: "gpo-bench/manifest/1",
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        started_unix_ms: unix_ms(started),
        finished_unix_ms: unix_ms(SystemTime::now()),
        config_toml: config_toml.to_string(),
        files,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), body)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_covers_every_emitted_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("metrics.csv"), "a,b\n1,2\n").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/report.json"), "{}").unwrap();
        let m = emit_manifest(dir.path(), "seed = 1\n", 1, SystemTime::now()).unwrap();
        assert_eq!(m.files.len(), 2);
        assert!(m.files.contains_key("metrics.csv"));
        assert!(m.files.contains_key("sub/report.json"));
        assert!(dir.path().join(MANIFEST_FILE).exists());
        // identical content hashes across reruns
        let m2 = emit_manifest(dir.path(), "seed = 1\n", 1, SystemTime::now()).unwrap();
        assert_eq!(m.files, m2.files);
    }
}
