//! Per-run manifest: command line, seed, resolved configuration and content
//! hashes of every input, enough to repeat the run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// SHA-256 over `blob <len>\0<bytes>`, the way git hashes file contents.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file, or of a directory as the hash of its sorted
/// `<hash> <name>` listing (recursively).
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut listing = String::new();
        for e in entries {
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            listing.push_str(&format!("{} {name}\n", content_hash(&e)?));
        }
        let mut h = Sha256::new();
        h.update(format!("tree {}\0", listing.len()).as_bytes());
        h.update(listing.as_bytes());
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(blob_hash(&bytes))
    }
}

/// Writes `manifest-<command>.ini` into `out_dir` and returns its path.
pub fn write_manifest(out_dir: &Path, command: &str, argv: &[String], config: &RunConfig, inputs: &[PathBuf]) -> Result<PathBuf> {
    let mut ini = config.to_ini();
    ini.with_section(Some("invocation"))
        .set("command", command)
        .set("argv", argv.join(" "))
        .set("version", env!("CARGO_PKG_VERSION"));
    let mut section = ini.with_section(Some("inputs"));
    for p in inputs.iter().filter(|p| p.exists()) {
        section.set(p.display().to_string(), content_hash(p)?);
    }
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("manifest-{command}.ini"));
    ini.write_to_file(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
