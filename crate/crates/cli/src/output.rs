//! Writes artifacts and the run manifest.

use std::fs;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::commands::Outcome;
use crate::config::RunConfig;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every artifact into `dir` followed by `manifest.json`. Files are
/// written to a temporary name and renamed so a reader never sees half a file.
pub fn commit(dir: &Path, subcommand: &str, cfg: &RunConfig, outcome: &Outcome) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut digest = Sha256::new();
    for a in &outcome.artifacts {
        write_atomic(&dir.join(&a.name), &a.bytes)?;
        let h = sha256_hex(&a.bytes);
        digest.update(a.name.as_bytes());
        digest.update([0u8]);
        digest.update(h.as_bytes());
        entries.push(json!({ "file": a.name, "sha256": h, "bytes": a.bytes.len() }));
    }
    let canonical = cfg.canonical();
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config_digest": sha256_hex(canonical.as_bytes()),
        "config": cfg,
        "index_space": outcome.index_space,
        "artifacts": entries,
        "output_digest": hex::encode(digest.finalize()),
        "status": match &outcome.failure {
            None => "ok".to_string(),
            Some(e) => e.to_string(),
        },
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
