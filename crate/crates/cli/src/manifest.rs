//! Run manifest: one section per command plus a hashed listing of every
//! file in the run directory.
//!
//! ```text
//! [train-vae]
//! seed = 7
//! config = <hash>
//! input <hash> data.jsonl
//! [files]
//! <hash> data.jsonl
//! <hash> vae.ckpt
//! ```
//!
//! Hashes are git-style object ids over SHA-256: the digest of
//! `blob <len>\0` followed by the content. Paths are relative to the run
//! directory, and external inputs are named by file name only, so two runs
//! in different directories produce identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";
const FILES: &str = "files";

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(blob_hash(&bytes))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file under `root` except the manifest, as sorted relative paths
/// with `/` separators.
pub fn list_files(root: &Path) -> Result<Vec<String>, CliError> {
    let mut paths = Vec::new();
    walk(root, &mut paths).map_err(|e| CliError::invalid(format!("{}: {e}", root.display())))?;
    let mut rel: Vec<String> = paths
        .iter()
        .filter_map(|p| p.strip_prefix(root).ok())
        .map(|p| p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"))
        .filter(|p| p != MANIFEST)
        .collect();
    rel.sort();
    Ok(rel)
}

/// Updates the section for `command` and rewrites the file listing.
pub fn record(root: &Path, command: &str, lines: &[String]) -> Result<PathBuf, CliError> {
    let path = root.join(MANIFEST);
    let mut sections: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(&path) {
        let mut current: Option<String> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
            } else if let Some(c) = &current {
                sections.get_mut(c).expect("section exists").push(line.to_string());
            }
        }
    }
    sections.remove(FILES);
    sections.insert(command.to_string(), lines.to_vec());

    let mut text = String::new();
    for (name, body) in &sections {
        text.push_str(&format!("[{name}]\n"));
        for l in body {
            text.push_str(l);
            text.push('\n');
        }
    }
    text.push_str(&format!("[{FILES}]\n"));
    for rel in list_files(root)? {
        text.push_str(&format!("{} {rel}\n", file_hash(&root.join(&rel))?));
    }
    std::fs::write(&path, text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(path)
}
