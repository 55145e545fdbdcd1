//! Per-run manifest: command, seed, resolved config and its hash, and the
//! SHA-256 of every input tree and output artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use counterseg::checkpoint::file_sha256;
use counterseg::{Error, Result};

use crate::config::RunConfig;

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
    pub config: RunConfig,
    /// Input path as given on the command line to a digest of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, threads: usize, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool: "counterseg",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            threads,
            config_hash: config.hash()?,
            config: config.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), tree_digest(path)?);
        Ok(())
    }

    /// Hash everything under `out` (except the manifest itself) and write the manifest there.
    pub fn finish(mut self, out: &Path) -> Result<PathBuf> {
        self.artifacts = hash_tree(out)?.into_iter().filter(|(k, _)| k != FILE).collect();
        let path = out.join(FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            files_under(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// SHA-256 per file under `root`, keyed by `/`-separated relative path.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    files_under(root, root, &mut files)?;
    files.into_iter().map(|(rel, p)| Ok((rel, file_sha256(&p)?))).collect()
}

/// One digest for a file, or for a directory as the hash of its sorted
/// `path hash` listing.
pub fn tree_digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Dataset(format!("input {} does not exist", path.display())));
    }
    if path.is_file() {
        return file_sha256(path);
    }
    let listing: String = hash_tree(path)?.into_iter().map(|(k, v)| format!("{k} {v}\n")).collect();
    Ok(counterseg::checkpoint::sha256_hex(listing.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_tracks_content_not_creation_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::create_dir(a.path().join("sub")).unwrap();
        fs::write(a.path().join("x"), b"1").unwrap();
        fs::write(a.path().join("sub/y"), b"2").unwrap();
        fs::create_dir(b.path().join("sub")).unwrap();
        fs::write(b.path().join("sub/y"), b"2").unwrap();
        fs::write(b.path().join("x"), b"1").unwrap();
        assert_eq!(tree_digest(a.path()).unwrap(), tree_digest(b.path()).unwrap());
        assert_eq!(hash_tree(a.path()).unwrap().keys().collect::<Vec<_>>(), ["sub/y", "x"]);
        fs::write(b.path().join("x"), b"3").unwrap();
        assert_ne!(tree_digest(a.path()).unwrap(), tree_digest(b.path()).unwrap());
        assert_eq!(tree_digest(&a.path().join("missing")).unwrap_err().category(), "dataset");
    }
}
