//! Run manifests. Every CLI command writes exactly one: the command name,
//! the full effective config, the seed override if any, and SHA-256 digests
//! of every input and output. The config snapshot alone reproduces the run's
//! artifacts bit for bit on one platform; the digests let that be checked.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::file_sha256;
use crate::config::AppConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand, e.g. `"train-adapter"`.
    pub command: String,
    /// Completion time, unix seconds. Informational only — timestamps are
    /// excluded from every reproducibility claim.
    pub created_unix: u64,
    /// The full effective configuration, after file loading and any seed
    /// override. Re-running the command from this snapshot reproduces the
    /// outputs.
    pub config: AppConfig,
    /// The `IFAL_SEED` override that was active, if any (already folded
    /// into `config`; recorded for provenance).
    pub seed_override: Option<u64>,
    /// SHA-256 per input file (or combined digest per input directory).
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 per produced artifact.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: AppConfig, seed_override: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
            config,
            seed_override,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(display(path), hash_path(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(display(path), hash_path(path)?);
        Ok(())
    }

    /// Write `<runs_dir>/<command>.json` (the manifest of the most recent
    /// run of each command) and return the path.
    pub fn write(&self, runs_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(runs_dir)?;
        let path = runs_dir.join(format!("{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn display(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Digest a file, or a directory as the combined digest of its contents.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        dir_sha256(path)
    } else {
        file_sha256(path)
    }
}

/// Combined digest of a directory: SHA-256 over `relative-path:file-digest`
/// lines sorted by path, so it is independent of directory-walk order and
/// filesystem timestamps but pins every byte of every file.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut entries = Vec::new();
    collect_files(dir, dir, &mut entries)?;
    entries.sort();
    let mut hasher = Sha256::new();
    for rel in entries {
        let digest = file_sha256(&dir.join(&rel))?;
        hasher.update(rel.as_bytes());
        hasher.update(b":");
        hasher.update(digest.as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let input = dir.join("input.bin");
        fs::write(&input, b"hello").unwrap();

        let mut m = RunManifest::new("sample", AppConfig::default(), Some(9));
        m.add_input(&input).unwrap();
        m.add_output(&input).unwrap();
        let path = m.write(&dir.join("runs")).unwrap();
        assert!(path.ends_with("sample.json"));

        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.inputs.len(), 1);
        assert_eq!(back.inputs.values().next(), back.outputs.values().next());
    }

    #[test]
    fn dir_hash_pins_content_not_layout_order() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let (a, b) = (tmp_a.path().to_path_buf(), tmp_b.path().to_path_buf());
        // same tree written in a different order
        fs::create_dir_all(a.join("sub")).unwrap();
        fs::write(a.join("x.txt"), b"one").unwrap();
        fs::write(a.join("sub/y.txt"), b"two").unwrap();
        fs::create_dir_all(b.join("sub")).unwrap();
        fs::write(b.join("sub/y.txt"), b"two").unwrap();
        fs::write(b.join("x.txt"), b"one").unwrap();
        assert_eq!(dir_sha256(&a).unwrap(), dir_sha256(&b).unwrap());

        // one changed byte shows up
        fs::write(b.join("x.txt"), b"oni").unwrap();
        assert_ne!(dir_sha256(&a).unwrap(), dir_sha256(&b).unwrap());

        // as does a renamed file with identical bytes
        fs::write(b.join("x.txt"), b"one").unwrap();
        fs::rename(b.join("x.txt"), b.join("z.txt")).unwrap();
        assert_ne!(dir_sha256(&a).unwrap(), dir_sha256(&b).unwrap());
    }

    #[test]
    fn hash_path_dispatches_on_kind() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let file = dir.join("f.bin");
        fs::write(&file, b"payload").unwrap();
        assert_eq!(hash_path(&file).unwrap(), file_sha256(&file).unwrap());
        assert_eq!(hash_path(dir).unwrap(), dir_sha256(dir).unwrap());
    }
}
