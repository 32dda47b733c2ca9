//! Binary checkpoint serialization for [`ParamStore`].
//!
//! Layout: magic `IFAL`, format version (u32 LE), parameter count (u32 LE),
//! then per parameter in sorted name order: name length (u32 LE), name bytes,
//! dtype tag (u8, 0 = f64), freeze flag (u8), rank (u32 LE), dims (u64 LE
//! each), and the row-major payload as little-endian f64. Writing is
//! deterministic, so identical stores produce identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"IFAL";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Serialize `store` to `path`. With `prefix`, only parameters whose names
/// start with it are written (e.g. `"adapter/"` for an adapter-only file).
pub fn save(store: &ParamStore, path: &Path, prefix: Option<&str>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let entries: Vec<_> = store
        .iter()
        .filter(|(name, _, _, _)| prefix.map_or(true, |p| name.starts_with(p)))
        .collect();
    if entries.is_empty() {
        return Err(Error::Checkpoint(format!(
            "nothing to save{}",
            prefix.map(|p| format!(" under prefix {p:?}")).unwrap_or_default()
        )));
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data, frozen) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F64);
        buf.push(frozen as u8);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint while reading {what}"
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint into a fresh store, restoring freeze flags.
pub fn load(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut cur = Cursor { buf: &buf, at: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32("count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?
            .to_string();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "param {name}: unknown dtype tag {dtype}"
            )));
        }
        let frozen = cur.u8("freeze flag")? != 0;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64("payload")?);
        }
        store
            .insert(&name, &shape, data)
            .map_err(|_| Error::Checkpoint(format!("duplicate param {name}")))?;
        store.set_frozen(&name, frozen)?;
    }
    if cur.at != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            buf.len() - cur.at
        )));
    }
    Ok(store)
}

/// Hex SHA-256 of a file, used to pin checkpoints inside run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("adapter/lambda", &[1], vec![0.0]).unwrap();
        s.insert("base/w", &[2, 3], vec![1.5, -2.25, 0.0, 1e-17, 3.5, -0.5])
            .unwrap();
        s.insert("base/b", &[3], vec![0.125, 0.25, 0.375]).unwrap();
        s.set_frozen("base/w", true).unwrap();
        s.set_frozen("base/b", true).unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_values_and_flags_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save(&store, &path, None).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for name in ["adapter/lambda", "base/w", "base/b"] {
            assert_eq!(loaded.data(name).unwrap(), store.data(name).unwrap());
            assert_eq!(loaded.shape(name).unwrap(), store.shape(name).unwrap());
            assert_eq!(loaded.is_frozen(name).unwrap(), store.is_frozen(name).unwrap());
        }
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&sample_store(), &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"IFAL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn prefix_filter_writes_only_matching_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        save(&sample_store(), &path, Some("adapter/")).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded.contains("adapter/lambda"));
        assert!(!loaded.contains("base/w"));
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&sample_store(), &p1, None).unwrap();
        save(&sample_store(), &p2, None).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&sample_store(), &path, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.ckpt");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(load(&bad), Err(Error::Checkpoint(_))));

        bytes.truncate(bytes.len() - 5);
        let trunc = dir.path().join("trunc.ckpt");
        fs::write(&trunc, &bytes).unwrap();
        assert!(matches!(load(&trunc), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn base_and_adapter_files_compose() {
        let dir = tempfile::tempdir().unwrap();
        let base_path = dir.path().join("base.ckpt");
        let adapter_path = dir.path().join("adapter.ckpt");
        let store = sample_store();
        save(&store, &base_path, Some("base/")).unwrap();
        save(&store, &adapter_path, Some("adapter/")).unwrap();

        let mut merged = load(&base_path).unwrap();
        merged.merge(load(&adapter_path).unwrap()).unwrap();
        assert_eq!(merged.len(), 3);

        // merging a file that shares names is an error
        let mut again = load(&base_path).unwrap();
        assert!(again.merge(load(&base_path).unwrap()).is_err());
    }
}
