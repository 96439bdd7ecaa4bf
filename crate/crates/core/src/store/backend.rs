use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};

/// Key/value storage for blob and sketch files. Keys are `/`-separated
/// relative paths such as `blobs/ab/cd/<hex>.thdx`.
pub trait BlobBackend: Send + Sync {
    /// Stores `bytes` under `key`; readers never observe a partial value.
    fn put(&self, key: &str, bytes: &[u8]) -> Result<()>;
    fn get(&self, key: &str) -> Result<Vec<u8>>;
    fn delete(&self, key: &str) -> Result<()>;
    fn size(&self, key: &str) -> Result<u64>;
    /// All keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>>;
}

fn missing(key: &str) -> Error {
    Error::NotFound(format!("blob {key}"))
}

/// Files under a root directory. Writes go to a temporary sibling, are
/// synced, then renamed into place.
pub struct FsBackend {
    root: PathBuf,
}

impl FsBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsBackend { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        if key.is_empty() || key.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
            return Err(Error::Config(format!("invalid blob key {key:?}")));
        }
        Ok(self.root.join(key))
    }

    fn walk(&self, dir: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let key = if rel.is_empty() {
                name.clone()
            } else {
                format!("{rel}/{name}")
            };
            if entry.file_type()?.is_dir() {
                self.walk(&entry.path(), &key, out)?;
            } else {
                out.push(key);
            }
        }
        Ok(())
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl BlobBackend for FsBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(key)?;
        let dir = path.parent().expect("keys have a parent");
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path)?;
        sync_dir(dir)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        fs::read(self.path(key)?).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => missing(key),
            _ => e.into(),
        })
    }

    fn delete(&self, key: &str) -> Result<()> {
        match fs::remove_file(self.path(key)?) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn size(&self, key: &str) -> Result<u64> {
        fs::metadata(self.path(key)?)
            .map(|m| m.len())
            .map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => missing(key),
                _ => e.into(),
            })
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let top = prefix.split('/').next().unwrap_or("");
        let (dir, rel) = if top.is_empty() {
            (self.root.clone(), "")
        } else {
            (self.root.join(top), top)
        };
        self.walk(&dir, rel, &mut out)?;
        out.retain(|k| k.starts_with(prefix));
        out.sort();
        Ok(out)
    }
}

/// In-process map, for tests and dry runs.
#[derive(Default)]
pub struct MemoryBackend {
    map: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobBackend for MemoryBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<()> {
        self.map.lock().unwrap().insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        self.map.lock().unwrap().get(key).cloned().ok_or_else(|| missing(key))
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.map.lock().unwrap().remove(key);
        Ok(())
    }

    fn size(&self, key: &str) -> Result<u64> {
        self.map
            .lock()
            .unwrap()
            .get(key)
            .map(|v| v.len() as u64)
            .ok_or_else(|| missing(key))
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        Ok(self
            .map
            .lock()
            .unwrap()
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(b: &dyn BlobBackend) {
        b.put("blobs/aa/bb/x.thdx", b"hello").unwrap();
        b.put("sketches/y.thsk", b"abc").unwrap();
        assert_eq!(b.get("blobs/aa/bb/x.thdx").unwrap(), b"hello");
        assert_eq!(b.size("sketches/y.thsk").unwrap(), 3);
        assert_eq!(b.list("blobs/").unwrap(), vec!["blobs/aa/bb/x.thdx".to_string()]);
        b.put("blobs/aa/bb/x.thdx", b"again").unwrap();
        assert_eq!(b.get("blobs/aa/bb/x.thdx").unwrap(), b"again");
        b.delete("blobs/aa/bb/x.thdx").unwrap();
        b.delete("blobs/aa/bb/x.thdx").unwrap();
        assert!(matches!(b.get("blobs/aa/bb/x.thdx"), Err(Error::NotFound(_))));
        assert!(b.list("blobs/").unwrap().is_empty());
    }

    #[test]
    fn memory_backend() {
        exercise(&MemoryBackend::new());
    }

    #[test]
    fn fs_backend() {
        let dir = tempfile::tempdir().unwrap();
        let b = FsBackend::new(dir.path());
        exercise(&b);
        assert!(b.put("../escape", b"x").is_err());
    }
}
