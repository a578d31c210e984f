use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::StorageError;

/// Minimal durable byte store. `append` returns only once the bytes are
/// flushed; `write` replaces a blob atomically.
pub trait BlobStore: Send + Sync {
    fn read(&self, name: &str) -> Result<Option<Vec<u8>>, StorageError>;
    fn write(&self, name: &str, data: &[u8]) -> Result<(), StorageError>;
    fn append(&self, name: &str, data: &[u8]) -> Result<(), StorageError>;
    fn truncate(&self, name: &str, len: u64) -> Result<(), StorageError>;
    fn delete(&self, name: &str) -> Result<(), StorageError>;
    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError>;
}

#[derive(Debug, Default)]
pub struct MemBlobStore {
    blobs: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips one bit of a stored blob; used to exercise corruption handling.
    pub fn corrupt(&self, name: &str, byte: usize) {
        if let Some(b) = self.blobs.lock().unwrap().get_mut(name) {
            if let Some(x) = b.get_mut(byte) {
                *x ^= 0x01;
            }
        }
    }
}

impl BlobStore for MemBlobStore {
    fn read(&self, name: &str) -> Result<Option<Vec<u8>>, StorageError> {
        Ok(self.blobs.lock().unwrap().get(name).cloned())
    }

    fn write(&self, name: &str, data: &[u8]) -> Result<(), StorageError> {
        self.blobs.lock().unwrap().insert(name.to_string(), data.to_vec());
        Ok(())
    }

    fn append(&self, name: &str, data: &[u8]) -> Result<(), StorageError> {
        self.blobs.lock().unwrap().entry(name.to_string()).or_default().extend_from_slice(data);
        Ok(())
    }

    fn truncate(&self, name: &str, len: u64) -> Result<(), StorageError> {
        if let Some(b) = self.blobs.lock().unwrap().get_mut(name) {
            b.truncate(len as usize);
        }
        Ok(())
    }

    fn delete(&self, name: &str) -> Result<(), StorageError> {
        self.blobs.lock().unwrap().remove(name);
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        let blobs = self.blobs.lock().unwrap();
        Ok(blobs.range(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)).map(|(k, _)| k.clone()).collect())
    }
}

/// Files under a root directory; blob names map to relative paths.
#[derive(Debug)]
pub struct FsBlobStore {
    root: PathBuf,
}

impl FsBlobStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StorageError> {
        fs::create_dir_all(root.as_ref())?;
        Ok(Self { root: root.as_ref().to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl BlobStore for FsBlobStore {
    fn read(&self, name: &str) -> Result<Option<Vec<u8>>, StorageError> {
        match fs::read(self.path(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn write(&self, name: &str, data: &[u8]) -> Result<(), StorageError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn append(&self, name: &str, data: &[u8]) -> Result<(), StorageError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(data)?;
        f.sync_data()?;
        Ok(())
    }

    fn truncate(&self, name: &str, len: u64) -> Result<(), StorageError> {
        match OpenOptions::new().write(true).open(self.path(name)) {
            Ok(f) => {
                f.set_len(len)?;
                f.sync_all()?;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn delete(&self, name: &str) -> Result<(), StorageError> {
        match fs::remove_file(self.path(name)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        // prefixes are "<dir>/<file prefix>"
        let (dir, file_prefix) = match prefix.rsplit_once('/') {
            Some((d, f)) => (self.root.join(d), f),
            None => (self.root.clone(), prefix),
        };
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.starts_with(file_prefix) && !name.ends_with(".tmp") {
                out.push(match prefix.rsplit_once('/') {
                    Some((d, _)) => format!("{d}/{name}"),
                    None => name,
                });
            }
        }
        out.sort();
        Ok(out)
    }
}
