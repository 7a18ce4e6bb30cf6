//! Content-addressed object store: every object lives at
//! `objects/<sha256 of its bytes>`, so a checksum doubles as its address.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use units_core::error::{Error, Result};

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, sum: &str) -> PathBuf {
        self.root.join("objects").join(sum)
    }

    /// Stores `bytes` (idempotently) and returns their checksum.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let sum = checksum(bytes);
        let path = self.object_path(&sum);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(sum)
    }

    /// Reads an object, verifying it still matches its checksum.
    pub fn get(&self, sum: &str) -> Result<Vec<u8>> {
        if sum.len() != 64 || !sum.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::NotFound(format!("object '{sum}'")));
        }
        let bytes = fs::read(self.object_path(sum)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("object '{sum}'")),
            _ => Error::Io(e),
        })?;
        let actual = checksum(&bytes);
        if actual != sum {
            return Err(Error::Format {
                location: format!("object {sum}"),
                message: format!("content checksum is {actual}"),
            });
        }
        Ok(bytes)
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<String> {
        self.put(&serde_json::to_vec(value)?)
    }

    pub fn get_json<T: DeserializeOwned>(&self, sum: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.get(sum)?)?)
    }
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.put(b"hello").unwrap();
        assert_eq!(a, checksum(b"hello"));
        assert_eq!(store.put(b"hello").unwrap(), a);
        assert_eq!(store.get(&a).unwrap(), b"hello");
        assert!(matches!(store.get(&checksum(b"other")), Err(Error::NotFound(_))));
        assert!(matches!(store.get("../etc"), Err(Error::NotFound(_))));
        fs::write(dir.path().join("objects").join(&a), b"tampered").unwrap();
        assert!(matches!(store.get(&a), Err(Error::Format { .. })));
    }
}
