use std::io::Write;
use std::path::{Path, PathBuf};

use crate::ArtifactRef;

/// PNG files named by the SHA-256 of their bytes.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stores `bytes`; writing the same content twice is a no-op.
    pub fn put_png(&self, bytes: &[u8]) -> std::io::Result<ArtifactRef> {
        let r = ArtifactRef::png(bytes);
        let path = self.path(&r.sha256);
        if !path.exists() {
            // Write then rename so readers never see a partial file.
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(bytes)?;
            tmp.persist(&path).map_err(|e| e.error)?;
        }
        Ok(r)
    }

    pub fn path(&self, sha256: &str) -> PathBuf {
        self.dir.join(format!("{sha256}.png"))
    }

    /// `None` for malformed names and missing files.
    pub fn get(&self, sha256: &str) -> Option<Vec<u8>> {
        if sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        std::fs::read(self.path(sha256)).ok()
    }
}
