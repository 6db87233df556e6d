use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::{RunRecord, ServiceError};

/// Append-only JSON-lines log of run records; the last line per id wins.
pub struct RunLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl RunLog {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &RunRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line)?;
        file.flush()
    }

    /// Latest record per id, in order of first appearance.
    ///
    /// A malformed final line is a write cut short by a crash and is
    /// skipped; a malformed line elsewhere is an error.
    pub fn load(&self) -> Result<Vec<RunRecord>, ServiceError> {
        let reader = BufReader::new(File::open(&self.path)?);
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let mut order: Vec<String> = Vec::new();
        let mut latest = std::collections::HashMap::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(rec) => {
                    if !latest.contains_key(&rec.id) {
                        order.push(rec.id.clone());
                    }
                    latest.insert(rec.id.clone(), rec);
                }
                Err(e) if i + 1 == lines.len() => {
                    log::warn!("{}: ignoring truncated last line: {e}", self.path.display());
                }
                Err(e) => {
                    return Err(ServiceError::RunLog {
                        path: self.path.display().to_string(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }
}
