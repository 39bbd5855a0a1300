use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::Mutex;

use crate::session::AnnotationRecord;

/// Append-only JSONL file of accepted annotations. One writer at a time;
/// each record is written with a single `write_all` and synced.
pub struct Store {
    path: PathBuf,
    lock: Mutex<()>,
}

impl Store {
    pub fn new(path: PathBuf) -> Self {
        Store {
            path,
            lock: Mutex::new(()),
        }
    }

    pub fn append(&self, record: &AnnotationRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        let _guard = self.lock.lock().expect("store lock");
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(&line)?;
        f.sync_data()
    }

    /// The whole file; empty when nothing was accepted yet.
    pub fn read_all(&self) -> io::Result<String> {
        let _guard = self.lock.lock().expect("store lock");
        match fs::read_to_string(&self.path) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
            r => r,
        }
    }

    pub fn records(&self) -> io::Result<Vec<AnnotationRecord>> {
        self.read_all()?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(io::Error::other))
            .collect()
    }
}
