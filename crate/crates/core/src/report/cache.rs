//! Content-addressed stage cache. Entries are JSON files named by the
//! SHA-256 of the stage's inputs and parameters; writes go through a
//! temporary file that is renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEvent {
    pub stage: String,
    pub key: String,
    pub hit: bool,
}

#[derive(Debug)]
pub struct StageCache {
    dir: PathBuf,
    events: Mutex<Vec<CacheEvent>>,
}

/// Incremental SHA-256 over labelled parts.
#[derive(Clone, Default)]
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        let mut k = Self::default();
        k.bytes(stage.as_bytes());
        k
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn json<T: Serialize>(&mut self, v: &T) -> &mut Self {
        self.bytes(&serde_json::to_vec(v).expect("key part serialises"))
    }

    pub fn finish(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let bytes = std::fs::read(self.path(stage, key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {stage}-{key}: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer(std::io::BufWriter::new(&mut tmp), value)?;
        tmp.flush()?;
        tmp.persist(self.path(stage, key)).map_err(|e| e.error)?;
        Ok(())
    }

    /// Returns the cached value for `key`, computing and storing it on a miss.
    pub fn get_or_compute<T, F>(&self, stage: &str, key: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.get(stage, key) {
            self.record(stage, key, true);
            return Ok(v);
        }
        let v = compute()?;
        self.put(stage, key, &v)?;
        self.record(stage, key, false);
        Ok(v)
    }

    fn record(&self, stage: &str, key: &str, hit: bool) {
        log::info!("stage {stage}: cache {}", if hit { "hit" } else { "miss" });
        self.events.lock().expect("cache log").push(CacheEvent {
            stage: stage.to_string(),
            key: key.to_string(),
            hit,
        });
    }

    pub fn events(&self) -> Vec<CacheEvent> {
        self.events.lock().expect("cache log").clone()
    }
}
