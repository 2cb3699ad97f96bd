//! Fixture directory: one `<digest>.json` file per recorded request.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::fingerprint::{fingerprint_value, RequestFingerprint};
use super::GatewayError;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request: Value,
    pub response: Value,
    pub recorded_at: String,
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &RequestFingerprint) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn contains(&self, digest: &RequestFingerprint) -> bool {
        self.path_for(digest).is_file()
    }

    pub fn get(&self, digest: &RequestFingerprint) -> Result<Option<FixtureRecord>, GatewayError> {
        let path = self.path_for(digest);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Store { path: path.display().to_string(), reason: e.to_string() }),
        };
        let record: FixtureRecord = serde_json::from_str(&text).map_err(|e| GatewayError::CorruptFixture {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Some(record))
    }

    /// Writes a record unless one already exists for the digest and
    /// `overwrite` is false. Returns whether the file was written.
    pub fn put(&self, digest: &RequestFingerprint, record: &FixtureRecord, overwrite: bool) -> Result<bool, GatewayError> {
        let path = self.path_for(digest);
        if !overwrite && path.exists() {
            return Ok(false);
        }
        let store_err = |e: std::io::Error| GatewayError::Store { path: path.display().to_string(), reason: e.to_string() };
        fs::create_dir_all(&self.dir).map_err(store_err)?;
        let mut text = serde_json::to_string_pretty(record).expect("fixture serializes");
        text.push('\n');
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{digest}.{}.{n}.tmp", std::process::id()));
        fs::write(&tmp, text).map_err(store_err)?;
        fs::rename(&tmp, &path).map_err(store_err)?;
        Ok(true)
    }

    /// Digests of every fixture file, sorted.
    pub fn digests(&self) -> Result<Vec<RequestFingerprint>, GatewayError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::Store { path: self.dir.display().to_string(), reason: e.to_string() }),
        };
        let mut out: Vec<RequestFingerprint> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                RequestFingerprint::parse(name.strip_suffix(".json")?)
            })
            .collect();
        out.sort();
        Ok(out)
    }

    /// Checks that `digest` resolves to a fixture whose stored request
    /// re-fingerprints to the same digest.
    pub fn verify(&self, digest: &RequestFingerprint) -> Result<(), GatewayError> {
        let record = self.get(digest)?.ok_or_else(|| GatewayError::FixtureMiss { digest: digest.to_string() })?;
        let actual = fingerprint_value(&record.request);
        if &actual != digest {
            return Err(GatewayError::CorruptFixture {
                path: self.path_for(digest).display().to_string(),
                reason: format!("stored request fingerprints to {actual}"),
            });
        }
        Ok(())
    }
}
