//! Storage faces of the engine.
//!
//! Two independent services live here: the remote data source workers fetch
//! clusters from (token-gated, with a modeled latency/bandwidth cost), and
//! the object store where workers deposit partial results. Cluster content
//! for simulated-remote files is regenerated from the dataset seed on fetch;
//! only the declared byte size participates in the cost model, so desk-scale
//! runs never materialize the data they "transfer".

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClusterInfo, DatasetDescriptor};
use crate::rng;

// ---------------------------------------------------------------------------
// Object store
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("key already written: {0}")]
    KeyExists(String),
    #[error("key not found: {0}")]
    KeyNotFound(String),
    #[error("store io error on {key}: {message}")]
    Io { key: String, message: String },
}

/// Write-once key/value store. Keys are immutable after the first `put`,
/// which makes duplicate results from retried or timed-out attempts
/// impossible by construction (each attempt writes a distinct key).
pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError>;
    fn keys(&self) -> Vec<String>;
}

/// In-memory store used by the simulator.
#[derive(Debug, Default)]
pub struct MemoryStore {
    map: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemoryStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let mut map = self.map.lock().unwrap();
        if map.contains_key(key) {
            return Err(StoreError::KeyExists(key.to_string()));
        }
        map.insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.map
            .lock()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::KeyNotFound(key.to_string()))
    }

    fn keys(&self) -> Vec<String> {
        self.map.lock().unwrap().keys().cloned().collect()
    }
}

/// Directory-tree store used by the local backend. Keys map to file paths
/// under the root; a put writes a temp file and hard-links it into place, so
/// concurrent writers of the same key see exactly one winner and no partial
/// content is ever visible.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root, tmp_counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let mut p = self.root.clone();
        for part in key.split('/') {
            p.push(part);
        }
        p
    }
}

impl ObjectStore for DirStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let io_err = |e: std::io::Error| StoreError::Io { key: key.to_string(), message: e.to_string() };
        let path = self.path_for(key);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let tmp = self.root.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
            f.write_all(bytes).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        let res = std::fs::hard_link(&tmp, &path);
        let _ = std::fs::remove_file(&tmp);
        match res {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::KeyExists(key.to_string()))
            }
            Err(e) => Err(io_err(e)),
        }
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_for(key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(StoreError::KeyNotFound(key.to_string()))
            }
            Err(e) => Err(StoreError::Io { key: key.to_string(), message: e.to_string() }),
        }
    }

    fn keys(&self) -> Vec<String> {
        fn visit(dir: &Path, root: &Path, out: &mut Vec<String>) {
            let Ok(entries) = std::fs::read_dir(dir) else { return };
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    visit(&p, root, out);
                } else if let Ok(rel) = p.strip_prefix(root) {
                    let s = rel.to_string_lossy().replace('\\', "/");
                    if !s.starts_with(".tmp-") {
                        out.push(s);
                    }
                }
            }
        }
        let mut out = Vec::new();
        visit(&self.root, &self.root, &mut out);
        out.sort();
        out
    }
}

/// Key under which a worker stores the partial result of one attempt.
pub fn result_key(run_id: &str, partition_id: u32, attempt: u32) -> String {
    format!("results/{run_id}/{partition_id}-{attempt}")
}

// ---------------------------------------------------------------------------
// Remote data source
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSourceConfig {
    /// Fixed per-request latency.
    pub latency_ms: u64,
    pub bandwidth_bytes_per_sec: u64,
    /// Tokens the source accepts for token-gated files.
    pub valid_tokens: Vec<String>,
    /// Multiplicative jitter on each transfer duration, seeded.
    pub per_request_jitter_frac: f64,
    pub seed: u64,
    /// Probability that a single fetch attempt fails with an injected io
    /// error, decided deterministically from the seed.
    pub io_failure_probability: f64,
    /// Per-cluster retries after the first failed attempt.
    pub fetch_retries: u32,
}

impl Default for DataSourceConfig {
    fn default() -> Self {
        Self {
            latency_ms: 50,
            bandwidth_bytes_per_sec: 100 * 1024 * 1024,
            valid_tokens: vec!["demo-token".to_string()],
            per_request_jitter_frac: 0.0,
            seed: 0,
            io_failure_probability: 0.0,
            fetch_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchStats {
    pub bytes: u64,
    pub duration_us: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SourceError {
    #[error("authorization failed for file {file}: token missing or invalid")]
    Auth { file: u32 },
    #[error("injected io error on file {file} cluster {cluster} (attempt {attempt})")]
    InjectedIo { file: u32, cluster: u32, attempt: u32 },
}

/// Deterministic modeled transfer time for one cluster fetch.
pub fn fetch_duration_us(cfg: &DataSourceConfig, bytes: u64, file: u32, cluster: u32, attempt: u32) -> u64 {
    let base = cfg.latency_ms as f64 * 1_000.0
        + bytes as f64 * 1_000_000.0 / cfg.bandwidth_bytes_per_sec as f64;
    let jitter = if cfg.per_request_jitter_frac > 0.0 {
        1.0 + cfg.per_request_jitter_frac
            * rng::uniform_pm1(&[cfg.seed, 0xF37C, u64::from(file), u64::from(cluster), u64::from(attempt)])
    } else {
        1.0
    };
    (base * jitter).round().max(0.0) as u64
}

/// The remote source holding simulated-remote datasets. Fetching checks the
/// token gate, accounts the read in the exactly-once ledger, and returns the
/// modeled transfer stats; no actual payload bytes exist.
#[derive(Debug)]
pub struct SimulatedSource {
    cfg: DataSourceConfig,
    /// `(file, cluster) -> fetch count` across the source's lifetime.
    ledger: Mutex<BTreeMap<(u32, u32), u64>>,
}

impl SimulatedSource {
    pub fn new(cfg: DataSourceConfig) -> Self {
        Self { cfg, ledger: Mutex::new(BTreeMap::new()) }
    }

    pub fn config(&self) -> &DataSourceConfig {
        &self.cfg
    }

    fn token_ok(&self, token: Option<&str>) -> bool {
        match token {
            Some(t) => self.cfg.valid_tokens.iter().any(|v| v == t),
            None => false,
        }
    }

    /// Fetch one cluster on behalf of a worker. `attempt` distinguishes
    /// retried transfers in the jitter/failure derivation; the ledger counts
    /// every attempt that actually transferred.
    pub fn fetch_cluster(
        &self,
        d: &DatasetDescriptor,
        file_idx: u32,
        cluster_idx: u32,
        cluster: &ClusterInfo,
        token: Option<&str>,
        attempt: u32,
    ) -> Result<FetchStats, SourceError> {
        let file = &d.files[file_idx as usize];
        if file.requires_token && !self.token_ok(token) {
            return Err(SourceError::Auth { file: file_idx });
        }
        if self.cfg.io_failure_probability > 0.0 {
            let roll = rng::uniform(&[
                self.cfg.seed,
                0x10F_A11,
                u64::from(file_idx),
                u64::from(cluster_idx),
                u64::from(attempt),
            ]);
            if roll < self.cfg.io_failure_probability {
                return Err(SourceError::InjectedIo { file: file_idx, cluster: cluster_idx, attempt });
            }
        }
        *self
            .ledger
            .lock()
            .unwrap()
            .entry((file_idx, cluster_idx))
            .or_insert(0) += 1;
        Ok(FetchStats {
            bytes: cluster.byte_size,
            duration_us: fetch_duration_us(&self.cfg, cluster.byte_size, file_idx, cluster_idx, attempt),
        })
    }

    /// Account a read performed by an execution whose transfer was modeled
    /// elsewhere (the simulator's clipped attempts).
    pub fn record_fetch(&self, file_idx: u32, cluster_idx: u32) {
        *self
            .ledger
            .lock()
            .unwrap()
            .entry((file_idx, cluster_idx))
            .or_insert(0) += 1;
    }

    /// Snapshot of the read-accounting ledger.
    pub fn ledger(&self) -> BTreeMap<(u32, u32), u64> {
        self.ledger.lock().unwrap().clone()
    }

    pub fn reset_ledger(&self) {
        self.ledger.lock().unwrap().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{uniform_dataset, DatasetKind};

    fn gated_dataset() -> DatasetDescriptor {
        uniform_dataset("s", DatasetKind::SimulatedRemote, 5, &["c0"], 2, 200, 100, 1 << 20, true)
    }

    #[test]
    fn put_get_round_trip_memory() {
        let s = MemoryStore::new();
        s.put("results/r/0-0", b"abc").unwrap();
        assert_eq!(s.get("results/r/0-0").unwrap(), b"abc");
    }

    #[test]
    fn get_unknown_key_fails() {
        let s = MemoryStore::new();
        assert_eq!(s.get("nope"), Err(StoreError::KeyNotFound("nope".into())));
    }

    #[test]
    fn double_put_same_key_fails() {
        let s = MemoryStore::new();
        s.put("k", b"1").unwrap();
        assert_eq!(s.put("k", b"2"), Err(StoreError::KeyExists("k".into())));
        assert_eq!(s.get("k").unwrap(), b"1");
    }

    #[test]
    fn dir_store_behaves_like_memory_store() {
        let dir = tempfile::tempdir().unwrap();
        let s = DirStore::new(dir.path().join("store")).unwrap();
        s.put(&result_key("run", 3, 1), b"xyz").unwrap();
        assert_eq!(s.get("results/run/3-1").unwrap(), b"xyz");
        assert_eq!(
            s.put("results/run/3-1", b"other"),
            Err(StoreError::KeyExists("results/run/3-1".into()))
        );
        assert_eq!(s.get("results/run/9-0"), Err(StoreError::KeyNotFound("results/run/9-0".into())));
        assert_eq!(s.keys(), vec!["results/run/3-1".to_string()]);
    }

    #[test]
    fn fetch_with_valid_token_has_closed_form_cost() {
        let d = gated_dataset();
        let cfg = DataSourceConfig {
            valid_tokens: vec!["tok".into()],
            ..DataSourceConfig::default()
        };
        let src = SimulatedSource::new(cfg);
        let cluster = d.files[0].clusters[0];
        let stats = src.fetch_cluster(&d, 0, 0, &cluster, Some("tok"), 0).unwrap();
        assert_eq!(stats.bytes, 1 << 20);
        // 50 ms latency + 1 MiB / (100 MiB/s) = 50_000 us + 10_000 us.
        assert_eq!(stats.duration_us, 60_000);
    }

    #[test]
    fn fetch_without_token_is_auth_error() {
        let d = gated_dataset();
        let src = SimulatedSource::new(DataSourceConfig::default());
        let cluster = d.files[0].clusters[0];
        assert_eq!(
            src.fetch_cluster(&d, 0, 0, &cluster, None, 0),
            Err(SourceError::Auth { file: 0 })
        );
        assert_eq!(
            src.fetch_cluster(&d, 0, 0, &cluster, Some("wrong"), 0),
            Err(SourceError::Auth { file: 0 })
        );
        assert!(src.ledger().is_empty(), "failed fetches must not count as reads");
    }

    #[test]
    fn public_file_needs_no_token() {
        let mut d = gated_dataset();
        d.files[0].requires_token = false;
        let src = SimulatedSource::new(DataSourceConfig { valid_tokens: vec![], ..Default::default() });
        let cluster = d.files[0].clusters[0];
        assert!(src.fetch_cluster(&d, 0, 0, &cluster, None, 0).is_ok());
    }

    #[test]
    fn auth_is_monotone_in_token_set() {
        let d = gated_dataset();
        let cluster = d.files[0].clusters[0];
        let with = SimulatedSource::new(DataSourceConfig {
            valid_tokens: vec!["a".into(), "b".into()],
            ..Default::default()
        });
        let without = SimulatedSource::new(DataSourceConfig {
            valid_tokens: vec!["a".into()],
            ..Default::default()
        });
        for tok in [Some("a"), Some("b"), None] {
            let big = with.fetch_cluster(&d, 0, 0, &cluster, tok, 0).is_ok();
            let small = without.fetch_cluster(&d, 0, 0, &cluster, tok, 0).is_ok();
            // Removing a token can only turn successes into failures.
            assert!(big || !small);
        }
    }

    #[test]
    fn ledger_counts_each_fetch() {
        let d = gated_dataset();
        let cfg = DataSourceConfig { valid_tokens: vec!["t".into()], ..Default::default() };
        let src = SimulatedSource::new(cfg);
        let cluster = d.files[0].clusters[0];
        src.fetch_cluster(&d, 0, 0, &cluster, Some("t"), 0).unwrap();
        src.fetch_cluster(&d, 0, 0, &cluster, Some("t"), 1).unwrap();
        src.fetch_cluster(&d, 1, 1, &cluster, Some("t"), 0).unwrap();
        let ledger = src.ledger();
        assert_eq!(ledger[&(0, 0)], 2);
        assert_eq!(ledger[&(1, 1)], 1);
    }

    #[test]
    fn injected_io_failures_are_deterministic() {
        let d = gated_dataset();
        let cfg = DataSourceConfig {
            valid_tokens: vec!["t".into()],
            io_failure_probability: 0.5,
            seed: 77,
            ..Default::default()
        };
        let src1 = SimulatedSource::new(cfg.clone());
        let src2 = SimulatedSource::new(cfg);
        let cluster = d.files[0].clusters[0];
        for ci in 0..2u32 {
            for attempt in 0..8u32 {
                let a = src1.fetch_cluster(&d, 0, ci, &cluster, Some("t"), attempt);
                let b = src2.fetch_cluster(&d, 0, ci, &cluster, Some("t"), attempt);
                assert_eq!(a, b);
            }
        }
    }
}
