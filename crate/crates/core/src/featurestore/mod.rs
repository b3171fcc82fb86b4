//! Content-keyed on-disk cache of feature records.
//!
//! Each branch owns one append-only shard (`<branch>.shard`) and an index
//! sidecar (`<branch>.idx`). A writer appends the record, flushes it, then
//! publishes it by appending an index entry; readers only see published
//! entries. Entries are immutable: the backend version is part of the key and
//! is the only way to replace a feature.

mod codec;

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rayon::prelude::*;
use thiserror::Error;

pub use codec::{decode_index, decode_record, encode_index_entry, encode_record, record_len};

use crate::dataset::Sample;
use crate::encoders::{encode_checked, BranchId, EncodeError, FeatureBundle, FeatureRecord, Registry, NUM_BRANCHES};

/// Environment variable overriding the configured cache root.
pub const CACHE_ROOT_ENV: &str = "SENTIFUSE_CACHE";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry `{key}`: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("cache entry `{0}` already holds a different payload; bump the backend version")]
    Conflict(String),
    #[error("invalid cache key: {0}")]
    InvalidKey(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub sample_id: String,
    pub branch: BranchId,
    pub backend_version: String,
}

impl CacheKey {
    pub fn new(sample_id: &str, branch: BranchId, backend_version: &str) -> Result<Self, StoreError> {
        if sample_id.is_empty() || backend_version.is_empty() {
            return Err(StoreError::InvalidKey("sample id and backend version must be non-empty".into()));
        }
        if sample_id.len() > u16::MAX as usize || backend_version.len() > u16::MAX as usize {
            return Err(StoreError::InvalidKey("key component longer than 65535 bytes".into()));
        }
        Ok(Self {
            sample_id: sample_id.to_string(),
            branch,
            backend_version: backend_version.to_string(),
        })
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.sample_id, self.branch, self.backend_version)
    }
}

#[derive(Default)]
struct Shard {
    /// (sample_id, version) -> record offset.
    index: HashMap<(String, String), u64>,
    /// Bytes of the index file already loaded.
    index_len: u64,
}

pub struct FeatureStore {
    root: PathBuf,
    shards: [RwLock<Shard>; NUM_BRANCHES],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl FeatureStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        let store = Self {
            root,
            shards: Default::default(),
        };
        for b in BranchId::ALL {
            let mut shard = store.shards[b.index()].write().unwrap();
            store.refresh(b, &mut shard)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn shard_path(&self, branch: BranchId) -> PathBuf {
        self.root.join(format!("{}.shard", branch.name()))
    }

    pub fn index_path(&self, branch: BranchId) -> PathBuf {
        self.root.join(format!("{}.idx", branch.name()))
    }

    /// Loads index entries published since the last refresh.
    fn refresh(&self, branch: BranchId, shard: &mut Shard) -> Result<(), StoreError> {
        let path = self.index_path(branch);
        let mut file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        file.seek(SeekFrom::Start(shard.index_len)).map_err(io_err(&path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(&path))?;
        let (entries, valid) = decode_index(&bytes)?;
        for e in entries {
            shard.index.insert((e.sample_id, e.version), e.offset);
        }
        shard.index_len += valid as u64;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.read().unwrap().index.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_at(&self, key: &CacheKey, offset: u64) -> Result<FeatureRecord, StoreError> {
        let path = self.shard_path(key.branch);
        let corrupt = |reason: &str| StoreError::Corrupt {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let mut file = File::open(&path).map_err(io_err(&path))?;
        file.seek(SeekFrom::Start(offset)).map_err(io_err(&path))?;
        let mut header = [0u8; 4];
        file.read_exact(&mut header).map_err(|_| corrupt("truncated record"))?;
        let len = codec::record_len(header).ok_or_else(|| corrupt("length prefix out of range"))?;
        let mut bytes = vec![0u8; len];
        bytes[..4].copy_from_slice(&header);
        file.read_exact(&mut bytes[4..]).map_err(|_| corrupt("truncated record"))?;
        let (stored_key, record) = decode_record(&bytes, &key.to_string())?;
        if &stored_key != key {
            return Err(corrupt(&format!("index points at record for `{stored_key}`")));
        }
        Ok(record)
    }

    /// The stored record, or `None` for an unknown key.
    pub fn get(&self, key: &CacheKey) -> Result<Option<FeatureRecord>, StoreError> {
        let offset = {
            let shard = self.shards[key.branch.index()].read().unwrap();
            shard
                .index
                .get(&(key.sample_id.clone(), key.backend_version.clone()))
                .copied()
        };
        let offset = match offset {
            Some(o) => o,
            None => {
                // Another process may have published since we loaded.
                let mut shard = self.shards[key.branch.index()].write().unwrap();
                self.refresh(key.branch, &mut shard)?;
                match shard.index.get(&(key.sample_id.clone(), key.backend_version.clone())) {
                    Some(o) => *o,
                    None => return Ok(None),
                }
            }
        };
        self.read_at(key, offset).map(Some)
    }

    /// Stores `record` under `key`. Storing an identical payload again is a
    /// no-op; a different payload under an existing key is a conflict.
    pub fn put(&self, key: &CacheKey, record: &FeatureRecord) -> Result<(), StoreError> {
        record.validate()?;
        if record.branch != key.branch || record.backend_version != key.backend_version {
            return Err(StoreError::InvalidKey(format!(
                "record ({}, {}) does not match key `{key}`",
                record.branch, record.backend_version
            )));
        }
        let mut shard = self.shards[key.branch.index()].write().unwrap();
        let shard_path = self.shard_path(key.branch);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&shard_path)
            .map_err(io_err(&shard_path))?;
        // Cross-process single writer per shard.
        file.lock().map_err(io_err(&shard_path))?;
        self.refresh(key.branch, &mut shard)?;

        let map_key = (key.sample_id.clone(), key.backend_version.clone());
        if let Some(&offset) = shard.index.get(&map_key) {
            let existing = self.read_at(key, offset)?;
            return if same_payload(&existing, record) {
                Ok(())
            } else {
                Err(StoreError::Conflict(key.to_string()))
            };
        }

        let offset = file.seek(SeekFrom::End(0)).map_err(io_err(&shard_path))?;
        file.write_all(&encode_record(key, record)).map_err(io_err(&shard_path))?;
        file.flush().map_err(io_err(&shard_path))?;
        file.sync_data().map_err(io_err(&shard_path))?;

        let index_path = self.index_path(key.branch);
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(io_err(&index_path))?;
        let entry = encode_index_entry(&key.sample_id, &key.backend_version, offset);
        index.write_all(&entry).map_err(io_err(&index_path))?;
        index.flush().map_err(io_err(&index_path))?;
        shard.index.insert(map_key, offset);
        shard.index_len += entry.len() as u64;
        Ok(())
    }
}

fn same_payload(a: &FeatureRecord, b: &FeatureRecord) -> bool {
    a.present == b.present
        && a.vector.len() == b.vector.len()
        && a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Result of [`materialize_bundles`].
#[derive(Debug, Default)]
pub struct Materialized {
    /// Bundles for the samples that succeeded, in input order.
    pub bundles: Vec<FeatureBundle>,
    /// Samples that failed (keep-going mode only).
    pub failures: Vec<(String, StoreError)>,
    pub encode_calls: usize,
    pub cache_hits: usize,
}

struct SampleOutcome {
    bundle: Result<FeatureBundle, StoreError>,
    encode_calls: usize,
    cache_hits: usize,
}

fn materialize_one(store: Option<&FeatureStore>, sample: &Sample, registry: &Registry) -> SampleOutcome {
    let mut encode_calls = 0;
    let mut cache_hits = 0;
    let mut run = || -> Result<FeatureBundle, StoreError> {
        let mut records = Vec::with_capacity(NUM_BRANCHES);
        for branch in BranchId::ALL {
            let backend = registry.get(branch).ok_or(EncodeError::MissingBranch(branch))?;
            let version = &backend.descriptor().version;
            let cached = match store {
                Some(s) => s.get(&CacheKey::new(&sample.id, branch, version)?)?,
                None => None,
            };
            let record = match cached {
                Some(r) => {
                    cache_hits += 1;
                    r
                }
                None => {
                    encode_calls += 1;
                    let r = encode_checked(backend, sample)?;
                    if let Some(s) = store {
                        s.put(&CacheKey::new(&sample.id, branch, version)?, &r)?;
                    }
                    r
                }
            };
            records.push(record);
        }
        Ok(FeatureBundle::new(sample.id.clone(), records)?)
    };
    let bundle = run();
    SampleOutcome {
        bundle,
        encode_calls,
        cache_hits,
    }
}

/// Produces one bundle per sample, serving hits from `store` and encoding
/// (then caching) misses. With `store = None` every record is encoded.
///
/// Without `keep_going` the first failure is returned as the error; with it,
/// failures are collected and the remaining samples still processed.
pub fn materialize_bundles(
    store: Option<&FeatureStore>,
    samples: &[Sample],
    registry: &Registry,
    keep_going: bool,
) -> Result<Materialized, StoreError> {
    registry.check_complete()?;
    let concurrent = BranchId::ALL.iter().all(|b| registry.get(*b).is_some_and(|be| be.concurrent()));
    let outcomes: Vec<SampleOutcome> = if concurrent {
        samples.par_iter().map(|s| materialize_one(store, s, registry)).collect()
    } else {
        samples.iter().map(|s| materialize_one(store, s, registry)).collect()
    };
    let mut out = Materialized::default();
    for (sample, outcome) in samples.iter().zip(outcomes) {
        out.encode_calls += outcome.encode_calls;
        out.cache_hits += outcome.cache_hits;
        match outcome.bundle {
            Ok(b) => out.bundles.push(b),
            Err(e) if keep_going => out.failures.push((sample.id.clone(), e)),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{BackendDescriptor, PresenceRule, StubBackend};

    fn record(branch: BranchId, v: Vec<f32>) -> FeatureRecord {
        FeatureRecord::present(branch, v, "v1")
    }

    #[test]
    fn put_get_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let key = CacheKey::new("s1", BranchId::Face, "v1").unwrap();
        let r = record(BranchId::Face, vec![-0.0, f32::MIN_POSITIVE / 2.0, 1.5, f32::MAX]);
        store.put(&key, &r).unwrap();
        let got = store.get(&key).unwrap().unwrap();
        assert!(same_payload(&got, &r));
        assert_eq!(got.vector[0].to_bits(), (-0.0f32).to_bits());

        let reopened = FeatureStore::open(dir.path()).unwrap();
        assert!(same_payload(&reopened.get(&key).unwrap().unwrap(), &r));
    }

    #[test]
    fn unknown_key_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let key = CacheKey::new("nope", BranchId::Scene, "v1").unwrap();
        assert!(store.get(&key).unwrap().is_none());
    }

    #[test]
    fn identical_reput_ok_conflicting_reput_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let key = CacheKey::new("s", BranchId::Scene, "v1").unwrap();
        store.put(&key, &record(BranchId::Scene, vec![1.0, 2.0])).unwrap();
        store.put(&key, &record(BranchId::Scene, vec![1.0, 2.0])).unwrap();
        assert_eq!(store.len(), 1);
        let err = store.put(&key, &record(BranchId::Scene, vec![1.0, 2.5])).unwrap_err();
        assert!(matches!(err, StoreError::Conflict(k) if k == "s/scene@v1"));
        // A new version is a new key.
        let key2 = CacheKey::new("s", BranchId::Scene, "v2").unwrap();
        let mut r2 = record(BranchId::Scene, vec![1.0, 2.5]);
        r2.backend_version = "v2".into();
        store.put(&key2, &r2).unwrap();
    }

    #[test]
    fn truncated_shard_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let key = CacheKey::new("s", BranchId::Ocr, "v1").unwrap();
        store.put(&key, &record(BranchId::Ocr, vec![1.0; 16])).unwrap();
        let path = store.shard_path(BranchId::Ocr);
        let len = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 3).unwrap();
        let err = FeatureStore::open(dir.path()).unwrap().get(&key).unwrap_err();
        assert!(matches!(&err, StoreError::Corrupt { key, .. } if key == "s/ocr@v1"), "{err}");
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let key = CacheKey::new("s", BranchId::Ocr, "v1").unwrap();
        store.put(&key, &record(BranchId::Ocr, vec![0.25; 4])).unwrap();
        let path = store.shard_path(BranchId::Ocr);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get(&key), Err(StoreError::Corrupt { .. })));
    }

    #[test]
    fn key_components_must_be_non_empty() {
        assert!(CacheKey::new("", BranchId::Ocr, "v").is_err());
        assert!(CacheKey::new("a", BranchId::Ocr, "").is_err());
    }

    #[test]
    fn hot_run_serves_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let mut registry = Registry::new();
        for b in BranchId::ALL {
            let d = BackendDescriptor::new(b, 3, "v1").unwrap();
            let rule = if b.can_be_absent() { PresenceRule::HashEven } else { PresenceRule::Always };
            registry.insert(Box::new(StubBackend::new(d, rule).unwrap()));
        }
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                id: format!("s{i}"),
                text: String::new(),
                text_norm: String::new(),
                image_ref: String::new(),
                label: 0,
            })
            .collect();
        let cold = materialize_bundles(Some(&store), &samples, &registry, false).unwrap();
        assert_eq!(cold.encode_calls, 40);
        let hot = materialize_bundles(Some(&store), &samples, &registry, false).unwrap();
        assert_eq!(hot.encode_calls, 0);
        assert_eq!(hot.cache_hits, 40);
        assert_eq!(hot.bundles, cold.bundles);
        let uncached = materialize_bundles(None, &samples, &registry, false).unwrap();
        assert_eq!(uncached.bundles, cold.bundles);
        assert!(materialize_bundles(Some(&store), &[], &registry, false).unwrap().bundles.is_empty());
    }
}
