//! Shared object storage: immutable put/get/list over slash-separated keys.
//!
//! Object storage is the only channel between write nodes and search nodes.
//! Every node talks to it through an [`InstrumentedStore`] carrying that
//! node's own I/O counters, so isolation can be asserted from counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object `{0}` already exists")]
    AlreadyExists(String),
    #[error("object `{0}` not found")]
    NotFound(String),
    #[error("invalid object key `{0}`")]
    InvalidKey(String),
    #[error("injected store failure on `{0}`")]
    Injected(String),
    #[error("store i/o error: {0}")]
    Io(#[from] io::Error),
}

pub trait ObjectStore: Send + Sync {
    /// Creates `key`. Objects are immutable: an existing key is an error.
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError>;
    /// Keys starting with `prefix` and strictly greater than `after`, sorted.
    fn list(&self, prefix: &str, after: &str) -> Result<Vec<String>, StoreError>;
}

fn validate_key(key: &str) -> Result<(), StoreError> {
    let bad = key.is_empty()
        || key.starts_with('/')
        || key.ends_with('/')
        || key.split('/').any(|p| p.is_empty() || p == "." || p == ".." || p.starts_with(".tmp-"));
    if bad {
        Err(StoreError::InvalidKey(key.to_string()))
    } else {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemoryStore {
    objects: RwLock<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemoryStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        validate_key(key)?;
        let mut objects = self.objects.write().unwrap();
        if objects.contains_key(key) {
            return Err(StoreError::AlreadyExists(key.to_string()));
        }
        objects.insert(key.to_string(), Arc::new(bytes.to_vec()));
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.objects
            .read()
            .unwrap()
            .get(key)
            .map(|b| b.as_ref().clone())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    fn list(&self, prefix: &str, after: &str) -> Result<Vec<String>, StoreError> {
        let objects = self.objects.read().unwrap();
        Ok(objects
            .range::<str, _>((std::ops::Bound::Excluded(after), std::ops::Bound::Unbounded))
            .map(|(k, _)| k)
            .skip_while(|k| k.as_str() < prefix)
            .take_while(|k| k.starts_with(prefix))
            .cloned()
            .collect())
    }
}

/// Keys map to files under `root`. A put writes a temp file and hard-links
/// it into place, which fails atomically if the key already exists.
pub struct FsStore {
    root: PathBuf,
    tmp_seq: AtomicU64,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FsStore { root, tmp_seq: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
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
            if name.starts_with(".tmp-") {
                continue;
            }
            let key = if rel.is_empty() { name.clone() } else { format!("{rel}/{name}") };
            if entry.file_type()?.is_dir() {
                self.walk(&entry.path(), &key, out)?;
            } else {
                out.push(key);
            }
        }
        Ok(())
    }
}

impl ObjectStore for FsStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        validate_key(key)?;
        let path = self.root.join(key);
        let dir = path.parent().expect("key has a parent under root");
        fs::create_dir_all(dir)?;
        if path.exists() {
            return Err(StoreError::AlreadyExists(key.to_string()));
        }
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.tmp_seq.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::AlreadyExists(key.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        validate_key(key)?;
        fs::read(self.root.join(key)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            _ => e.into(),
        })
    }

    fn list(&self, prefix: &str, after: &str) -> Result<Vec<String>, StoreError> {
        let dir_part = prefix.rfind('/').map(|i| &prefix[..i]).unwrap_or("");
        let mut keys = Vec::new();
        self.walk(&self.root.join(dir_part), dir_part, &mut keys)?;
        keys.retain(|k| k.starts_with(prefix) && k.as_str() > after);
        keys.sort();
        Ok(keys)
    }
}

/// Per-node I/O counters.
#[derive(Debug, Default)]
pub struct IoCounters {
    pub puts: AtomicU64,
    pub put_bytes: AtomicU64,
    pub gets: AtomicU64,
    pub get_bytes: AtomicU64,
    pub lists: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IoStats {
    pub puts: u64,
    pub put_bytes: u64,
    pub gets: u64,
    pub get_bytes: u64,
    pub lists: u64,
}

impl IoCounters {
    pub fn stats(&self) -> IoStats {
        IoStats {
            puts: self.puts.load(Ordering::Relaxed),
            put_bytes: self.put_bytes.load(Ordering::Relaxed),
            gets: self.gets.load(Ordering::Relaxed),
            get_bytes: self.get_bytes.load(Ordering::Relaxed),
            lists: self.lists.load(Ordering::Relaxed),
        }
    }
}

/// A node's handle on the shared store. Counts only successful calls' bytes
/// but every attempted put.
#[derive(Clone)]
pub struct InstrumentedStore {
    inner: Arc<dyn ObjectStore>,
    counters: Arc<IoCounters>,
}

impl InstrumentedStore {
    pub fn new(inner: Arc<dyn ObjectStore>) -> Self {
        InstrumentedStore { inner, counters: Arc::new(IoCounters::default()) }
    }

    pub fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }

    pub fn stats(&self) -> IoStats {
        self.counters.stats()
    }

    pub fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.counters.puts.fetch_add(1, Ordering::Relaxed);
        let r = self.inner.put(key, bytes);
        if r.is_ok() {
            self.counters.put_bytes.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        }
        r
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.counters.gets.fetch_add(1, Ordering::Relaxed);
        let r = self.inner.get(key)?;
        self.counters.get_bytes.fetch_add(r.len() as u64, Ordering::Relaxed);
        Ok(r)
    }

    pub fn list(&self, prefix: &str, after: &str) -> Result<Vec<String>, StoreError> {
        self.counters.lists.fetch_add(1, Ordering::Relaxed);
        self.inner.list(prefix, after)
    }
}

/// How an injected put failure behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutFault {
    /// Nothing is written and the put fails.
    BeforeWrite,
    /// The object is written but the caller sees a failure.
    AfterWrite,
}

type FaultFn = Box<dyn FnMut(&str) -> Option<PutFault> + Send>;

/// Test wrapper that fails puts according to a caller-supplied schedule.
pub struct FaultyStore {
    inner: Arc<dyn ObjectStore>,
    schedule: Mutex<FaultFn>,
}

impl FaultyStore {
    pub fn new(inner: Arc<dyn ObjectStore>, schedule: impl FnMut(&str) -> Option<PutFault> + Send + 'static) -> Self {
        FaultyStore { inner, schedule: Mutex::new(Box::new(schedule)) }
    }
}

impl ObjectStore for FaultyStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let fault = (self.schedule.lock().unwrap())(key);
        match fault {
            None => self.inner.put(key, bytes),
            Some(PutFault::BeforeWrite) => Err(StoreError::Injected(key.to_string())),
            Some(PutFault::AfterWrite) => {
                self.inner.put(key, bytes)?;
                Err(StoreError::Injected(key.to_string()))
            }
        }
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.inner.get(key)
    }

    fn list(&self, prefix: &str, after: &str) -> Result<Vec<String>, StoreError> {
        self.inner.list(prefix, after)
    }
}
