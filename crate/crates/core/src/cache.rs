//! Content-addressed store of file resources keyed by causal hash.
//!
//! On-disk layout (version 1):
//!
//! ```text
//! <root>/version                      "1"
//! <root>/objects/<2 hex>/<62 hex>/payload
//! <root>/objects/<2 hex>/<62 hex>/meta
//! <root>/locks/<64 hex>.lock
//! <root>/staging/<pid>-<nonce>-<seq>/
//! ```
//!
//! An entry is published by copying the payload into a private staging
//! directory and renaming that directory into `objects/` in one step, so a
//! reader sees either nothing or the complete entry. Staging directories left
//! behind by dead processes are removed when a store is opened.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hash::{content_hash_path, CausalHash};

pub const STORE_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("store entry {0} is corrupt (object without payload or meta)")]
    StoreCorrupt(CausalHash),
    #[error("caller does not hold the lock for {0}")]
    NotHoldingLock(CausalHash),
    #[error("source {0} does not exist")]
    SourceMissing(PathBuf),
    #[error("{key}: expected a {expected}, found a {found}")]
    KindMismatch {
        key: CausalHash,
        expected: EntryKind,
        found: EntryKind,
    },
    #[error("timed out waiting for the lock on {0}")]
    LockTimeout(CausalHash),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

type Result<T> = std::result::Result<T, CacheError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Directory,
}

impl EntryKind {
    pub fn of_directory_flag(directory: bool) -> Self {
        if directory {
            EntryKind::Directory
        } else {
            EntryKind::File
        }
    }
}

impl std::fmt::Display for EntryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntryKind::File => "file",
            EntryKind::Directory => "directory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: CausalHash,
    pub kind: EntryKind,
    pub payload: PathBuf,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub size: u64,
    pub integrity: CausalHash,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    key: CausalHash,
    kind: EntryKind,
    size: u64,
    created_at: u64,
    integrity: CausalHash,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyFailure {
    pub key: CausalHash,
    pub reason: String,
}

static TOKENS: AtomicU64 = AtomicU64::new(1);

/// Exclusive hold on one key. Dropping the guard releases the lock.
pub struct LockGuard {
    key: CausalHash,
    token: u64,
    provider: usize,
    held: Option<Box<dyn Send + Sync>>,
}

impl LockGuard {
    pub fn new(key: CausalHash, provider: usize, held: Box<dyn Send + Sync>) -> Self {
        LockGuard {
            key,
            token: TOKENS.fetch_add(1, Ordering::Relaxed),
            provider,
            held: Some(held),
        }
    }

    pub fn key(&self) -> CausalHash {
        self.key
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn is_held(&self) -> bool {
        self.held.is_some()
    }

    /// Releases the lock. Calling it again is a no-op.
    pub fn release(&mut self) {
        self.held = None;
    }
}

impl std::fmt::Debug for LockGuard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LockGuard")
            .field("key", &self.key)
            .field("token", &self.token)
            .field("held", &self.is_held())
            .finish()
    }
}

/// Per-key mutual exclusion shared by every process using a store.
pub trait LockProvider: Send + Sync {
    /// Non-blocking attempt. `Ok(None)` when another holder has the key.
    fn try_acquire(&self, key: CausalHash) -> Result<Option<LockGuard>>;

    /// Identifies guards minted by this provider.
    fn id(&self) -> usize;
}

/// Advisory `flock` locks, one file per key.
pub struct FileLockProvider {
    dir: PathBuf,
}

impl FileLockProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileLockProvider { dir: dir.into() }
    }
}

impl LockProvider for FileLockProvider {
    fn try_acquire(&self, key: CausalHash) -> Result<Option<LockGuard>> {
        let path = self.dir.join(format!("{key}.lock"));
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|e| CacheError::StoreUnavailable(format!("{}: {e}", path.display())))?;
        match file.try_lock() {
            Ok(()) => Ok(Some(LockGuard::new(key, self.id(), Box::new(file)))),
            Err(fs::TryLockError::WouldBlock) => Ok(None),
            Err(fs::TryLockError::Error(e)) => Err(CacheError::StoreUnavailable(format!(
                "{}: {e}",
                path.display()
            ))),
        }
    }

    fn id(&self) -> usize {
        self as *const Self as usize
    }
}

/// A payload copied into staging but not yet visible to readers.
pub struct StagedEntry<'a> {
    store: &'a CacheStore,
    key: CausalHash,
    dir: Option<PathBuf>,
}

impl StagedEntry<'_> {
    pub fn path(&self) -> &Path {
        self.dir.as_deref().expect("staged entry not yet consumed")
    }

    /// Makes the entry visible with a single rename.
    pub fn commit(mut self) -> Result<CacheEntry> {
        let staged = self.dir.take().expect("staged entry not yet consumed");
        let target = self.store.object_dir(&self.key);
        let parent = target.parent().expect("object dir has a parent");
        fs::create_dir_all(parent).map_err(io_at(parent))?;
        match fs::rename(&staged, &target) {
            Ok(()) => {}
            Err(e) if target.exists() => {
                // another publisher won; theirs is authoritative
                let _ = e;
                remove_tree(&staged);
            }
            Err(e) => {
                remove_tree(&staged);
                return Err(CacheError::Io {
                    path: target,
                    source: e,
                });
            }
        }
        self.store
            .lookup(&self.key)?
            .ok_or(CacheError::StoreCorrupt(self.key))
    }
}

impl Drop for StagedEntry<'_> {
    fn drop(&mut self) {
        if let Some(dir) = self.dir.take() {
            remove_tree(&dir);
        }
    }
}

#[derive(Clone)]
pub struct CacheStore {
    root: PathBuf,
    locks: Arc<dyn LockProvider>,
}

impl std::fmt::Debug for CacheStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheStore").field("root", &self.root).finish()
    }
}

static STAGE_SEQ: AtomicU64 = AtomicU64::new(0);

fn process_nonce() -> u64 {
    use std::sync::OnceLock;
    static NONCE: OnceLock<u64> = OnceLock::new();
    *NONCE.get_or_init(|| {
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_nanos() as u64;
        t ^ ((std::process::id() as u64) << 32)
    })
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs()
}

fn pid_alive(pid: i32) -> bool {
    // SAFETY: signal 0 performs only the existence/permission check.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

impl CacheStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root: PathBuf = root.into();
        for sub in ["objects", "locks", "staging"] {
            let p = root.join(sub);
            fs::create_dir_all(&p)
                .map_err(|e| CacheError::StoreUnavailable(format!("{}: {e}", p.display())))?;
        }
        let version = root.join("version");
        match fs::read_to_string(&version) {
            Ok(v) if v.trim() == STORE_VERSION => {}
            Ok(v) => {
                return Err(CacheError::StoreUnavailable(format!(
                    "unsupported store version `{}`",
                    v.trim()
                )))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let tmp = root.join(format!("version.{}.tmp", std::process::id()));
                fs::write(&tmp, STORE_VERSION).map_err(io_at(&tmp))?;
                fs::rename(&tmp, &version).map_err(io_at(&version))?;
            }
            Err(e) => return Err(CacheError::StoreUnavailable(e.to_string())),
        }
        let locks = Arc::new(FileLockProvider::new(root.join("locks")));
        let store = CacheStore { root, locks };
        store.sweep_staging();
        Ok(store)
    }

    /// Replaces the lock provider, e.g. with a networked lock service.
    pub fn with_lock_provider(mut self, locks: Arc<dyn LockProvider>) -> Self {
        self.locks = locks;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_dir(&self, key: &CausalHash) -> PathBuf {
        let hex = key.to_hex();
        self.root.join("objects").join(&hex[..2]).join(&hex[2..])
    }

    fn sweep_staging(&self) {
        let Ok(entries) = fs::read_dir(self.root.join("staging")) else {
            return;
        };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let pid = name
                .to_str()
                .and_then(|n| n.split('-').next())
                .and_then(|p| p.parse::<i32>().ok());
            match pid {
                Some(pid) if pid_alive(pid) => {}
                _ => remove_tree(&entry.path()),
            }
        }
    }

    pub fn lookup(&self, key: &CausalHash) -> Result<Option<CacheEntry>> {
        let dir = self.object_dir(key);
        if !dir.exists() {
            return Ok(None);
        }
        let payload = dir.join("payload");
        let meta_path = dir.join("meta");
        let meta = match fs::read(&meta_path) {
            Ok(bytes) => serde_json::from_slice::<Meta>(&bytes)
                .map_err(|_| CacheError::StoreCorrupt(*key))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CacheError::StoreCorrupt(*key))
            }
            Err(e) => return Err(io_at(&meta_path)(e)),
        };
        if fs::symlink_metadata(&payload).is_err() || meta.key != *key {
            return Err(CacheError::StoreCorrupt(*key));
        }
        Ok(Some(CacheEntry {
            key: *key,
            kind: meta.kind,
            payload,
            created_at: meta.created_at,
            size: meta.size,
            integrity: meta.integrity,
        }))
    }

    pub fn try_acquire(&self, key: &CausalHash) -> Result<Option<LockGuard>> {
        self.locks.try_acquire(*key)
    }

    /// Blocks until the lock on `key` is held, or `timeout` elapses.
    pub fn acquire(&self, key: &CausalHash, timeout: Option<Duration>) -> Result<LockGuard> {
        self.acquire_cancellable(key, timeout, &|| false)?
            .ok_or(CacheError::LockTimeout(*key))
    }

    /// Like [`acquire`](Self::acquire), but gives up with `Ok(None)` once
    /// `cancelled` returns true.
    pub fn acquire_cancellable(
        &self,
        key: &CausalHash,
        timeout: Option<Duration>,
        cancelled: &dyn Fn() -> bool,
    ) -> Result<Option<LockGuard>> {
        let start = Instant::now();
        let mut pause = Duration::from_millis(1);
        loop {
            if let Some(guard) = self.locks.try_acquire(*key)? {
                return Ok(Some(guard));
            }
            if cancelled() {
                return Ok(None);
            }
            if let Some(t) = timeout {
                if start.elapsed() >= t {
                    return Err(CacheError::LockTimeout(*key));
                }
            }
            std::thread::sleep(pause);
            pause = (pause * 2).min(Duration::from_millis(20));
        }
    }

    fn check_guard(&self, guard: &LockGuard, key: &CausalHash) -> Result<()> {
        if guard.key != *key || !guard.is_held() || guard.provider != self.locks.id() {
            return Err(CacheError::NotHoldingLock(*key));
        }
        Ok(())
    }

    /// Copies `source` into a fresh staging directory without publishing it.
    pub fn stage(
        &self,
        guard: &LockGuard,
        key: &CausalHash,
        source: &Path,
        kind: EntryKind,
    ) -> Result<StagedEntry<'_>> {
        self.check_guard(guard, key)?;
        let meta = fs::symlink_metadata(source).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                CacheError::SourceMissing(source.to_path_buf())
            } else {
                io_at(source)(e)
            }
        })?;
        let found = if meta.is_dir() {
            EntryKind::Directory
        } else if meta.is_file() {
            EntryKind::File
        } else {
            return Err(CacheError::SourceMissing(source.to_path_buf()));
        };
        if found != kind {
            return Err(CacheError::KindMismatch {
                key: *key,
                expected: kind,
                found,
            });
        }

        let name = format!(
            "{}-{:x}-{}",
            std::process::id(),
            process_nonce(),
            STAGE_SEQ.fetch_add(1, Ordering::Relaxed)
        );
        let dir = self.root.join("staging").join(name);
        fs::create_dir(&dir).map_err(io_at(&dir))?;
        let staged = StagedEntry {
            store: self,
            key: *key,
            dir: Some(dir.clone()),
        };
        let payload = dir.join("payload");
        let size = copy_tree(source, &payload)?;
        let integrity = integrity_of(&payload, kind)?;
        let meta = Meta {
            version: 1,
            key: *key,
            kind,
            size,
            created_at: now_secs(),
            integrity,
        };
        let meta_path = dir.join("meta");
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes"))
            .map_err(io_at(&meta_path))?;
        seal(&payload);
        Ok(staged)
    }

    /// Publishes `source` under `key`. A no-op returning the existing entry
    /// when the key is already present.
    pub fn publish(
        &self,
        guard: &LockGuard,
        key: &CausalHash,
        source: &Path,
        kind: EntryKind,
    ) -> Result<CacheEntry> {
        self.check_guard(guard, key)?;
        if let Some(existing) = self.lookup(key)? {
            return Ok(existing);
        }
        self.stage(guard, key, source, kind)?.commit()
    }

    /// Removes an entry. Returns whether one was present.
    pub fn evict(&self, guard: &LockGuard, key: &CausalHash) -> Result<bool> {
        self.check_guard(guard, key)?;
        let dir = self.object_dir(key);
        if !dir.exists() {
            return Ok(false);
        }
        let trash = self.root.join("staging").join(format!(
            "{}-{:x}-evict-{}",
            std::process::id(),
            process_nonce(),
            STAGE_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        fs::rename(&dir, &trash).map_err(io_at(&dir))?;
        remove_tree(&trash);
        Ok(true)
    }

    pub fn entries(&self) -> Result<Vec<CacheEntry>> {
        let mut keys = Vec::new();
        let objects = self.root.join("objects");
        for fan in fs::read_dir(&objects).map_err(io_at(&objects))? {
            let fan = fan.map_err(io_at(&objects))?;
            let prefix = fan.file_name().to_string_lossy().into_owned();
            let Ok(children) = fs::read_dir(fan.path()) else {
                continue;
            };
            for child in children.flatten() {
                let rest = child.file_name().to_string_lossy().into_owned();
                if let Ok(key) = format!("{prefix}{rest}").parse::<CausalHash>() {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        let mut out = Vec::with_capacity(keys.len());
        for key in keys {
            if let Some(e) = self.lookup(&key)? {
                out.push(e);
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let entries = self.entries()?;
        Ok(StoreStats {
            entries: entries.len() as u64,
            bytes: entries.iter().map(|e| e.size).sum(),
        })
    }

    /// Re-hashes payloads and compares them with the digest recorded at
    /// publication. Checks one key, or every entry when `key` is `None`.
    pub fn verify(&self, key: Option<&CausalHash>) -> Result<Vec<VerifyFailure>> {
        let keys: Vec<CausalHash> = match key {
            Some(k) => vec![*k],
            None => {
                let mut keys = Vec::new();
                let objects = self.root.join("objects");
                for fan in fs::read_dir(&objects).map_err(io_at(&objects))?.flatten() {
                    let prefix = fan.file_name().to_string_lossy().into_owned();
                    for child in fs::read_dir(fan.path()).into_iter().flatten().flatten() {
                        let rest = child.file_name().to_string_lossy().into_owned();
                        if let Ok(k) = format!("{prefix}{rest}").parse() {
                            keys.push(k);
                        }
                    }
                }
                keys.sort();
                keys
            }
        };
        let mut failures = Vec::new();
        for k in keys {
            let entry = match self.lookup(&k) {
                Ok(Some(e)) => e,
                Ok(None) => {
                    failures.push(VerifyFailure {
                        key: k,
                        reason: "not present".into(),
                    });
                    continue;
                }
                Err(e) => {
                    failures.push(VerifyFailure {
                        key: k,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            match integrity_of(&entry.payload, entry.kind) {
                Ok(d) if d == entry.integrity => {}
                Ok(d) => failures.push(VerifyFailure {
                    key: k,
                    reason: format!("integrity mismatch: recorded {}, found {d}", entry.integrity),
                }),
                Err(e) => failures.push(VerifyFailure {
                    key: k,
                    reason: e.to_string(),
                }),
            }
        }
        Ok(failures)
    }
}

fn integrity_of(payload: &Path, kind: EntryKind) -> Result<CausalHash> {
    match kind {
        EntryKind::File => {
            let mut f = File::open(payload).map_err(io_at(payload))?;
            let mut hasher = Sha256::new();
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                let n = f.read(&mut buf).map_err(io_at(payload))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
            }
            Ok(CausalHash::from_bytes(hasher.finalize().into()))
        }
        EntryKind::Directory => content_hash_path(payload).map_err(|e| CacheError::Io {
            path: payload.to_path_buf(),
            source: io::Error::other(e.to_string()),
        }),
    }
}

/// Recursively copies a file or directory; returns total file bytes.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> Result<u64> {
    let meta = fs::symlink_metadata(src).map_err(io_at(src))?;
    if meta.is_file() {
        return fs::copy(src, dst).map_err(io_at(src));
    }
    if !meta.is_dir() {
        return Err(CacheError::Io {
            path: src.to_path_buf(),
            source: io::Error::other("unsupported entry"),
        });
    }
    fs::create_dir(dst).map_err(io_at(dst))?;
    let mut total = 0;
    for entry in fs::read_dir(src).map_err(io_at(src))? {
        let entry = entry.map_err(io_at(src))?;
        total += copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
    }
    Ok(total)
}

/// Marks a payload tree read-only.
pub(crate) fn seal(path: &Path) {
    if let Ok(meta) = fs::symlink_metadata(path) {
        if meta.is_dir() {
            if let Ok(entries) = fs::read_dir(path) {
                for e in entries.flatten() {
                    seal(&e.path());
                }
            }
            let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o555));
        } else if meta.is_file() {
            let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o444));
        }
    }
}

fn unseal(path: &Path) {
    if let Ok(meta) = fs::symlink_metadata(path) {
        if meta.is_dir() {
            let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o755));
            if let Ok(entries) = fs::read_dir(path) {
                for e in entries.flatten() {
                    unseal(&e.path());
                }
            }
        }
    }
}

pub(crate) fn remove_tree(path: &Path) {
    unseal(path);
    let _ = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Barrier, Mutex};

    fn key(b: u8) -> CausalHash {
        CausalHash::from_bytes([b; 32])
    }

    fn store() -> (tempfile::TempDir, CacheStore) {
        let d = tempfile::tempdir().unwrap();
        let s = CacheStore::open(d.path().join("cache")).unwrap();
        (d, s)
    }

    #[test]
    fn fresh_store_misses_and_is_versioned() {
        let (_d, s) = store();
        assert!(s.lookup(&key(1)).unwrap().is_none());
        assert_eq!(fs::read_to_string(s.root().join("version")).unwrap(), "1");
        assert_eq!(s.stats().unwrap(), StoreStats::default());
    }

    #[test]
    fn publish_then_lookup_roundtrip() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"payload bytes").unwrap();
        let g = s.acquire(&key(1), None).unwrap();
        let e = s.publish(&g, &key(1), &src, EntryKind::File).unwrap();
        let found = s.lookup(&key(1)).unwrap().unwrap();
        assert_eq!(found, e);
        assert_eq!(fs::read(&found.payload).unwrap(), b"payload bytes");
        let hex = key(1).to_hex();
        assert!(s
            .root()
            .join("objects")
            .join(&hex[..2])
            .join(&hex[2..])
            .join("meta")
            .exists());
    }

    #[test]
    fn publish_is_idempotent() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"x").unwrap();
        let g = s.acquire(&key(1), None).unwrap();
        let first = s.publish(&g, &key(1), &src, EntryKind::File).unwrap();
        let before = s.stats().unwrap();
        let second = s.publish(&g, &key(1), &src, EntryKind::File).unwrap();
        assert_eq!(first, second);
        assert_eq!(s.stats().unwrap(), before);
    }

    #[test]
    fn publish_directory_preserves_contents() {
        let (d, s) = store();
        let src = d.path().join("dir");
        fs::create_dir_all(src.join("sub")).unwrap();
        fs::write(src.join("a"), b"A").unwrap();
        fs::write(src.join("b"), b"BB").unwrap();
        fs::write(src.join("sub/c"), b"CCC").unwrap();
        let g = s.acquire(&key(2), None).unwrap();
        s.publish(&g, &key(2), &src, EntryKind::Directory).unwrap();
        let e = s.lookup(&key(2)).unwrap().unwrap();
        assert_eq!(e.kind, EntryKind::Directory);
        assert_eq!(e.size, 6);
        for rel in ["a", "b", "sub/c"] {
            assert_eq!(fs::read(src.join(rel)).unwrap(), fs::read(e.payload.join(rel)).unwrap());
        }
        assert_eq!(content_hash_path(&src).unwrap(), content_hash_path(&e.payload).unwrap());
    }

    #[test]
    fn publish_requires_matching_held_lock() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"x").unwrap();
        let mut g = s.acquire(&key(1), None).unwrap();
        assert!(matches!(
            s.publish(&g, &key(2), &src, EntryKind::File),
            Err(CacheError::NotHoldingLock(_))
        ));
        g.release();
        g.release();
        assert!(matches!(
            s.publish(&g, &key(1), &src, EntryKind::File),
            Err(CacheError::NotHoldingLock(_))
        ));
        let (_d2, other) = store();
        let foreign = other.acquire(&key(1), None).unwrap();
        assert!(matches!(
            s.publish(&foreign, &key(1), &src, EntryKind::File),
            Err(CacheError::NotHoldingLock(_))
        ));
    }

    #[test]
    fn publish_rejects_missing_source_and_wrong_kind() {
        let (d, s) = store();
        let g = s.acquire(&key(1), None).unwrap();
        assert!(matches!(
            s.publish(&g, &key(1), &d.path().join("nope"), EntryKind::File),
            Err(CacheError::SourceMissing(_))
        ));
        assert!(matches!(
            s.publish(&g, &key(1), d.path(), EntryKind::File),
            Err(CacheError::KindMismatch { .. })
        ));
        assert_eq!(fs::read_dir(s.root().join("staging")).unwrap().count(), 0);
    }

    #[test]
    fn uncommitted_staging_is_invisible() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"partial").unwrap();
        let g = s.acquire(&key(3), None).unwrap();
        let staged = s.stage(&g, &key(3), &src, EntryKind::File).unwrap();
        assert!(staged.path().join("payload").exists());
        assert!(s.lookup(&key(3)).unwrap().is_none());
        // simulate a crash: the staging directory is simply left behind
        std::mem::forget(staged);
        assert!(s.lookup(&key(3)).unwrap().is_none());
        let e = s.publish(&g, &key(3), &src, EntryKind::File).unwrap();
        assert_eq!(fs::read(e.payload).unwrap(), b"partial");
    }

    #[test]
    fn orphaned_staging_swept_on_open() {
        let (_d, s) = store();
        // pid 0x7fffffff is never a live process
        let orphan = s.root().join("staging").join("2147483647-1-0");
        fs::create_dir_all(orphan.join("payload")).unwrap();
        let mine = s.root().join("staging").join(format!("{}-1-0", std::process::id()));
        fs::create_dir_all(&mine).unwrap();
        let _reopened = CacheStore::open(s.root()).unwrap();
        assert!(!orphan.exists());
        assert!(mine.exists());
    }

    #[test]
    fn object_without_payload_is_corrupt() {
        let (_d, s) = store();
        let dir = s.object_dir(&key(4));
        fs::create_dir_all(&dir).unwrap();
        assert!(matches!(s.lookup(&key(4)), Err(CacheError::StoreCorrupt(_))));
    }

    #[test]
    fn evict_and_stats() {
        let (d, s) = store();
        let g = s.acquire(&key(9), None).unwrap();
        assert!(!s.evict(&g, &key(9)).unwrap());
        for i in 0..5u8 {
            let src = d.path().join(format!("f{i}"));
            fs::write(&src, vec![i; i as usize + 1]).unwrap();
            let g = s.acquire(&key(i), None).unwrap();
            s.publish(&g, &key(i), &src, EntryKind::File).unwrap();
        }
        let on_disk: usize = fs::read_dir(s.root().join("objects"))
            .unwrap()
            .map(|f| fs::read_dir(f.unwrap().path()).unwrap().count())
            .sum();
        let stats = s.stats().unwrap();
        assert_eq!(stats.entries, on_disk as u64);
        assert_eq!(stats.entries, 5);
        assert_eq!(stats.bytes, 1 + 2 + 3 + 4 + 5);
        let g = s.acquire(&key(2), None).unwrap();
        assert!(s.evict(&g, &key(2)).unwrap());
        assert!(s.lookup(&key(2)).unwrap().is_none());
        assert_eq!(s.stats().unwrap().entries, 4);
    }

    #[test]
    fn verify_detects_corruption() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"hello").unwrap();
        let g = s.acquire(&key(1), None).unwrap();
        let e = s.publish(&g, &key(1), &src, EntryKind::File).unwrap();
        assert!(s.verify(None).unwrap().is_empty());
        fs::set_permissions(&e.payload, fs::Permissions::from_mode(0o644)).unwrap();
        fs::write(&e.payload, b"hellp").unwrap();
        let failures = s.verify(None).unwrap();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].key, key(1));
    }

    #[test]
    fn independent_keys_do_not_contend() {
        let (_d, s) = store();
        let _a = s.acquire(&key(1), None).unwrap();
        let b = s.acquire(&key(2), Some(Duration::from_millis(50)));
        assert!(b.is_ok());
    }

    #[test]
    fn lock_timeout_when_held() {
        let (_d, s) = store();
        let _a = s.acquire(&key(1), None).unwrap();
        assert!(matches!(
            s.acquire(&key(1), Some(Duration::from_millis(30))),
            Err(CacheError::LockTimeout(_))
        ));
        assert!(s.try_acquire(&key(1)).unwrap().is_none());
    }

    #[test]
    fn second_acquirer_waits_for_release() {
        let (_d, s) = store();
        let events = Arc::new(Mutex::new(Vec::new()));
        let barrier = Arc::new(Barrier::new(2));
        let guard = s.acquire(&key(7), None).unwrap();
        let t = {
            let s = s.clone();
            let events = events.clone();
            let barrier = barrier.clone();
            std::thread::spawn(move || {
                barrier.wait();
                let _g = s.acquire(&key(7), None).unwrap();
                events.lock().unwrap().push("B acquired");
            })
        };
        barrier.wait();
        std::thread::sleep(Duration::from_millis(50));
        events.lock().unwrap().push("A releasing");
        drop(guard);
        t.join().unwrap();
        assert_eq!(*events.lock().unwrap(), vec!["A releasing", "B acquired"]);
    }

    #[test]
    fn racing_publishers_execute_once() {
        let (d, s) = store();
        let src = d.path().join("f");
        fs::write(&src, b"v").unwrap();
        let executed = Arc::new(AtomicU64::new(0));
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                let src = src.clone();
                let executed = executed.clone();
                std::thread::spawn(move || {
                    let g = s.acquire(&key(5), None).unwrap();
                    if s.lookup(&key(5)).unwrap().is_none() {
                        executed.fetch_add(1, Ordering::SeqCst);
                        std::thread::sleep(Duration::from_millis(5));
                        s.publish(&g, &key(5), &src, EntryKind::File).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(executed.load(Ordering::SeqCst), 1);
    }
}
