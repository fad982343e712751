//! Persistent per-binary leak database.
//!
//! One JSON file per instrumented binary holds the allocation stacks of
//! detected leaks and every execution path recorded for them. The file is
//! named after the binary's directory and name, and carries the binary's
//! compile stamp: opening it for a different build yields an empty database.
//!
//! Writers serialize through an advisory exclusive lock on a sibling
//! `.lock` file and replace the database with write-temp-then-rename, so
//! readers never observe a partially written file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trace::{BinaryIdentity, StackTrace};

pub const SCHEMA_VERSION: u32 = 1;

pub const DB_SUFFIX: &str = ".awdb.json";

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug)]
pub enum DbError {
    CorruptDatabase { path: PathBuf, reason: String },
    PermissionDenied(PathBuf),
    LockTimeout(Duration),
    UnknownLeakId(LeakId),
    Io { path: PathBuf, source: io::Error },
}

impl fmt::Display for DbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DbError::CorruptDatabase { path, reason } => {
                write!(f, "corrupt leak database {}: {reason}", path.display())
            }
            DbError::PermissionDenied(path) => write!(f, "permission denied: {}", path.display()),
            DbError::LockTimeout(d) => write!(f, "timed out after {d:?} waiting for database lock"),
            DbError::UnknownLeakId(id) => write!(f, "unknown leak id {id}"),
            DbError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for DbError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DbError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> DbError {
    if source.kind() == io::ErrorKind::PermissionDenied {
        DbError::PermissionDenied(path.to_path_buf())
    } else {
        DbError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Hex SHA-256 of the canonical serialization of an allocation stack.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeakId(String);

impl LeakId {
    pub fn for_stack(stack: &StackTrace) -> Self {
        LeakId(hex::encode(Sha256::digest(stack.canonical().as_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 12 hex digits, for human-facing output.
    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(12)]
    }
}

impl fmt::Display for LeakId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The code points one leaked object passed through during one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PathRepr")]
pub struct ExecutionPath {
    pub test_id: String,
    pub terminated_by_free: bool,
    points: Vec<StackTrace>,
}

#[derive(Deserialize)]
struct PathRepr {
    test_id: String,
    terminated_by_free: bool,
    points: Vec<StackTrace>,
}

impl TryFrom<PathRepr> for ExecutionPath {
    type Error = String;

    fn try_from(r: PathRepr) -> Result<Self, Self::Error> {
        if r.points.windows(2).any(|w| w[0] == w[1]) {
            return Err(format!(
                "path of test {:?} repeats a point consecutively",
                r.test_id
            ));
        }
        Ok(ExecutionPath {
            test_id: r.test_id,
            terminated_by_free: r.terminated_by_free,
            points: r.points,
        })
    }
}

impl ExecutionPath {
    pub fn new(test_id: impl Into<String>) -> Self {
        ExecutionPath {
            test_id: test_id.into(),
            terminated_by_free: false,
            points: Vec::new(),
        }
    }

    /// Builds a path, collapsing consecutive duplicate points.
    pub fn from_points(
        test_id: impl Into<String>,
        points: impl IntoIterator<Item = StackTrace>,
        terminated_by_free: bool,
    ) -> Self {
        let mut path = ExecutionPath::new(test_id);
        path.terminated_by_free = terminated_by_free;
        for p in points {
            path.push(p);
        }
        path
    }

    /// Appends a point unless it equals the current last point.
    pub fn push(&mut self, point: StackTrace) {
        if self.points.last() != Some(&point) {
            self.points.push(point);
        }
    }

    pub fn points(&self) -> &[StackTrace] {
        &self.points
    }

    pub fn last_point(&self) -> Option<&StackTrace> {
        self.points.last()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Equality used for de-duplication; the originating test is ignored.
    pub fn same_trace(&self, other: &ExecutionPath) -> bool {
        self.terminated_by_free == other.terminated_by_free && self.points == other.points
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakRecord {
    pub id: LeakId,
    pub alloc_stack: StackTrace,
    pub paths: Vec<ExecutionPath>,
}

impl LeakRecord {
    fn add_path(&mut self, path: ExecutionPath) -> bool {
        if self.paths.iter().any(|p| p.same_trace(&path)) {
            return false;
        }
        self.paths.push(path);
        true
    }
}

/// In-memory view of one binary's leak database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakDatabase {
    identity: BinaryIdentity,
    records: BTreeMap<LeakId, LeakRecord>,
}

#[derive(Serialize, Deserialize)]
struct IdentityRepr {
    name: String,
    dir: String,
}

#[derive(Deserialize)]
struct RecordRepr {
    id: LeakId,
    alloc_stack: StackTrace,
    paths: Vec<ExecutionPath>,
}

#[derive(Deserialize)]
struct DbFileIn {
    schema_version: u32,
    identity: IdentityRepr,
    compile_stamp: String,
    records: Vec<RecordRepr>,
}

#[derive(Serialize)]
struct DbFileOut<'a> {
    schema_version: u32,
    identity: IdentityRepr,
    compile_stamp: &'a str,
    records: Vec<&'a LeakRecord>,
}

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Database file for a binary: `root` joined with the percent-encoded
/// `dir + "/" + name`, suffixed `.awdb.json`.
pub fn db_path(root: &Path, identity: &BinaryIdentity) -> PathBuf {
    db_path_for(root, identity.name(), identity.dir())
}

/// [`db_path`] from a bare name and directory.
// TODO: directories deep enough to push the encoded name past NAME_MAX need a
// hashed fallback name.
pub fn db_path_for(root: &Path, name: &str, dir: &str) -> PathBuf {
    let mut file = encode_component(&format!("{dir}/{name}"));
    file.push_str(DB_SUFFIX);
    root.join(file)
}

fn lock_path(db_file: &Path) -> PathBuf {
    let mut s = db_file.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}

fn ensure_root(root: &Path) -> Result<(), DbError> {
    if root.is_dir() {
        return Ok(());
    }
    let mut builder = fs::DirBuilder::new();
    builder.recursive(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::DirBuilderExt;
        builder.mode(0o700);
    }
    builder.create(root).map_err(|e| io_err(root, e))
}

/// Held exclusive advisory lock; released on drop.
struct DbLock {
    _file: File,
}

impl DbLock {
    fn acquire(db_file: &Path, timeout: Duration) -> Result<DbLock, DbError> {
        let path = lock_path(db_file);
        let mut opts = OpenOptions::new();
        opts.create(true).truncate(false).write(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let file = opts.open(&path).map_err(|e| io_err(&path, e))?;
        let deadline = Instant::now() + timeout;
        loop {
            match file.try_lock() {
                Ok(()) => return Ok(DbLock { _file: file }),
                Err(TryLockError::WouldBlock) => {
                    if Instant::now() >= deadline {
                        return Err(DbError::LockTimeout(timeout));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(TryLockError::Error(e)) => return Err(io_err(&path, e)),
            }
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DbError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(
        ".tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = PathBuf::from(tmp);
    let mut opts = OpenOptions::new();
    opts.create(true).truncate(true).write(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let result = (|| {
        let mut f = opts.open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

impl LeakDatabase {
    pub fn empty(identity: BinaryIdentity) -> Self {
        LeakDatabase {
            identity,
            records: BTreeMap::new(),
        }
    }

    pub fn identity(&self) -> &BinaryIdentity {
        &self.identity
    }

    pub fn compile_stamp(&self) -> &str {
        self.identity.compile_stamp()
    }

    /// Loads whatever database file is at `path`, whatever its stamp.
    pub fn load(path: &Path) -> Result<Option<LeakDatabase>, DbError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(path, e)),
        };
        Self::from_json(&text)
            .map(Some)
            .map_err(|reason| DbError::CorruptDatabase {
                path: path.to_path_buf(),
                reason,
            })
    }

    /// Opens the database for `identity`, flushing it when the stored
    /// compile stamp differs from the identity's.
    pub fn open_or_create(root: &Path, identity: &BinaryIdentity) -> Result<Self, DbError> {
        ensure_root(root)?;
        let path = db_path(root, identity);
        match Self::load(&path)? {
            Some(db) if !db.identity.same_binary(identity) => Err(DbError::CorruptDatabase {
                path,
                reason: format!("file belongs to {}", db.identity),
            }),
            Some(db) if db.compile_stamp() == identity.compile_stamp() => Ok(db),
            _ => Ok(LeakDatabase::empty(identity.clone())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: DbFileIn = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema version {}",
                file.schema_version
            ));
        }
        let identity =
            BinaryIdentity::new(file.identity.name, file.identity.dir, file.compile_stamp)
                .map_err(|e| e.to_string())?;
        let mut records = BTreeMap::new();
        for r in file.records {
            let expected = LeakId::for_stack(&r.alloc_stack);
            if r.id != expected {
                return Err(format!("record id {} does not match its stack", r.id));
            }
            for (i, p) in r.paths.iter().enumerate() {
                if r.paths[..i].iter().any(|q| q.same_trace(p)) {
                    return Err(format!("record {} stores a duplicate path", r.id));
                }
            }
            let rec = LeakRecord {
                id: r.id.clone(),
                alloc_stack: r.alloc_stack,
                paths: r.paths,
            };
            if records.insert(r.id.clone(), rec).is_some() {
                return Err(format!("duplicate record id {}", r.id));
            }
        }
        Ok(LeakDatabase { identity, records })
    }

    /// The on-disk JSON form, records ordered by id.
    pub fn to_json(&self) -> String {
        let out = DbFileOut {
            schema_version: SCHEMA_VERSION,
            identity: IdentityRepr {
                name: self.identity.name().to_string(),
                dir: self.identity.dir().to_string(),
            },
            compile_stamp: self.compile_stamp(),
            records: self.records.values().collect(),
        };
        let mut s = serde_json::to_string_pretty(&out).expect("database always serializes");
        s.push('\n');
        s
    }

    /// Writes the database atomically under the file lock.
    pub fn save(&self, root: &Path) -> Result<(), DbError> {
        self.save_with_timeout(root, DEFAULT_LOCK_TIMEOUT)
    }

    pub fn save_with_timeout(&self, root: &Path, timeout: Duration) -> Result<(), DbError> {
        ensure_root(root)?;
        let path = db_path(root, &self.identity);
        let _lock = DbLock::acquire(&path, timeout)?;
        write_atomic(&path, self.to_json().as_bytes())
    }

    /// Read-merge-write under the file lock: the stored database (when it
    /// has the same stamp) is joined with this one and the union is written
    /// back. `self` becomes the union.
    pub fn save_merged(&mut self, root: &Path) -> Result<(), DbError> {
        ensure_root(root)?;
        let path = db_path(root, &self.identity);
        let _lock = DbLock::acquire(&path, DEFAULT_LOCK_TIMEOUT)?;
        if let Some(mut stored) = Self::load(&path)? {
            if stored.identity == self.identity {
                stored.merge(self);
                *self = stored;
            }
        }
        write_atomic(&path, self.to_json().as_bytes())
    }

    /// Idempotently records a leak's allocation stack.
    pub fn record_leak(&mut self, alloc_stack: &StackTrace) -> LeakId {
        let id = LeakId::for_stack(alloc_stack);
        self.records
            .entry(id.clone())
            .or_insert_with(|| LeakRecord {
                id: id.clone(),
                alloc_stack: alloc_stack.clone(),
                paths: Vec::new(),
            });
        id
    }

    /// Leak whose allocation stack equals `alloc_stack` exactly.
    pub fn match_allocation(&self, alloc_stack: &StackTrace) -> Option<LeakId> {
        let id = LeakId::for_stack(alloc_stack);
        self.records
            .get(&id)
            .filter(|r| &r.alloc_stack == alloc_stack)
            .map(|r| r.id.clone())
    }

    /// Stores a path unless an identical trace is already stored. Returns
    /// whether the path was new.
    pub fn append_path(&mut self, leak: &LeakId, path: ExecutionPath) -> Result<bool, DbError> {
        let rec = self
            .records
            .get_mut(leak)
            .ok_or_else(|| DbError::UnknownLeakId(leak.clone()))?;
        Ok(rec.add_path(path))
    }

    /// Joins paths collected elsewhere (another thread or worker) into this
    /// database. Nothing is discarded; subsumed paths are filtered only when
    /// suggestions are computed. Fails without modification if any id is
    /// unknown.
    pub fn merge_runs(
        &mut self,
        other_paths: &BTreeMap<LeakId, Vec<ExecutionPath>>,
    ) -> Result<(), DbError> {
        if let Some(id) = other_paths
            .keys()
            .find(|id| !self.records.contains_key(*id))
        {
            return Err(DbError::UnknownLeakId(id.clone()));
        }
        for (id, paths) in other_paths {
            let rec = self.records.get_mut(id).expect("checked above");
            for p in paths {
                rec.add_path(p.clone());
            }
        }
        Ok(())
    }

    /// Union of records and paths of `other` into `self`.
    pub fn merge(&mut self, other: &LeakDatabase) {
        for rec in other.records.values() {
            let id = self.record_leak(&rec.alloc_stack);
            let mine = self.records.get_mut(&id).expect("just recorded");
            for p in &rec.paths {
                mine.add_path(p.clone());
            }
        }
    }

    /// Drops every record, keeping the identity and stamp.
    pub fn flush(&mut self) {
        self.records.clear();
    }

    pub fn record(&self, id: &LeakId) -> Option<&LeakRecord> {
        self.records.get(id)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &LeakRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path_count(&self) -> usize {
        self.records.values().map(|r| r.paths.len()).sum()
    }

    pub fn point_count(&self) -> usize {
        self.records
            .values()
            .flat_map(|r| &r.paths)
            .map(ExecutionPath::len)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::CodeLocation;

    fn st(line: u32) -> StackTrace {
        StackTrace::new(vec![CodeLocation::new("main", "a.c", line).unwrap()]).unwrap()
    }

    fn ident(stamp: &str) -> BinaryIdentity {
        BinaryIdentity::new("a.out", "/home/u/p", stamp).unwrap()
    }

    #[test]
    fn path_encoding() {
        assert_eq!(
            db_path(Path::new("/var/aw"), &ident("s")),
            PathBuf::from("/var/aw/%2Fhome%2Fu%2Fp%2Fa.out.awdb.json")
        );
        let spaced = BinaryIdentity::new("a b", "/x", "s").unwrap();
        assert_eq!(
            db_path(Path::new("/r"), &spaced),
            PathBuf::from("/r/%2Fx%2Fa%20b.awdb.json")
        );
        assert_eq!(
            db_path(Path::new("/r"), &spaced),
            db_path(Path::new("/r"), &spaced)
        );
        assert_eq!(encode_component("é%"), "%C3%A9%25");
    }

    #[test]
    fn record_and_match() {
        let mut db = LeakDatabase::empty(ident("s"));
        let a = db.record_leak(&st(1));
        assert_eq!(db.record_leak(&st(1)), a);
        assert_eq!(db.len(), 1);
        let b = db.record_leak(&st(2));
        assert_ne!(a, b);
        assert_eq!(db.len(), 2);
        assert_eq!(db.match_allocation(&st(1)), Some(a.clone()));
        assert_eq!(db.match_allocation(&st(3)), None);
        assert_eq!(a.as_str().len(), 64);
    }

    #[test]
    fn append_collapses_and_dedupes() {
        let mut db = LeakDatabase::empty(ident("s"));
        let id = db.record_leak(&st(1));
        let p = ExecutionPath::from_points("t1", [st(2), st(2), st(3)], false);
        assert_eq!(p.points(), &[st(2), st(3)]);
        assert!(db.append_path(&id, p.clone()).unwrap());
        assert!(!db.append_path(&id, p.clone()).unwrap());
        let mut from_other_test = p.clone();
        from_other_test.test_id = "t2".into();
        assert!(!db.append_path(&id, from_other_test).unwrap());
        let mut freed = p;
        freed.terminated_by_free = true;
        assert!(db.append_path(&id, freed).unwrap());
        assert_eq!(db.record(&id).unwrap().paths.len(), 2);

        let ghost = LeakId::for_stack(&st(99));
        assert!(matches!(
            db.append_path(&ghost, ExecutionPath::new("t")),
            Err(DbError::UnknownLeakId(_))
        ));
    }

    #[test]
    fn merge_runs_keeps_both_nested_paths() {
        let mut db = LeakDatabase::empty(ident("s"));
        let id = db.record_leak(&st(1));
        let thread_a = ExecutionPath::from_points("t", [st(10)], false);
        let thread_b = ExecutionPath::from_points("t", [st(10), st(11)], false);
        db.append_path(&id, thread_a.clone()).unwrap();
        let mut other = BTreeMap::new();
        other.insert(id.clone(), vec![thread_b.clone(), thread_a]);
        db.merge_runs(&other).unwrap();
        assert_eq!(db.record(&id).unwrap().paths.len(), 2);

        let before = db.clone();
        db.merge_runs(&BTreeMap::new()).unwrap();
        assert_eq!(db, before);

        let mut bad = BTreeMap::new();
        bad.insert(LeakId::for_stack(&st(5)), vec![thread_b]);
        assert!(db.merge_runs(&bad).is_err());
        assert_eq!(db, before);
    }

    #[test]
    fn save_open_round_trip_and_flush() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("db");
        let fresh = LeakDatabase::open_or_create(&root, &ident("s1")).unwrap();
        assert!(fresh.is_empty());

        let mut db = fresh;
        let id = db.record_leak(&st(1));
        db.append_path(&id, ExecutionPath::from_points("t1", [st(2), st(3)], false))
            .unwrap();
        db.save(&root).unwrap();

        let back = LeakDatabase::open_or_create(&root, &ident("s1")).unwrap();
        assert_eq!(back, db);

        let rebuilt = LeakDatabase::open_or_create(&root, &ident("s2")).unwrap();
        assert!(rebuilt.is_empty());
        assert_eq!(rebuilt.compile_stamp(), "s2");
        assert_eq!(rebuilt.match_allocation(&st(1)), None);
    }

    #[cfg(unix)]
    #[test]
    fn created_files_are_owner_only() {
        use std::os::unix::fs::PermissionsExt;
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("nested/db");
        let db = LeakDatabase::open_or_create(&root, &ident("s")).unwrap();
        db.save(&root).unwrap();
        let dir_mode = fs::metadata(&root).unwrap().permissions().mode() & 0o777;
        assert_eq!(dir_mode, 0o700);
        let file_mode = fs::metadata(db_path(&root, db.identity()))
            .unwrap()
            .permissions()
            .mode()
            & 0o777;
        assert_eq!(file_mode, 0o600);
    }

    #[test]
    fn corrupt_files_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let path = db_path(root, &ident("s"));
        for bad in [
            "{",
            r#"{"schema_version":2,"identity":{"name":"a.out","dir":"/home/u/p"},"compile_stamp":"s","records":[]}"#,
            r#"{"schema_version":1,"identity":{"name":"a.out","dir":"/home/u/p"},"compile_stamp":"s","records":[{"id":"00","alloc_stack":[{"fn":"main","file":"a.c","line":1}],"paths":[]}]}"#,
            r#"{"schema_version":1,"identity":{"name":"a.out","dir":"/home/u/p"},"compile_stamp":"","records":[]}"#,
        ] {
            fs::write(&path, bad).unwrap();
            assert!(
                matches!(
                    LeakDatabase::open_or_create(root, &ident("s")),
                    Err(DbError::CorruptDatabase { .. })
                ),
                "{bad}"
            );
        }
        // consecutive duplicate point inside a stored path
        let id = LeakId::for_stack(&st(1));
        let frame = r#"[{"fn":"main","file":"a.c","line":2}]"#;
        let doubled = format!(
            r#"{{"schema_version":1,"identity":{{"name":"a.out","dir":"/home/u/p"}},"compile_stamp":"s","records":[{{"id":"{id}","alloc_stack":[{{"fn":"main","file":"a.c","line":1}}],"paths":[{{"test_id":"t","terminated_by_free":false,"points":[{frame},{frame}]}}]}}]}}"#
        );
        assert!(LeakDatabase::from_json(&doubled).is_err());
        let single = doubled.replace(&format!("{frame},{frame}"), frame);
        assert_eq!(LeakDatabase::from_json(&single).unwrap().path_count(), 1);
    }

    #[test]
    fn lock_timeout() {
        let tmp = tempfile::tempdir().unwrap();
        let db = LeakDatabase::empty(ident("s"));
        let path = db_path(tmp.path(), db.identity());
        let _held = DbLock::acquire(&path, Duration::from_secs(1)).unwrap();
        let err = db
            .save_with_timeout(tmp.path(), Duration::from_millis(50))
            .unwrap_err();
        assert!(matches!(err, DbError::LockTimeout(_)));
    }

    #[test]
    fn save_merged_joins_stored_state() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let mut a = LeakDatabase::open_or_create(root, &ident("s")).unwrap();
        let mut b = a.clone();
        let ia = a.record_leak(&st(1));
        a.append_path(&ia, ExecutionPath::from_points("ta", [st(5)], false))
            .unwrap();
        let ib = b.record_leak(&st(2));
        b.append_path(&ib, ExecutionPath::new("tb")).unwrap();
        a.save_merged(root).unwrap();
        b.save_merged(root).unwrap();
        let stored = LeakDatabase::open_or_create(root, &ident("s")).unwrap();
        assert_eq!(stored.len(), 2);
        assert_eq!(stored.path_count(), 2);
        assert_eq!(stored, b);
    }
}
