//! Replays execution runs against the leak database.
//!
//! A test case is run twice. The detect pass finds allocations still live at
//! exit and records their allocation stacks. The track pass tags allocations
//! whose stack matches a recorded leak and, at every access to tagged memory,
//! appends the accessing stack to that object's execution path.

use std::collections::{HashMap, HashSet};
use std::error::Error;
use std::fmt;
use std::path::Path;

use crate::db::{DbError, ExecutionPath, LeakDatabase, LeakId};
use crate::shadow::{AccessOutcome, ShadowMap};
use crate::trace::{BinaryIdentity, EventKind, ExecutionRun, StackTrace};

#[derive(Debug)]
pub enum EngineError {
    RunIdentityMismatch {
        run: Box<BinaryIdentity>,
        db: Box<BinaryIdentity>,
    },
    Db(DbError),
    Replay(Box<dyn Error + Send + Sync>),
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::RunIdentityMismatch { run, db } => write!(
                f,
                "run of {run} (stamp {}) replayed against database of {db} (stamp {})",
                run.compile_stamp(),
                db.compile_stamp()
            ),
            EngineError::Db(e) => write!(f, "{e}"),
            EngineError::Replay(e) => write!(f, "could not replay run: {e}"),
        }
    }
}

impl Error for EngineError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            EngineError::Db(e) => Some(e),
            EngineError::Replay(e) => Some(e.as_ref()),
            EngineError::RunIdentityMismatch { .. } => None,
        }
    }
}

impl From<DbError> for EngineError {
    fn from(e: DbError) -> Self {
        EngineError::Db(e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectReport {
    pub leaks_found: Vec<(LeakId, StackTrace)>,
    /// `(seq, addr)` of frees of memory that was never allocated.
    pub invalid_frees: Vec<(u64, u64)>,
    /// `(seq, addr)` of frees of already freed memory.
    pub double_frees: Vec<(u64, u64)>,
    pub freed_count: usize,
    pub allocated_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackReport {
    pub paths_recorded: Vec<(LeakId, ExecutionPath)>,
    pub tagged_allocations: usize,
    pub reports_fired: usize,
}

fn check_identity(run: &ExecutionRun, db: &LeakDatabase) -> Result<(), EngineError> {
    if &run.identity != db.identity() {
        return Err(EngineError::RunIdentityMismatch {
            run: Box::new(run.identity.clone()),
            db: Box::new(db.identity().clone()),
        });
    }
    Ok(())
}

/// First run of a test case: every allocation chain still live at exit is a
/// leak, identified by the stack of the chain's first allocation.
pub fn detect_pass(run: &ExecutionRun, db: &mut LeakDatabase) -> Result<DetectReport, EngineError> {
    check_identity(run, db)?;
    let mut report = DetectReport::default();
    // addr -> (seq of the chain's first allocation, its stack)
    let mut live: HashMap<u64, (u64, StackTrace)> = HashMap::new();
    let mut freed: HashSet<u64> = HashSet::new();
    // chains whose address was handed out again while still live
    let mut orphaned: Vec<(u64, StackTrace)> = Vec::new();

    let bad_free = |report: &mut DetectReport, freed: &HashSet<u64>, seq: u64, addr: u64| {
        if freed.contains(&addr) {
            report.double_frees.push((seq, addr));
        } else {
            report.invalid_frees.push((seq, addr));
        }
    };

    for ev in &run.events {
        match &ev.kind {
            EventKind::Alloc { addr, stack, .. } => {
                report.allocated_count += 1;
                freed.remove(addr);
                if let Some(prev) = live.insert(*addr, (ev.seq, stack.clone())) {
                    orphaned.push(prev);
                }
            }
            EventKind::Realloc {
                old_addr,
                new_addr,
                stack,
                ..
            } => {
                let origin = if *old_addr == 0 {
                    None
                } else if let Some(origin) = live.remove(old_addr) {
                    freed.insert(*old_addr);
                    Some(origin)
                } else {
                    bad_free(&mut report, &freed, ev.seq, *old_addr);
                    None
                };
                let entry = origin.unwrap_or_else(|| {
                    report.allocated_count += 1;
                    (ev.seq, stack.clone())
                });
                freed.remove(new_addr);
                if let Some(prev) = live.insert(*new_addr, entry) {
                    orphaned.push(prev);
                }
            }
            EventKind::Free { addr, .. } => {
                if *addr == 0 {
                    continue;
                }
                if live.remove(addr).is_some() {
                    report.freed_count += 1;
                    freed.insert(*addr);
                } else {
                    bad_free(&mut report, &freed, ev.seq, *addr);
                }
            }
            EventKind::Access { .. } => {}
            EventKind::Exit { .. } => {
                let mut survivors: Vec<(u64, StackTrace)> = live.drain().map(|(_, v)| v).collect();
                survivors.append(&mut orphaned);
                survivors.sort_by_key(|(seq, _)| *seq);
                let mut seen = HashSet::new();
                for (_, stack) in survivors {
                    let id = db.record_leak(&stack);
                    if seen.insert(id.clone()) {
                        report.leaks_found.push((id, stack));
                    }
                }
            }
        }
    }
    Ok(report)
}

struct InFlight {
    leak: LeakId,
    opened: u64,
    path: ExecutionPath,
}

/// Replay state of one track pass.
struct Tracker<'a> {
    db: &'a LeakDatabase,
    test_id: &'a str,
    shadow: ShadowMap,
    in_flight: HashMap<u64, InFlight>,
    finished: Vec<(LeakId, ExecutionPath)>,
    report: TrackReport,
}

impl<'a> Tracker<'a> {
    fn new(db: &'a LeakDatabase, test_id: &'a str) -> Self {
        Tracker {
            db,
            test_id,
            shadow: ShadowMap::new(),
            in_flight: HashMap::new(),
            finished: Vec::new(),
            report: TrackReport::default(),
        }
    }

    fn close(&mut self, f: InFlight) {
        self.finished.push((f.leak, f.path));
    }

    /// Registers a fresh allocation and tags it when its stack is a known leak.
    fn allocate(&mut self, seq: u64, addr: u64, size: u64, stack: &StackTrace) {
        if self.shadow.is_live(addr) {
            // address reissued while still live: the old object leaked here
            let _ = self.shadow.clear_region(addr);
            if let Some(f) = self.in_flight.remove(&addr) {
                self.close(f);
            }
        }
        if self.shadow.register_region(addr, size).is_err() {
            return;
        }
        if let Some(leak) = self.db.match_allocation(stack) {
            self.shadow
                .tag_region(addr)
                .expect("region registered above");
            self.report.tagged_allocations += 1;
            self.in_flight.insert(
                addr,
                InFlight {
                    leak,
                    opened: seq,
                    path: ExecutionPath::new(self.test_id),
                },
            );
        }
    }

    /// Moves a region and its tag; the chain keeps its in-flight path.
    fn reallocate(
        &mut self,
        seq: u64,
        old_addr: u64,
        new_addr: u64,
        size: u64,
        stack: &StackTrace,
    ) {
        if old_addr == 0 || !self.shadow.is_live(old_addr) {
            self.allocate(seq, new_addr, size, stack);
            return;
        }
        let info = self.shadow.clear_region(old_addr).expect("checked live");
        let carried = self.in_flight.remove(&old_addr);
        if self.shadow.register_region(new_addr, size).is_err() {
            if let Some(f) = carried {
                self.close(f);
            }
            return;
        }
        if info.was_tagged {
            self.shadow.tag_region(new_addr).expect("registered above");
        }
        if let Some(f) = carried {
            self.in_flight.insert(new_addr, f);
        }
    }

    fn access(&mut self, addr: u64, stack: &StackTrace) {
        if self.shadow.on_access(addr) != (AccessOutcome::Live { tagged: true }) {
            return;
        }
        self.report.reports_fired += 1;
        let region = self
            .shadow
            .region_containing(addr)
            .expect("live access has a region");
        if let Some(f) = self.in_flight.get_mut(&region.start) {
            f.path.push(stack.clone());
        }
    }

    fn free(&mut self, addr: u64) {
        if self.shadow.clear_region(addr).is_ok() {
            if let Some(mut f) = self.in_flight.remove(&addr) {
                f.path.terminated_by_free = true;
                self.close(f);
            }
        }
    }

    fn exit(&mut self) {
        let mut open: Vec<InFlight> = self.in_flight.drain().map(|(_, f)| f).collect();
        open.sort_by_key(|f| f.opened);
        for f in open {
            self.close(f);
        }
    }
}

/// Second run of a test case: tags allocations matching recorded leaks and
/// records the stack of every access that hits tagged shadow memory.
pub fn track_pass(run: &ExecutionRun, db: &mut LeakDatabase) -> Result<TrackReport, EngineError> {
    check_identity(run, db)?;
    let mut tracker = Tracker::new(db, &run.test_id);
    for ev in &run.events {
        match &ev.kind {
            EventKind::Alloc {
                addr, size, stack, ..
            } => tracker.allocate(ev.seq, *addr, *size, stack),
            EventKind::Realloc {
                old_addr,
                new_addr,
                size,
                stack,
            } => tracker.reallocate(ev.seq, *old_addr, *new_addr, *size, stack),
            EventKind::Access { addr, stack, .. } => tracker.access(*addr, stack),
            EventKind::Free { addr, .. } => tracker.free(*addr),
            EventKind::Exit { .. } => tracker.exit(),
        }
    }
    let Tracker {
        finished,
        mut report,
        ..
    } = tracker;
    for (leak, path) in finished {
        db.append_path(&leak, path.clone())?;
        report.paths_recorded.push((leak, path));
    }
    Ok(report)
}

/// Anything that can produce the same run on every call.
pub trait RunSource {
    fn test_id(&self) -> &str;
    fn replay(&self) -> Result<ExecutionRun, Box<dyn Error + Send + Sync>>;
}

impl RunSource for ExecutionRun {
    fn test_id(&self) -> &str {
        &self.test_id
    }

    fn replay(&self) -> Result<ExecutionRun, Box<dyn Error + Send + Sync>> {
        Ok(self.clone())
    }
}

fn replay(source: &dyn RunSource) -> Result<ExecutionRun, EngineError> {
    source.replay().map_err(EngineError::Replay)
}

/// Runs one test case twice: detect, save, track, save.
pub fn run_test_twice(
    source: &dyn RunSource,
    db: &mut LeakDatabase,
    root: &Path,
) -> Result<(DetectReport, TrackReport), EngineError> {
    let first = replay(source)?;
    let detect = detect_pass(&first, db)?;
    db.save_merged(root)?;
    let second = replay(source)?;
    let track = track_pass(&second, db)?;
    db.save_merged(root)?;
    Ok((detect, track))
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub detect: Vec<(String, DetectReport)>,
    pub track: Vec<(String, TrackReport)>,
    pub db: LeakDatabase,
}

#[derive(Clone, Copy)]
enum Phase {
    Detect,
    Track,
}

/// Runs every test case twice against the database of `identity`.
///
/// All detect runs complete before any track run starts, so each track run
/// sees every leak the suite can detect and the outcome does not depend on
/// test order. With `jobs > 1` the tests of each phase are spread over
/// worker threads, each holding its own database handle and joining its
/// results into the stored database under the file lock.
pub fn run_suite<S: RunSource + Sync>(
    sources: &[S],
    identity: &BinaryIdentity,
    root: &Path,
    jobs: usize,
) -> Result<SuiteOutcome, EngineError> {
    let mut db = LeakDatabase::open_or_create(root, identity)?;
    // persist the (possibly flushed) state before workers merge into it
    db.save(root)?;

    let detect = run_phase(sources, &db, root, jobs, Phase::Detect)?
        .into_iter()
        .filter_map(|(id, r)| match r {
            PhaseReport::Detect(d) => Some((id, d)),
            PhaseReport::Track(_) => None,
        })
        .collect();
    db = LeakDatabase::open_or_create(root, identity)?;
    let track = run_phase(sources, &db, root, jobs, Phase::Track)?
        .into_iter()
        .filter_map(|(id, r)| match r {
            PhaseReport::Track(t) => Some((id, t)),
            PhaseReport::Detect(_) => None,
        })
        .collect();
    db = LeakDatabase::open_or_create(root, identity)?;
    Ok(SuiteOutcome { detect, track, db })
}

enum PhaseReport {
    Detect(DetectReport),
    Track(TrackReport),
}

type PhaseResult = (String, PhaseReport);

fn run_phase<S: RunSource + Sync>(
    sources: &[S],
    snapshot: &LeakDatabase,
    root: &Path,
    jobs: usize,
    phase: Phase,
) -> Result<Vec<PhaseResult>, EngineError> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let jobs = jobs.clamp(1, sources.len());
    let chunk = sources.len().div_ceil(jobs);
    let worker = |part: &[S]| -> Result<Vec<PhaseResult>, EngineError> {
        let mut db = snapshot.clone();
        let mut out = Vec::with_capacity(part.len());
        for source in part {
            let run = replay(source)?;
            let reports = match phase {
                Phase::Detect => PhaseReport::Detect(detect_pass(&run, &mut db)?),
                Phase::Track => PhaseReport::Track(track_pass(&run, &mut db)?),
            };
            out.push((source.test_id().to_string(), reports));
        }
        db.save_merged(root)?;
        Ok(out)
    };
    if jobs == 1 {
        return worker(sources);
    }
    let results: Vec<Result<Vec<PhaseResult>, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| s.spawn(move || worker(part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("suite worker panicked"))
            .collect()
    });
    let mut all = Vec::with_capacity(sources.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}
