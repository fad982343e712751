//! Command implementations behind the `leakwatch` binary.

use std::error::Error;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use leakwatch::db::DbError;
use leakwatch::engine::{DetectReport, SuiteOutcome, TrackReport};
use leakwatch::microprog::{load_program, MicroProgram, ProgramRun, TestInput};
use leakwatch::suggest::LeakStatus;
use leakwatch::trace::parse_event_stream;
use leakwatch::{
    detect_pass, run_suite, suggest_all, track_pass, BinaryIdentity, EngineError, ExecutionRun,
    LeakDatabase, Placement, RunSource, StackTrace, SuggestionReport,
};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ENGINE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CORRUPT_DB: i32 = 3;
pub const EXIT_LEAKS: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    CorruptDb(DbError),
    Db(DbError),
    Engine(EngineError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::CorruptDb(_) => EXIT_CORRUPT_DB,
            CliError::Db(_) | CliError::Engine(_) => EXIT_ENGINE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::CorruptDb(e) | CliError::Db(e) => write!(f, "{e}"),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl Error for CliError {}

impl From<DbError> for CliError {
    fn from(e: DbError) -> Self {
        match e {
            DbError::CorruptDatabase { .. } => CliError::CorruptDb(e),
            other => CliError::Db(other),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Db(db) => db.into(),
            other => CliError::Engine(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Phase {
    Detect,
    Track,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OverheadError {
    NonPositiveBaseline(f64),
}

impl fmt::Display for OverheadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OverheadError::NonPositiveBaseline(t) => {
                write!(f, "baseline time must be positive, got {t}")
            }
        }
    }
}

impl Error for OverheadError {}

/// Slowdown of the instrumented run relative to the baseline, in percent.
pub fn overhead(t_instrumented: f64, t_baseline: f64) -> Result<f64, OverheadError> {
    if t_baseline.is_nan() || t_baseline <= 0.0 {
        return Err(OverheadError::NonPositiveBaseline(t_baseline));
    }
    Ok((t_instrumented - t_baseline) / t_baseline * 100.0)
}

/// Where the test cases of a suite come from.
#[derive(Debug, Clone)]
pub enum SuiteSource {
    /// A micro-program; `inputs` replaces the tests shipped in the program
    /// when non-empty. `dir` overrides the directory used in its identity.
    Program {
        path: PathBuf,
        inputs: Vec<TestInput>,
        dir: Option<String>,
    },
    /// One `<test id>.jsonl` event stream per test case.
    TraceDir {
        dir: PathBuf,
        identity: BinaryIdentity,
    },
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub source: SuiteSource,
    pub db_root: PathBuf,
    pub jobs: usize,
}

/// Parses `id=tft` into a test input; `t`/`1` take a branch, `f`/`0` skip it.
pub fn parse_test_input(spec: &str) -> Result<TestInput, CliError> {
    let (id, bits) = spec.split_once('=').unwrap_or((spec, ""));
    if id.is_empty() {
        return Err(CliError::Config(format!("test input {spec:?} has no id")));
    }
    let decisions = bits
        .chars()
        .filter(|c| *c != ',')
        .map(|c| match c {
            't' | 'T' | '1' => Ok(true),
            'f' | 'F' | '0' => Ok(false),
            _ => Err(CliError::Config(format!(
                "test input {spec:?}: decision {c:?} is not one of t, f, 1, 0"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TestInput::new(id, decisions))
}

pub fn read_program(path: &Path) -> Result<MicroProgram, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    load_program(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Identity of a program file: its name, the absolute directory holding it
/// (or `dir`), and its fingerprint as compile stamp.
pub fn program_identity(
    prog: &MicroProgram,
    path: &Path,
    dir: Option<&str>,
) -> Result<BinaryIdentity, CliError> {
    let dir = match dir {
        Some(d) => d.to_string(),
        None => {
            let abs = fs::canonicalize(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            abs.parent()
                .unwrap_or(Path::new("/"))
                .to_string_lossy()
                .into_owned()
        }
    };
    prog.identity(&dir)
        .map_err(|e| CliError::Config(e.to_string()))
}

/// An event stream on disk, parsed afresh on every replay.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub path: PathBuf,
    pub test_id: String,
    pub identity: BinaryIdentity,
}

impl RunSource for TraceFile {
    fn test_id(&self) -> &str {
        &self.test_id
    }

    fn replay(&self) -> Result<ExecutionRun, Box<dyn Error + Send + Sync>> {
        let text = fs::read_to_string(&self.path)?;
        let run = parse_event_stream(&text, self.identity.clone(), &self.test_id)
            .map_err(|e| format!("{}: {e}", self.path.display()))?;
        Ok(run)
    }
}

/// The `*.jsonl` files of `dir`, in file name order.
pub fn trace_dir_sources(
    dir: &Path,
    identity: &BinaryIdentity,
) -> Result<Vec<TraceFile>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Config(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|x| x == "jsonl") && path.is_file() {
            let test_id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push(TraceFile {
                path,
                test_id,
                identity: identity.clone(),
            });
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

/// Runs every test case of the suite twice, then suggests fixes from the
/// resulting database.
pub fn cmd_run_suite(config: &SuiteConfig) -> Result<(SuggestionReport, SuiteOutcome), CliError> {
    let outcome = match &config.source {
        SuiteSource::Program { path, inputs, dir } => {
            let prog = read_program(path)?;
            let identity = program_identity(&prog, path, dir.as_deref())?;
            let inputs = if inputs.is_empty() {
                prog.tests.clone()
            } else {
                inputs.clone()
            };
            let sources: Vec<ProgramRun> = inputs
                .into_iter()
                .map(|input| ProgramRun {
                    program: &prog,
                    input,
                    identity: identity.clone(),
                })
                .collect();
            run_suite(&sources, &identity, &config.db_root, config.jobs)?
        }
        SuiteSource::TraceDir { dir, identity } => {
            let sources = trace_dir_sources(dir, identity)?;
            run_suite(&sources, identity, &config.db_root, config.jobs)?
        }
    };
    Ok((suggest_all(&outcome.db), outcome))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestReport {
    Detect(DetectReport),
    Track(TrackReport),
}

/// Runs one pass over a stored event stream and saves the database.
pub fn cmd_ingest(
    trace: &Path,
    identity: &BinaryIdentity,
    test_id: &str,
    db_root: &Path,
    phase: Phase,
) -> Result<IngestReport, CliError> {
    let text = fs::read_to_string(trace)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", trace.display())))?;
    let run = parse_event_stream(&text, identity.clone(), test_id)
        .map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))?;
    let mut db = LeakDatabase::open_or_create(db_root, identity)?;
    let report = match phase {
        Phase::Detect => IngestReport::Detect(detect_pass(&run, &mut db)?),
        Phase::Track => IngestReport::Track(track_pass(&run, &mut db)?),
    };
    db.save_merged(db_root)?;
    Ok(report)
}

pub fn cmd_suggest(
    identity: &BinaryIdentity,
    db_root: &Path,
) -> Result<SuggestionReport, CliError> {
    let db = LeakDatabase::open_or_create(db_root, identity)?;
    Ok(suggest_all(&db))
}

pub fn cmd_db_show(identity: &BinaryIdentity, db_root: &Path) -> Result<LeakDatabase, CliError> {
    Ok(LeakDatabase::open_or_create(db_root, identity)?)
}

pub fn cmd_db_flush(identity: &BinaryIdentity, db_root: &Path) -> Result<LeakDatabase, CliError> {
    let db = LeakDatabase::empty(identity.clone());
    db.save(db_root)?;
    Ok(db)
}

fn plural(n: usize, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

fn write_stack(out: &mut String, stack: &StackTrace, indent: &str) {
    for frame in stack.frames() {
        let _ = writeln!(out, "{indent}{frame}");
    }
}

pub fn render_report(report: &SuggestionReport, format: Format, verbose: bool) -> String {
    if format == Format::Json {
        let mut s = serde_json::to_string_pretty(report).expect("reports always serialize");
        s.push('\n');
        return s;
    }
    let mut out = String::new();
    let _ = writeln!(out, "{} (stamp {})", report.binary, report.compile_stamp);
    let _ = writeln!(
        out,
        "{}, {}",
        plural(report.leaks.len(), "leak", "leaks"),
        plural(report.suggestion_count(), "suggestion", "suggestions")
    );
    for leak in &report.leaks {
        let _ = writeln!(
            out,
            "leak {} allocated at {}",
            leak.leak_id.short(),
            leak.alloc_stack.top()
        );
        if verbose {
            write_stack(&mut out, &leak.alloc_stack, "    ");
        }
        let _ = writeln!(
            out,
            "  {}, {} ending in free",
            plural(leak.paths, "path", "paths"),
            leak.freed_paths
        );
        if leak.status == LeakStatus::FreedOnAllObservedPaths {
            let _ = writeln!(out, "  {}", leak.status);
        }
        for s in &leak.suggestions {
            let tests: Vec<&str> = s.supporting_tests.iter().map(String::as_str).collect();
            let conflict = if s.conflict { " (conflict)" } else { "" };
            match &s.placement {
                Placement::AfterAllocation => {
                    let _ = writeln!(
                        out,
                        "  free after allocation at {}{conflict} [{}]",
                        leak.alloc_stack.top(),
                        tests.join(", ")
                    );
                }
                Placement::AfterPoint { point } => {
                    let _ = writeln!(
                        out,
                        "  free after {}{conflict} [{}]",
                        point.top(),
                        tests.join(", ")
                    );
                    if verbose {
                        write_stack(&mut out, point, "    ");
                    }
                }
            }
        }
    }
    out
}

pub fn render_db(db: &LeakDatabase, format: Format, verbose: bool) -> String {
    if format == Format::Json {
        let mut s = db.to_json();
        s.push('\n');
        return s;
    }
    let mut out = String::new();
    let _ = writeln!(out, "{} (stamp {})", db.identity(), db.compile_stamp());
    let _ = writeln!(
        out,
        "{}, {}, {}",
        plural(db.len(), "leak", "leaks"),
        plural(db.path_count(), "path", "paths"),
        plural(db.point_count(), "point", "points")
    );
    for rec in db.records() {
        let _ = writeln!(
            out,
            "leak {} allocated at {}",
            rec.id.short(),
            rec.alloc_stack.top()
        );
        for p in &rec.paths {
            let end = if p.terminated_by_free { ", freed" } else { "" };
            let _ = writeln!(
                out,
                "  path from {}: {}{end}",
                p.test_id,
                plural(p.len(), "point", "points")
            );
            if verbose {
                for point in p.points() {
                    let _ = writeln!(out, "    {}", point.top());
                }
            }
        }
    }
    out
}

pub fn render_ingest(report: &IngestReport, format: Format) -> String {
    let value = match report {
        IngestReport::Detect(d) => json!({
            "phase": "detect",
            "leaks_found": d.leaks_found.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(),
            "allocated": d.allocated_count,
            "freed": d.freed_count,
            "invalid_frees": d.invalid_frees.len(),
            "double_frees": d.double_frees.len(),
        }),
        IngestReport::Track(t) => json!({
            "phase": "track",
            "paths_recorded": t.paths_recorded.len(),
            "tagged_allocations": t.tagged_allocations,
            "reports_fired": t.reports_fired,
        }),
    };
    if format == Format::Json {
        return format!("{value:#}\n");
    }
    match report {
        IngestReport::Detect(d) => {
            let mut out = format!(
                "detect: {} found ({} allocated, {} freed)\n",
                plural(d.leaks_found.len(), "leak", "leaks"),
                d.allocated_count,
                d.freed_count
            );
            for (seq, addr) in &d.invalid_frees {
                let _ = writeln!(out, "  invalid free of {addr:#x} at event {seq}");
            }
            for (seq, addr) in &d.double_frees {
                let _ = writeln!(out, "  double free of {addr:#x} at event {seq}");
            }
            out
        }
        IngestReport::Track(t) => format!(
            "track: {} recorded, {} tagged, {} fired\n",
            plural(t.paths_recorded.len(), "path", "paths"),
            plural(t.tagged_allocations, "allocation", "allocations"),
            plural(t.reports_fired, "report", "reports")
        ),
    }
}

pub fn render_overhead(percent: f64, format: Format) -> String {
    match format {
        Format::Json => format!("{}\n", json!({ "overhead_percent": percent })),
        Format::Text => format!("{percent:.2}%\n"),
    }
}
