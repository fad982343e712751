//! Event-trace data model and the JSON Lines wire format.
//!
//! Every piece of execution information enters the engine as an
//! [`ExecutionRun`]: an ordered list of [`MemEvent`]s for one test case of one
//! binary. Runs come either from the micro-program interpreter or from a
//! native producer writing the wire format parsed by [`parse_event_stream`].
//!
//! Leak and code-point identity is the symbolic [`StackTrace`], never a
//! machine address. Frames that carry only an address normalize to a single
//! canonical unknown frame so stack depths stay comparable across builds.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Function name used for frames that carry no symbol.
pub const UNKNOWN_FUNCTION: &str = "<unknown>";

/// Version tag carried by every wire record.
pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceError {
    MalformedLine { line: usize, reason: String },
    NonMonotonicSeq { line: usize },
    MissingExit,
    UnknownEventKind { line: usize, kind: String },
    TrailingEventsAfterExit { line: usize },
    EmptyStack,
    InvalidLocation(String),
    InvalidIdentity(String),
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::MalformedLine { line, reason } => {
                write!(f, "malformed event record on line {line}: {reason}")
            }
            TraceError::NonMonotonicSeq { line } => {
                write!(f, "sequence number on line {line} does not increase")
            }
            TraceError::MissingExit => write!(f, "event stream has no exit record"),
            TraceError::UnknownEventKind { line, kind } => {
                write!(f, "unknown event kind {kind:?} on line {line}")
            }
            TraceError::TrailingEventsAfterExit { line } => {
                write!(f, "event on line {line} follows the exit record")
            }
            TraceError::EmptyStack => write!(f, "stack trace has no frames"),
            TraceError::InvalidLocation(reason) => write!(f, "invalid code location: {reason}"),
            TraceError::InvalidIdentity(reason) => write!(f, "invalid binary identity: {reason}"),
        }
    }
}

impl std::error::Error for TraceError {}

/// One stack frame: function, source file and 1-based line.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "FrameRepr", into = "FrameRepr")]
pub struct CodeLocation {
    function: String,
    file: String,
    line: u32,
}

#[derive(Serialize, Deserialize)]
struct FrameRepr {
    #[serde(rename = "fn")]
    function: String,
    file: String,
    line: u32,
}

impl TryFrom<FrameRepr> for CodeLocation {
    type Error = TraceError;

    fn try_from(r: FrameRepr) -> Result<Self, Self::Error> {
        CodeLocation::new(r.function, r.file, r.line)
    }
}

impl From<CodeLocation> for FrameRepr {
    fn from(c: CodeLocation) -> Self {
        FrameRepr {
            function: c.function,
            file: c.file,
            line: c.line,
        }
    }
}

impl CodeLocation {
    /// Builds a location. `line` may be 0 only when `file` is empty.
    pub fn new(
        function: impl Into<String>,
        file: impl Into<String>,
        line: u32,
    ) -> Result<Self, TraceError> {
        let function = function.into();
        let file = file.into();
        if function.is_empty() {
            return Err(TraceError::InvalidLocation("empty function name".into()));
        }
        if line == 0 && !file.is_empty() {
            return Err(TraceError::InvalidLocation(format!(
                "line 0 with non-empty file {file:?}"
            )));
        }
        Ok(CodeLocation {
            function,
            file,
            line,
        })
    }

    pub fn unknown() -> Self {
        CodeLocation {
            function: UNKNOWN_FUNCTION.to_string(),
            file: String::new(),
            line: 0,
        }
    }

    pub fn function(&self) -> &str {
        &self.function
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    pub fn line(&self) -> u32 {
        self.line
    }

    pub fn is_unknown(&self) -> bool {
        self.function == UNKNOWN_FUNCTION && self.file.is_empty() && self.line == 0
    }
}

impl fmt::Display for CodeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.file.is_empty() {
            write!(f, "{}", self.function)
        } else {
            write!(f, "{}:{} in {}", self.file, self.line, self.function)
        }
    }
}

/// A call stack, innermost frame first. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<CodeLocation>", into = "Vec<CodeLocation>")]
pub struct StackTrace(Vec<CodeLocation>);

impl TryFrom<Vec<CodeLocation>> for StackTrace {
    type Error = TraceError;

    fn try_from(frames: Vec<CodeLocation>) -> Result<Self, Self::Error> {
        StackTrace::new(frames)
    }
}

impl From<StackTrace> for Vec<CodeLocation> {
    fn from(s: StackTrace) -> Self {
        s.0
    }
}

impl StackTrace {
    pub fn new(frames: Vec<CodeLocation>) -> Result<Self, TraceError> {
        if frames.is_empty() {
            return Err(TraceError::EmptyStack);
        }
        Ok(StackTrace(frames))
    }

    pub fn frames(&self) -> &[CodeLocation] {
        &self.0
    }

    /// Innermost frame.
    pub fn top(&self) -> &CodeLocation {
        &self.0[0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Compact JSON of the frames. Used for digests and deterministic ordering.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }
}

impl fmt::Display for StackTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, frame) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " <- ")?;
            }
            write!(f, "{frame}")?;
        }
        Ok(())
    }
}

/// A frame as emitted by a producer, before normalization.
///
/// Symbolic producers fill `function`/`file`/`line`; producers without
/// symbols emit only `addr`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFrame {
    #[serde(rename = "fn", default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
}

impl RawFrame {
    pub fn symbolic(function: &str, file: &str, line: u32) -> Self {
        RawFrame {
            function: Some(function.to_string()),
            file: Some(file.to_string()),
            line: Some(line),
            addr: None,
        }
    }

    pub fn address(addr: u64) -> Self {
        RawFrame {
            addr: Some(format!("{addr:#x}")),
            ..RawFrame::default()
        }
    }
}

impl From<&CodeLocation> for RawFrame {
    fn from(c: &CodeLocation) -> Self {
        RawFrame::symbolic(&c.function, &c.file, c.line)
    }
}

/// Maps raw producer frames to an address-free [`StackTrace`].
///
/// Frames without a function symbol become the canonical unknown frame.
/// A frame whose line is missing or 0 keeps its function but loses its file,
/// since a file without a line does not identify a code point.
pub fn normalize_stack(raw: &[RawFrame]) -> Result<StackTrace, TraceError> {
    if raw.is_empty() {
        return Err(TraceError::EmptyStack);
    }
    let frames = raw
        .iter()
        .map(|r| match r.function.as_deref() {
            None | Some("") => CodeLocation::unknown(),
            Some(function) => {
                let line = r.line.unwrap_or(0);
                let file = if line == 0 {
                    String::new()
                } else {
                    r.file.clone().unwrap_or_default()
                };
                CodeLocation {
                    function: function.to_string(),
                    line: if file.is_empty() { 0 } else { line },
                    file,
                }
            }
        })
        .collect();
    Ok(StackTrace(frames))
}

/// Identity of an instrumented binary: its name, its absolute directory and
/// a caller-supplied build fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryIdentity {
    name: String,
    dir: String,
    compile_stamp: String,
}

impl BinaryIdentity {
    pub fn new(
        name: impl Into<String>,
        dir: impl Into<String>,
        compile_stamp: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let name = name.into();
        let dir = dir.into();
        let compile_stamp = compile_stamp.into();
        if name.is_empty() || name.contains('/') || name.contains('\\') {
            return Err(TraceError::InvalidIdentity(format!(
                "binary name {name:?} must be a bare file name"
            )));
        }
        if !dir.starts_with('/') {
            return Err(TraceError::InvalidIdentity(format!(
                "directory {dir:?} is not absolute"
            )));
        }
        if compile_stamp.is_empty() {
            return Err(TraceError::InvalidIdentity("empty compile stamp".into()));
        }
        Ok(BinaryIdentity {
            name,
            dir,
            compile_stamp,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dir(&self) -> &str {
        &self.dir
    }

    pub fn compile_stamp(&self) -> &str {
        &self.compile_stamp
    }

    /// Same binary, different build.
    pub fn with_stamp(&self, compile_stamp: impl Into<String>) -> Result<Self, TraceError> {
        BinaryIdentity::new(self.name.clone(), self.dir.clone(), compile_stamp)
    }

    /// True when name and directory match, regardless of build.
    pub fn same_binary(&self, other: &BinaryIdentity) -> bool {
        self.name == other.name && self.dir == other.dir
    }
}

impl fmt::Display for BinaryIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sep = if self.dir.ends_with('/') { "" } else { "/" };
        write!(f, "{}{}{}", self.dir, sep, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocKind {
    Malloc,
    Calloc,
    /// `realloc` of a null pointer: a fresh allocation.
    Realloc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Alloc {
        addr: u64,
        size: u64,
        kind: AllocKind,
        stack: StackTrace,
    },
    Realloc {
        old_addr: u64,
        new_addr: u64,
        size: u64,
        stack: StackTrace,
    },
    Free {
        addr: u64,
        stack: StackTrace,
    },
    Access {
        addr: u64,
        size: u64,
        kind: AccessKind,
        stack: StackTrace,
    },
    Exit {
        code: i32,
    },
}

impl EventKind {
    fn tag(&self) -> &'static str {
        match self {
            EventKind::Alloc { .. } => "alloc",
            EventKind::Realloc { .. } => "realloc",
            EventKind::Free { .. } => "free",
            EventKind::Access { .. } => "access",
            EventKind::Exit { .. } => "exit",
        }
    }

    pub fn stack(&self) -> Option<&StackTrace> {
        match self {
            EventKind::Alloc { stack, .. }
            | EventKind::Realloc { stack, .. }
            | EventKind::Free { stack, .. }
            | EventKind::Access { stack, .. } => Some(stack),
            EventKind::Exit { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemEvent {
    pub seq: u64,
    pub thread: u64,
    pub kind: EventKind,
}

/// All events observed for one test case of one binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRun {
    pub identity: BinaryIdentity,
    pub test_id: String,
    pub events: Vec<MemEvent>,
}

impl ExecutionRun {
    /// Checks the collective event invariants: strictly increasing seq,
    /// positive alloc/access sizes, exactly one exit, and it comes last.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut prev: Option<u64> = None;
        let mut exit_seen = false;
        for (i, ev) in self.events.iter().enumerate() {
            let line = i + 1;
            if exit_seen {
                return Err(TraceError::TrailingEventsAfterExit { line });
            }
            if prev.is_some_and(|p| ev.seq <= p) {
                return Err(TraceError::NonMonotonicSeq { line });
            }
            prev = Some(ev.seq);
            match &ev.kind {
                EventKind::Alloc { size: 0, .. } | EventKind::Access { size: 0, .. } => {
                    return Err(TraceError::MalformedLine {
                        line,
                        reason: "size must be positive".into(),
                    })
                }
                EventKind::Exit { .. } => exit_seen = true,
                _ => {}
            }
        }
        if !exit_seen {
            return Err(TraceError::MissingExit);
        }
        Ok(())
    }

    pub fn exit_code(&self) -> Option<i32> {
        match self.events.last().map(|e| &e.kind) {
            Some(EventKind::Exit { code }) => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct WireEvent {
    v: Option<u32>,
    seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thread: Option<u64>,
    ev: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    old_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stack: Option<Vec<RawFrame>>,
}

fn hex_addr(a: u64) -> String {
    format!("{a:#x}")
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses a JSON Lines event stream into a validated run.
///
/// Blank lines are skipped. Unknown top-level fields are ignored; an unknown
/// `ev` value is an error.
pub fn parse_event_stream(
    text: &str,
    identity: BinaryIdentity,
    test_id: &str,
) -> Result<ExecutionRun, TraceError> {
    let mut events = Vec::new();
    let mut prev_seq: Option<u64> = None;
    let mut exit_seen = false;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        if exit_seen {
            return Err(TraceError::TrailingEventsAfterExit { line });
        }
        let event = parse_record(raw_line, line)?;
        if prev_seq.is_some_and(|p| event.seq <= p) {
            return Err(TraceError::NonMonotonicSeq { line });
        }
        prev_seq = Some(event.seq);
        exit_seen = matches!(event.kind, EventKind::Exit { .. });
        events.push(event);
    }
    if !exit_seen {
        return Err(TraceError::MissingExit);
    }
    Ok(ExecutionRun {
        identity,
        test_id: test_id.to_string(),
        events,
    })
}

fn parse_record(text: &str, line: usize) -> Result<MemEvent, TraceError> {
    let malformed = |reason: String| TraceError::MalformedLine { line, reason };
    let w: WireEvent = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    match w.v {
        Some(WIRE_VERSION) => {}
        Some(v) => return Err(malformed(format!("unsupported record version {v}"))),
        None => return Err(malformed("missing \"v\"".into())),
    }
    let seq = w.seq.ok_or_else(|| malformed("missing \"seq\"".into()))?;
    let ev =
        w.ev.as_deref()
            .ok_or_else(|| malformed("missing \"ev\"".into()))?;

    let addr_field = |name: &str, v: &Option<String>| -> Result<u64, TraceError> {
        let s = v
            .as_deref()
            .ok_or_else(|| malformed(format!("missing \"{name}\"")))?;
        parse_hex(s).ok_or_else(|| malformed(format!("bad address {s:?} in \"{name}\"")))
    };
    let size = |positive: bool| -> Result<u64, TraceError> {
        let s = w.size.ok_or_else(|| malformed("missing \"size\"".into()))?;
        if positive && s == 0 {
            return Err(malformed("size must be positive".into()));
        }
        Ok(s)
    };
    let stack = || -> Result<StackTrace, TraceError> {
        let frames = w
            .stack
            .as_deref()
            .ok_or_else(|| malformed("missing \"stack\"".into()))?;
        normalize_stack(frames).map_err(|e| malformed(e.to_string()))
    };
    let kind_field = || {
        w.kind
            .as_deref()
            .ok_or_else(|| malformed("missing \"kind\"".into()))
    };

    let kind = match ev {
        "alloc" => EventKind::Alloc {
            addr: addr_field("addr", &w.addr)?,
            size: size(true)?,
            kind: match kind_field()? {
                "malloc" => AllocKind::Malloc,
                "calloc" => AllocKind::Calloc,
                "realloc" => AllocKind::Realloc,
                other => return Err(malformed(format!("bad alloc kind {other:?}"))),
            },
            stack: stack()?,
        },
        "realloc" => EventKind::Realloc {
            old_addr: addr_field("old_addr", &w.old_addr)?,
            new_addr: addr_field("new_addr", &w.new_addr)?,
            size: size(false)?,
            stack: stack()?,
        },
        "free" => EventKind::Free {
            addr: addr_field("addr", &w.addr)?,
            stack: stack()?,
        },
        "access" => EventKind::Access {
            addr: addr_field("addr", &w.addr)?,
            size: size(true)?,
            kind: match kind_field()? {
                "read" => AccessKind::Read,
                "write" => AccessKind::Write,
                other => return Err(malformed(format!("bad access kind {other:?}"))),
            },
            stack: stack()?,
        },
        "exit" => EventKind::Exit {
            code: w.code.ok_or_else(|| malformed("missing \"code\"".into()))?,
        },
        other => {
            return Err(TraceError::UnknownEventKind {
                line,
                kind: other.to_string(),
            })
        }
    };
    Ok(MemEvent {
        seq,
        thread: w.thread.unwrap_or(0),
        kind,
    })
}

/// Serializes one event as a single wire record (no trailing newline).
pub fn write_event(event: &MemEvent) -> String {
    let mut w = WireEvent {
        v: Some(WIRE_VERSION),
        seq: Some(event.seq),
        thread: Some(event.thread),
        ev: Some(event.kind.tag().to_string()),
        ..WireEvent::default()
    };
    match &event.kind {
        EventKind::Alloc {
            addr, size, kind, ..
        } => {
            w.addr = Some(hex_addr(*addr));
            w.size = Some(*size);
            w.kind = Some(
                match kind {
                    AllocKind::Malloc => "malloc",
                    AllocKind::Calloc => "calloc",
                    AllocKind::Realloc => "realloc",
                }
                .to_string(),
            );
        }
        EventKind::Realloc {
            old_addr,
            new_addr,
            size,
            ..
        } => {
            w.old_addr = Some(hex_addr(*old_addr));
            w.new_addr = Some(hex_addr(*new_addr));
            w.size = Some(*size);
        }
        EventKind::Free { addr, .. } => w.addr = Some(hex_addr(*addr)),
        EventKind::Access {
            addr, size, kind, ..
        } => {
            w.addr = Some(hex_addr(*addr));
            w.size = Some(*size);
            w.kind = Some(
                match kind {
                    AccessKind::Read => "read",
                    AccessKind::Write => "write",
                }
                .to_string(),
            );
        }
        EventKind::Exit { code } => w.code = Some(*code),
    }
    w.stack = event
        .kind
        .stack()
        .map(|s| s.frames().iter().map(RawFrame::from).collect());
    serde_json::to_string(&w).expect("wire records always serialize")
}

/// Serializes a run as a JSON Lines stream, one record per line.
pub fn write_event_stream(run: &ExecutionRun) -> String {
    let mut out = String::new();
    for ev in &run.events {
        out.push_str(&write_event(ev));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident() -> BinaryIdentity {
        BinaryIdentity::new("a.out", "/tmp/proj", "s1").unwrap()
    }

    const STACK: &str = r#""stack":[{"fn":"main","file":"a.c","line":3}]"#;

    #[test]
    fn minimal_stream_parses() {
        let text = format!(
            "{{\"v\":1,\"seq\":1,\"ev\":\"alloc\",\"addr\":\"0x10\",\"size\":8,\"kind\":\"malloc\",{STACK}}}\n\
             {{\"v\":1,\"seq\":2,\"ev\":\"exit\",\"code\":0}}\n"
        );
        let run = parse_event_stream(&text, ident(), "t").unwrap();
        assert_eq!(run.events.len(), 2);
        assert_eq!(run.events[0].thread, 0);
        match &run.events[0].kind {
            EventKind::Alloc {
                addr,
                size,
                kind,
                stack,
            } => {
                assert_eq!(*addr, 0x10);
                assert_eq!(*size, 8);
                assert_eq!(*kind, AllocKind::Malloc);
                assert_eq!(stack.top().line(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(run.exit_code(), Some(0));
    }

    #[test]
    fn decreasing_seq_rejected() {
        let text = format!(
            "{{\"v\":1,\"seq\":3,\"ev\":\"free\",\"addr\":\"0x10\",{STACK}}}\n\
             {{\"v\":1,\"seq\":2,\"ev\":\"exit\",\"code\":0}}\n"
        );
        assert_eq!(
            parse_event_stream(&text, ident(), "t").unwrap_err(),
            TraceError::NonMonotonicSeq { line: 2 }
        );
    }

    #[test]
    fn equal_seq_rejected() {
        let text = "{\"v\":1,\"seq\":2,\"ev\":\"exit\",\"code\":0}\n".repeat(2);
        // the duplicate is caught as trailing before seq is even compared
        assert_eq!(
            parse_event_stream(&text, ident(), "t").unwrap_err(),
            TraceError::TrailingEventsAfterExit { line: 2 }
        );
    }

    #[test]
    fn stream_errors() {
        let no_exit = format!("{{\"v\":1,\"seq\":1,\"ev\":\"free\",\"addr\":\"0x10\",{STACK}}}\n");
        assert_eq!(
            parse_event_stream(&no_exit, ident(), "t").unwrap_err(),
            TraceError::MissingExit
        );

        let unknown = "{\"v\":1,\"seq\":1,\"ev\":\"mmap\"}\n";
        assert_eq!(
            parse_event_stream(unknown, ident(), "t").unwrap_err(),
            TraceError::UnknownEventKind {
                line: 1,
                kind: "mmap".into()
            }
        );

        let trailing = format!(
            "{{\"v\":1,\"seq\":1,\"ev\":\"exit\",\"code\":0}}\n\
             {{\"v\":1,\"seq\":2,\"ev\":\"free\",\"addr\":\"0x10\",{STACK}}}\n"
        );
        assert_eq!(
            parse_event_stream(&trailing, ident(), "t").unwrap_err(),
            TraceError::TrailingEventsAfterExit { line: 2 }
        );

        for bad in [
            "not json",
            "{\"seq\":1,\"ev\":\"exit\",\"code\":0}",
            "{\"v\":2,\"seq\":1,\"ev\":\"exit\",\"code\":0}",
            "{\"v\":1,\"seq\":1,\"ev\":\"exit\"}",
            "{\"v\":1,\"seq\":1,\"ev\":\"free\",\"addr\":\"16\",\"stack\":[{\"fn\":\"f\",\"file\":\"a.c\",\"line\":1}]}",
            "{\"v\":1,\"seq\":1,\"ev\":\"free\",\"addr\":\"0x10\",\"stack\":[]}",
            "{\"v\":1,\"seq\":1,\"ev\":\"access\",\"addr\":\"0x10\",\"size\":0,\"kind\":\"read\",\"stack\":[{\"fn\":\"f\",\"file\":\"a.c\",\"line\":1}]}",
            "{\"v\":1,\"seq\":1,\"ev\":\"access\",\"addr\":\"0x10\",\"size\":4,\"kind\":\"exec\",\"stack\":[{\"fn\":\"f\",\"file\":\"a.c\",\"line\":1}]}",
        ] {
            let err = parse_event_stream(bad, ident(), "t").unwrap_err();
            assert!(
                matches!(err, TraceError::MalformedLine { line: 1, .. }),
                "{bad}: {err:?}"
            );
        }
    }

    #[test]
    fn unknown_fields_ignored() {
        let text =
            "{\"v\":1,\"seq\":7,\"ev\":\"exit\",\"code\":3,\"pid\":99,\"extra\":{\"a\":1}}\n";
        let run = parse_event_stream(text, ident(), "t").unwrap();
        assert_eq!(run.exit_code(), Some(3));
    }

    #[test]
    fn normalize_identity_and_addresses() {
        let one = normalize_stack(&[RawFrame::symbolic("main", "a.c", 3)]).unwrap();
        assert_eq!(
            one.frames(),
            &[CodeLocation::new("main", "a.c", 3).unwrap()]
        );

        let addr_only = normalize_stack(&[RawFrame::address(0x4005d0)]).unwrap();
        assert_eq!(addr_only.frames(), &[CodeLocation::unknown()]);

        let mixed = normalize_stack(&[
            RawFrame::symbolic("leaf", "b.c", 10),
            RawFrame::address(0x4005d0),
            RawFrame::symbolic("main", "a.c", 3),
        ])
        .unwrap();
        assert_eq!(mixed.len(), 3);
        assert!(mixed.frames()[1].is_unknown());
        assert_eq!(mixed.frames()[0].function(), "leaf");
        assert_eq!(mixed.frames()[2].function(), "main");

        assert_eq!(normalize_stack(&[]).unwrap_err(), TraceError::EmptyStack);
    }

    #[test]
    fn normalize_drops_file_without_line() {
        let raw = RawFrame {
            function: Some("f".into()),
            file: Some("x.c".into()),
            line: None,
            addr: Some("0x1".into()),
        };
        let s = normalize_stack(&[raw]).unwrap();
        assert_eq!(s.top(), &CodeLocation::new("f", "", 0).unwrap());
    }

    #[test]
    fn location_invariants() {
        assert!(CodeLocation::new("", "a.c", 1).is_err());
        assert!(CodeLocation::new("f", "a.c", 0).is_err());
        assert!(CodeLocation::new("f", "", 0).is_ok());
        assert!(StackTrace::new(vec![]).is_err());
    }

    #[test]
    fn identity_invariants() {
        assert!(BinaryIdentity::new("a.out", "/x", "s").is_ok());
        assert!(BinaryIdentity::new("bin/a.out", "/x", "s").is_err());
        assert!(BinaryIdentity::new("a.out", "x", "s").is_err());
        assert!(BinaryIdentity::new("a.out", "/x", "").is_err());
        assert_eq!(ident().to_string(), "/tmp/proj/a.out");
    }

    #[test]
    fn stack_serializes_as_wire_frames() {
        let s = normalize_stack(&[RawFrame::symbolic("main", "a.c", 3)]).unwrap();
        assert_eq!(s.canonical(), r#"[{"fn":"main","file":"a.c","line":3}]"#);
        let back: StackTrace = serde_json::from_str(&s.canonical()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<StackTrace>("[]").is_err());
    }
}
