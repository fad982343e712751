//! Fix location suggestion.
//!
//! All non-freed execution paths stored for a leak are compared. A path that
//! is a proper subsequence of another one is dropped: freeing after its last
//! point would be a use-after-free on the longer path. The last point of
//! each remaining (maximal) path is suggested as a place to insert the
//! deallocation. A leak whose maximal path is empty was never used after
//! allocation, so the suggestion is to free right after allocating.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::db::{ExecutionPath, LeakDatabase, LeakId};
use crate::trace::StackTrace;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuggestError {
    UnknownLeakId(LeakId),
}

impl fmt::Display for SuggestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuggestError::UnknownLeakId(id) => write!(f, "unknown leak id {id}"),
        }
    }
}

impl std::error::Error for SuggestError {}

/// True iff every element of `a` appears in `b` in order. Equal sequences
/// are subsequences of each other.
pub fn is_subsequence<T: PartialEq>(a: &[T], b: &[T]) -> bool {
    let mut rest = b.iter();
    a.iter().all(|x| rest.any(|y| y == x))
}

/// A path that survived subsequence filtering, with every test that
/// produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaximalPath {
    pub points: Vec<StackTrace>,
    pub test_ids: BTreeSet<String>,
}

impl MaximalPath {
    fn sort_key(&self) -> (std::cmp::Reverse<usize>, Vec<String>) {
        (
            std::cmp::Reverse(self.points.len()),
            self.points.iter().map(StackTrace::canonical).collect(),
        )
    }
}

/// Keeps the paths that are not a proper subsequence of another path.
///
/// Paths terminated by a free are ignored. Equal paths collapse into one
/// entry carrying all their test ids. Output is ordered by length
/// (longest first), then by the serialized points.
pub fn filter_subsumed(paths: &[ExecutionPath]) -> Vec<MaximalPath> {
    let mut distinct: Vec<MaximalPath> = Vec::new();
    for p in paths.iter().filter(|p| !p.terminated_by_free) {
        match distinct.iter_mut().find(|d| d.points == p.points()) {
            Some(d) => {
                d.test_ids.insert(p.test_id.clone());
            }
            None => distinct.push(MaximalPath {
                points: p.points().to_vec(),
                test_ids: BTreeSet::from([p.test_id.clone()]),
            }),
        }
    }
    // distinct entries, so "subsequence of another" is always proper
    let mut maximal: Vec<MaximalPath> = distinct
        .iter()
        .enumerate()
        .filter(|(i, d)| {
            !distinct
                .iter()
                .enumerate()
                .any(|(j, o)| *i != j && is_subsequence(&d.points, &o.points))
        })
        .map(|(_, d)| d.clone())
        .collect();
    maximal.sort_by_cached_key(MaximalPath::sort_key);
    maximal
}

/// Last points at which an inserted free would be followed by another use
/// on some maximal path: those occurring at a non-final position of any
/// maximal path, the path ending there included.
pub fn detect_conflicts(maximal: &[MaximalPath]) -> BTreeSet<StackTrace> {
    let lasts: BTreeSet<&StackTrace> = maximal.iter().filter_map(|m| m.points.last()).collect();
    let mut conflicted = BTreeSet::new();
    for m in maximal {
        let Some((_, body)) = m.points.split_last() else {
            continue;
        };
        for p in body {
            if lasts.contains(p) {
                conflicted.insert(p.clone());
            }
        }
    }
    conflicted
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "placement", rename_all = "snake_case")]
pub enum Placement {
    AfterAllocation,
    AfterPoint { point: StackTrace },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FixSuggestion {
    pub leak_id: LeakId,
    #[serde(flatten)]
    pub placement: Placement,
    pub supporting_tests: BTreeSet<String>,
    pub conflict: bool,
}

/// Suggested deallocation points for one leak.
pub fn suggest(db: &LeakDatabase, leak: &LeakId) -> Result<Vec<FixSuggestion>, SuggestError> {
    let record = db
        .record(leak)
        .ok_or_else(|| SuggestError::UnknownLeakId(leak.clone()))?;
    let maximal = filter_subsumed(&record.paths);
    let conflicts = detect_conflicts(&maximal);

    let mut out: Vec<FixSuggestion> = Vec::new();
    let mut add = |placement: Placement, tests: &BTreeSet<String>, conflict: bool| match out
        .iter_mut()
        .find(|s| s.placement == placement)
    {
        Some(s) => s.supporting_tests.extend(tests.iter().cloned()),
        None => out.push(FixSuggestion {
            leak_id: leak.clone(),
            placement,
            supporting_tests: tests.clone(),
            conflict,
        }),
    };
    if record.paths.is_empty() {
        add(Placement::AfterAllocation, &BTreeSet::new(), false);
    }
    for m in &maximal {
        match m.points.last() {
            None => add(Placement::AfterAllocation, &m.test_ids, false),
            Some(last) => add(
                Placement::AfterPoint {
                    point: last.clone(),
                },
                &m.test_ids,
                conflicts.contains(last),
            ),
        }
    }
    out.sort_by_cached_key(|s| match &s.placement {
        Placement::AfterAllocation => (0, String::new()),
        Placement::AfterPoint { point } => (1, point.canonical()),
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakStatus {
    Suggested,
    FreedOnAllObservedPaths,
}

impl fmt::Display for LeakStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeakStatus::Suggested => "suggested",
            LeakStatus::FreedOnAllObservedPaths => "freed on all observed paths",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakSuggestions {
    pub leak_id: LeakId,
    pub alloc_stack: StackTrace,
    pub paths: usize,
    pub freed_paths: usize,
    pub status: LeakStatus,
    pub suggestions: Vec<FixSuggestion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuggestionReport {
    pub binary: String,
    pub compile_stamp: String,
    pub leaks: Vec<LeakSuggestions>,
}

impl SuggestionReport {
    pub fn suggestion_count(&self) -> usize {
        self.leaks.iter().map(|l| l.suggestions.len()).sum()
    }
}

/// Suggestions for every leak of the database, in leak id order.
pub fn suggest_all(db: &LeakDatabase) -> SuggestionReport {
    let leaks = db
        .records()
        .map(|r| {
            let suggestions = suggest(db, &r.id).expect("record comes from this database");
            let status = if suggestions.is_empty() {
                LeakStatus::FreedOnAllObservedPaths
            } else {
                LeakStatus::Suggested
            };
            LeakSuggestions {
                leak_id: r.id.clone(),
                alloc_stack: r.alloc_stack.clone(),
                paths: r.paths.len(),
                freed_paths: r.paths.iter().filter(|p| p.terminated_by_free).count(),
                status,
                suggestions,
            }
        })
        .collect();
    SuggestionReport {
        binary: db.identity().to_string(),
        compile_stamp: db.compile_stamp().to_string(),
        leaks,
    }
}
