//! Memory-leak fix localization.
//!
//! A test suite is run twice per test. The detect pass finds allocations
//! that are never freed and records their allocation stacks. The track pass
//! tags those allocations in shadow memory and records every access to them
//! as an execution path. The suggester turns the recorded paths into places
//! where a `free` can be inserted.

pub mod db;
pub mod engine;
pub mod microprog;
pub mod shadow;
pub mod suggest;
pub mod trace;

pub use db::{DbError, ExecutionPath, LeakDatabase, LeakId, LeakRecord};
pub use engine::{detect_pass, run_suite, run_test_twice, track_pass, EngineError, RunSource};
pub use suggest::{suggest, suggest_all, FixSuggestion, Placement, SuggestionReport};
pub use trace::{BinaryIdentity, CodeLocation, ExecutionRun, StackTrace};
