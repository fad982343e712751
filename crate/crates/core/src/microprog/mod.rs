//! Deterministic micro-programs.
//!
//! A micro-program is a handful of functions made of allocation, access,
//! call and branch statements, each tagged with a source file and line.
//! Executing one under a [`TestInput`] yields an [`ExecutionRun`] whose
//! stacks are the synthetic call chain, which makes small leak scenarios
//! reproducible without a compiler or a native runtime.
//!
//! Variables are program-global names bound to the address of their latest
//! allocation. Freeing a variable leaves it bound, so a later use touches the
//! dangling address the way a real program would.
//!
//! [`ExecutionRun`]: crate::trace::ExecutionRun

mod fixtures;
mod interp;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trace::{BinaryIdentity, TraceError};

pub use fixtures::{fixture, fixtures, Fixture, FIXTURE_NAMES};
pub use interp::{execute, ExecError, ProgramRun, INSTRUCTION_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeapKind {
    #[default]
    Malloc,
    Calloc,
}

fn one() -> u64 {
    1
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

fn is_one(v: &u64) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Alloc {
        var: String,
        size: u64,
        #[serde(default)]
        kind: HeapKind,
    },
    Store {
        var: String,
        #[serde(default, skip_serializing_if = "is_zero")]
        offset: u64,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        size: u64,
    },
    Load {
        var: String,
        #[serde(default, skip_serializing_if = "is_zero")]
        offset: u64,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        size: u64,
    },
    Free {
        var: String,
    },
    Realloc {
        var: String,
        size: u64,
    },
    Call {
        function: String,
    },
    /// Consumes the next branch decision of the test input.
    Branch {
        then_label: String,
        else_label: String,
    },
    Label {
        name: String,
    },
    Goto {
        label: String,
    },
    Return,
    Exit {
        code: i32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    #[serde(flatten)]
    pub op: Op,
    pub file: String,
    pub line: u32,
}

impl Statement {
    pub fn new(op: Op, file: &str, line: u32) -> Self {
        Statement {
            op,
            file: file.to_string(),
            line,
        }
    }
}

/// One test case: the outcomes of the branches it executes, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInput {
    #[serde(rename = "id")]
    pub test_id: String,
    #[serde(default)]
    pub decisions: Vec<bool>,
}

impl TestInput {
    pub fn new(test_id: impl Into<String>, decisions: impl Into<Vec<bool>>) -> Self {
        TestInput {
            test_id: test_id.into(),
            decisions: decisions.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroProgram {
    pub name: String,
    pub functions: BTreeMap<String, Vec<Statement>>,
    /// Test cases shipped with the program.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestInput>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgramError {
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    ValidationError(String),
}

impl fmt::Display for ProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProgramError::ParseError {
                line,
                column,
                message,
            } => write!(f, "program parse error at {line}:{column}: {message}"),
            ProgramError::ValidationError(reason) => write!(f, "invalid program: {reason}"),
        }
    }
}

impl std::error::Error for ProgramError {}

/// Parses and validates a program in the JSON program format.
pub fn load_program(text: &str) -> Result<MicroProgram, ProgramError> {
    let prog: MicroProgram = serde_json::from_str(text).map_err(|e| ProgramError::ParseError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    prog.validate()?;
    Ok(prog)
}

impl MicroProgram {
    pub fn validate(&self) -> Result<(), ProgramError> {
        let invalid = |msg: String| Err(ProgramError::ValidationError(msg));
        if self.name.is_empty() || self.name.contains('/') {
            return invalid(format!("program name {:?} must be a bare name", self.name));
        }
        if !self.functions.contains_key("main") {
            return invalid("no \"main\" function".into());
        }
        for (fname, body) in &self.functions {
            let Some(last) = body.last() else {
                return invalid(format!("function {fname:?} is empty"));
            };
            if !matches!(last.op, Op::Return | Op::Exit { .. } | Op::Goto { .. }) {
                return invalid(format!(
                    "function {fname:?} can fall off its end (last statement at {}:{})",
                    last.file, last.line
                ));
            }
            let mut labels = HashSet::new();
            for s in body {
                if let Op::Label { name } = &s.op {
                    if !labels.insert(name.as_str()) {
                        return invalid(format!("duplicate label {name:?} in {fname:?}"));
                    }
                }
            }
            for s in body {
                let at = || format!("{}:{}", s.file, s.line);
                if s.file.is_empty() || s.line == 0 {
                    return invalid(format!("statement in {fname:?} lacks a source location"));
                }
                match &s.op {
                    Op::Branch {
                        then_label,
                        else_label,
                    } => {
                        for l in [then_label, else_label] {
                            if !labels.contains(l.as_str()) {
                                return invalid(format!(
                                    "branch at {} targets missing label {l:?}",
                                    at()
                                ));
                            }
                        }
                    }
                    Op::Goto { label } if !labels.contains(label.as_str()) => {
                        return invalid(format!(
                            "goto at {} targets missing label {label:?}",
                            at()
                        ));
                    }
                    Op::Call { function } if !self.functions.contains_key(function) => {
                        return invalid(format!(
                            "call at {} to unknown function {function:?}",
                            at()
                        ));
                    }
                    Op::Alloc { size: 0, .. }
                    | Op::Store { size: 0, .. }
                    | Op::Load { size: 0, .. } => {
                        return invalid(format!("zero-sized operation at {}", at()));
                    }
                    _ => {}
                }
            }
        }
        let mut ids = HashSet::new();
        for t in &self.tests {
            if !ids.insert(t.test_id.as_str()) {
                return invalid(format!("duplicate test id {:?}", t.test_id));
            }
        }
        Ok(())
    }

    /// Stable fingerprint of the program text, used as its compile stamp.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&(&self.name, &self.functions))
            .expect("programs always serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Identity of this program as if built into `dir`.
    pub fn identity(&self, dir: &str) -> Result<BinaryIdentity, TraceError> {
        BinaryIdentity::new(self.name.clone(), dir, self.fingerprint())
    }

    pub fn statement_count(&self) -> usize {
        self.functions.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("programs always serialize")
    }

    fn label_table(&self) -> HashMap<&str, HashMap<&str, usize>> {
        self.functions
            .iter()
            .map(|(f, body)| {
                let labels = body
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| match &s.op {
                        Op::Label { name } => Some((name.as_str(), i)),
                        _ => None,
                    })
                    .collect();
                (f.as_str(), labels)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(main: &str) -> String {
        format!(r#"{{"name":"p","functions":{{"main":[{main}]}}}}"#)
    }

    #[test]
    fn loads_minimal_program() {
        let p = load_program(&prog(r#"{"op":"return","file":"a.c","line":1}"#)).unwrap();
        assert_eq!(p.statement_count(), 1);
        assert!(p.tests.is_empty());
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = load_program("{\n  \"name\": }").unwrap_err();
        assert!(
            matches!(err, ProgramError::ParseError { line: 2, .. }),
            "{err:?}"
        );
        let err = load_program(&prog(r#"{"op":"jump","file":"a.c","line":1}"#)).unwrap_err();
        assert!(matches!(err, ProgramError::ParseError { .. }));
    }

    #[test]
    fn validation_errors() {
        let cases = [
            // duplicate label
            prog(
                r#"{"op":"label","name":"L","file":"a.c","line":1},
                   {"op":"label","name":"L","file":"a.c","line":2},
                   {"op":"return","file":"a.c","line":3}"#,
            ),
            // branch to missing label
            prog(
                r#"{"op":"label","name":"L","file":"a.c","line":1},
                   {"op":"branch","then_label":"L","else_label":"M","file":"a.c","line":2},
                   {"op":"return","file":"a.c","line":3}"#,
            ),
            // falls off the end
            prog(r#"{"op":"alloc","var":"p","size":8,"file":"a.c","line":1}"#),
            // unknown callee
            prog(
                r#"{"op":"call","function":"nope","file":"a.c","line":1},
                   {"op":"return","file":"a.c","line":2}"#,
            ),
            // zero-sized allocation
            prog(
                r#"{"op":"alloc","var":"p","size":0,"file":"a.c","line":1},
                   {"op":"return","file":"a.c","line":2}"#,
            ),
            // missing location
            prog(r#"{"op":"return","file":"","line":1}"#),
            // no main
            r#"{"name":"p","functions":{"f":[{"op":"return","file":"a.c","line":1}]}}"#.to_string(),
        ];
        for c in cases {
            assert!(
                matches!(load_program(&c), Err(ProgramError::ValidationError(_))),
                "{c}"
            );
        }
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let p = fixture("table1_three_tests").unwrap().program;
        let back = load_program(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.fingerprint(), p.fingerprint());
        let mut changed = p.clone();
        changed.functions.get_mut("main").unwrap()[0].line += 1;
        assert_ne!(changed.fingerprint(), p.fingerprint());
        // tests are inputs, not part of the build
        let mut retested = p.clone();
        retested.tests.clear();
        assert_eq!(retested.fingerprint(), p.fingerprint());
    }
}
