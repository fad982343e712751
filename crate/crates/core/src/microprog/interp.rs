use std::collections::HashMap;
use std::error::Error;
use std::fmt;

use super::{HeapKind, MicroProgram, Op, Statement, TestInput};
use crate::engine::RunSource;
use crate::trace::{
    AccessKind, AllocKind, BinaryIdentity, CodeLocation, EventKind, ExecutionRun, MemEvent,
    StackTrace,
};

/// Statements executed before a run is declared non-terminating.
pub const INSTRUCTION_BUDGET: u64 = 1_000_000;

/// First address handed out by the bump allocator.
const HEAP_BASE: u64 = 0x1000;
const HEAP_ALIGN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecError {
    UseOfUnallocatedVar { var: String, at: String },
    OutOfDecisions { at: String },
    InfiniteLoopGuard,
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecError::UseOfUnallocatedVar { var, at } => {
                write!(f, "{at}: variable {var:?} used before allocation")
            }
            ExecError::OutOfDecisions { at } => {
                write!(f, "{at}: test input has no decision left for this branch")
            }
            ExecError::InfiniteLoopGuard => {
                write!(f, "instruction budget of {INSTRUCTION_BUDGET} exhausted")
            }
        }
    }
}

impl Error for ExecError {}

struct Frame<'p> {
    function: &'p str,
    body: &'p [Statement],
    pc: usize,
}

struct Machine<'p> {
    prog: &'p MicroProgram,
    labels: HashMap<&'p str, HashMap<&'p str, usize>>,
    frames: Vec<Frame<'p>>,
    vars: HashMap<&'p str, u64>,
    next_addr: u64,
    decisions: &'p [bool],
    cursor: usize,
    events: Vec<MemEvent>,
}

impl<'p> Machine<'p> {
    /// Call chain at the current statement; callers report their call site.
    fn stack(&self) -> StackTrace {
        let frames = self
            .frames
            .iter()
            .rev()
            .map(|f| {
                let s = &f.body[f.pc];
                CodeLocation::new(f.function, s.file.as_str(), s.line)
                    .expect("validated statements have locations")
            })
            .collect();
        StackTrace::new(frames).expect("a running machine has a frame")
    }

    fn emit(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(MemEvent {
            seq,
            thread: 0,
            kind,
        });
    }

    fn bump(&mut self, size: u64) -> u64 {
        let addr = self.next_addr;
        self.next_addr = (addr + size.max(1)).div_ceil(HEAP_ALIGN) * HEAP_ALIGN;
        addr
    }

    fn var(&self, var: &str, s: &Statement) -> Result<u64, ExecError> {
        self.vars
            .get(var)
            .copied()
            .ok_or_else(|| ExecError::UseOfUnallocatedVar {
                var: var.to_string(),
                at: format!("{}:{}", s.file, s.line),
            })
    }

    fn jump(&mut self, label: &str) {
        let top = self.frames.last_mut().expect("running");
        top.pc = self.labels[top.function][label];
    }

    fn run(mut self) -> Result<Vec<MemEvent>, ExecError> {
        let mut executed: u64 = 0;
        loop {
            executed += 1;
            if executed > INSTRUCTION_BUDGET {
                return Err(ExecError::InfiniteLoopGuard);
            }
            let top = self.frames.last().expect("running");
            let body: &'p [Statement] = top.body;
            let s: &'p Statement = &body[top.pc];
            let mut advance = true;
            match &s.op {
                Op::Alloc { var, size, kind } => {
                    let addr = self.bump(*size);
                    self.vars.insert(var.as_str(), addr);
                    let stack = self.stack();
                    self.emit(EventKind::Alloc {
                        addr,
                        size: *size,
                        kind: match kind {
                            HeapKind::Malloc => AllocKind::Malloc,
                            HeapKind::Calloc => AllocKind::Calloc,
                        },
                        stack,
                    });
                }
                Op::Store { var, offset, size } | Op::Load { var, offset, size } => {
                    let base = self.var(var, s)?;
                    let kind = if matches!(s.op, Op::Store { .. }) {
                        AccessKind::Write
                    } else {
                        AccessKind::Read
                    };
                    let stack = self.stack();
                    self.emit(EventKind::Access {
                        addr: base + offset,
                        size: *size,
                        kind,
                        stack,
                    });
                }
                Op::Free { var } => {
                    let addr = self.var(var, s)?;
                    let stack = self.stack();
                    self.emit(EventKind::Free { addr, stack });
                }
                Op::Realloc { var, size } => {
                    let new_addr = self.bump(*size);
                    let stack = self.stack();
                    match self.vars.insert(var.as_str(), new_addr) {
                        Some(old_addr) => self.emit(EventKind::Realloc {
                            old_addr,
                            new_addr,
                            size: *size,
                            stack,
                        }),
                        None => self.emit(EventKind::Alloc {
                            addr: new_addr,
                            size: (*size).max(1),
                            kind: AllocKind::Realloc,
                            stack,
                        }),
                    }
                }
                Op::Call { function } => {
                    let (name, body) = self
                        .prog
                        .functions
                        .get_key_value(function)
                        .expect("validated call target");
                    self.frames.push(Frame {
                        function: name,
                        body,
                        pc: 0,
                    });
                    advance = false;
                }
                Op::Branch {
                    then_label,
                    else_label,
                } => {
                    let taken = *self.decisions.get(self.cursor).ok_or_else(|| {
                        ExecError::OutOfDecisions {
                            at: format!("{}:{}", s.file, s.line),
                        }
                    })?;
                    self.cursor += 1;
                    self.jump(if taken { then_label } else { else_label });
                }
                Op::Label { .. } => {}
                Op::Goto { label } => self.jump(label),
                Op::Return => {
                    self.frames.pop();
                    if self.frames.is_empty() {
                        self.emit(EventKind::Exit { code: 0 });
                        return Ok(self.events);
                    }
                }
                Op::Exit { code } => {
                    self.emit(EventKind::Exit { code: *code });
                    return Ok(self.events);
                }
            }
            if advance {
                self.frames.last_mut().expect("running").pc += 1;
            }
        }
    }
}

/// Runs `prog` on `input`. Equal program and input give identical runs.
///
/// Addresses come from a bump allocator starting at `0x1000` with 16-byte
/// alignment; freed memory is never handed out again within a run.
pub fn execute(
    prog: &MicroProgram,
    input: &TestInput,
    identity: &BinaryIdentity,
) -> Result<ExecutionRun, ExecError> {
    let (main, body) = prog
        .functions
        .get_key_value("main")
        .expect("validated program has main");
    let machine = Machine {
        prog,
        labels: prog.label_table(),
        frames: vec![Frame {
            function: main,
            body,
            pc: 0,
        }],
        vars: HashMap::new(),
        next_addr: HEAP_BASE,
        decisions: &input.decisions,
        cursor: 0,
        events: Vec::new(),
    };
    Ok(ExecutionRun {
        identity: identity.clone(),
        test_id: input.test_id.clone(),
        events: machine.run()?,
    })
}

/// A program and one of its inputs, replayable as often as needed.
#[derive(Debug, Clone)]
pub struct ProgramRun<'a> {
    pub program: &'a MicroProgram,
    pub input: TestInput,
    pub identity: BinaryIdentity,
}

impl RunSource for ProgramRun<'_> {
    fn test_id(&self) -> &str {
        &self.input.test_id
    }

    fn replay(&self) -> Result<ExecutionRun, Box<dyn Error + Send + Sync>> {
        Ok(execute(self.program, &self.input, &self.identity)?)
    }
}
