//! The total postfix stack machine.
//!
//! Any token sequence executes without faulting. Stack underflow, division
//! by zero, arithmetic overflow and reserved opcodes all produce `NAN`, and
//! `NAN` absorbs: an instruction that pops a `NAN` pushes only `NAN`.
//!
//! Subroutines are bound by a pre-pass over the whole program: the first
//! three `{...}` bodies become `a`, `b` and `c`, so a call may appear before
//! its definition. At run time a definition is stepped over in-line.

use std::fmt;
use std::ops::Range;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::isa::{OpCode, Program, TokenId};

/// A stack cell: a signed integer or the absorbing `NAN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Int(i64),
    Nan,
}

impl Value {
    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(v),
            Value::Nan => None,
        }
    }

    pub fn is_nan(self) -> bool {
        matches!(self, Value::Nan)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Nan => f.write_str("NAN"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Int(v) => serializer.serialize_i64(*v),
            Value::Nan => serializer.serialize_str("NAN"),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValueVisitor;

        impl Visitor<'_> for ValueVisitor {
            type Value = Value;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an integer or the string \"NAN\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
                Ok(Value::Int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
                i64::try_from(v)
                    .map(Value::Int)
                    .map_err(|_| E::custom("integer out of range"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
                if v == "NAN" {
                    Ok(Value::Nan)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(ValueVisitor)
    }
}

/// Zero and `NAN` are false; every other integer is true.
pub fn truthy(v: Value) -> bool {
    matches!(v, Value::Int(x) if x != 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmConfig {
    pub max_call_depth: usize,
    pub max_steps: usize,
    /// Width of the fixed-arity view returned by [`output_view`]. Never
    /// affects classification.
    pub output_arity: Option<usize>,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            max_call_depth: 16,
            max_steps: 4096,
            output_arity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum VmConfigError {
    #[error("max_call_depth must be at least 1")]
    ZeroCallDepth,
    #[error("max_steps must be at least 1")]
    ZeroSteps,
}

impl VmConfig {
    pub fn validate(&self) -> Result<(), VmConfigError> {
        if self.max_call_depth == 0 {
            return Err(VmConfigError::ZeroCallDepth);
        }
        if self.max_steps == 0 {
            return Err(VmConfigError::ZeroSteps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MachineState {
    pub stack: Vec<Value>,
    pub pc: usize,
    pub subroutines: [Option<Range<usize>>; 3],
    pub call_depth: usize,
}

impl MachineState {
    pub fn with_stack(stack: Vec<Value>) -> Self {
        MachineState {
            stack,
            ..Default::default()
        }
    }
}

/// Stack snapshot after one consumed top-level token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub pos: usize,
    pub token: TokenId,
    pub stack: Vec<Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    pub fn consumed_count(&self) -> usize {
        self.entries.len()
    }

    /// One JSON object per line: `{"pos":..,"token":..,"stack":[..]}`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("trace entry serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Halt {
    /// Stopped at an End token.
    End,
    /// Ran off the end of the token sequence.
    Exhausted,
    /// Hit `max_steps`.
    StepLimit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    /// Final stack, bottom to top.
    pub outputs: Vec<Value>,
    pub trace: ExecutionTrace,
    pub halt: Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    TrueProgram,
    FalseProgram,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub classification: Classification,
    pub outputs: Vec<Value>,
}

impl Verdict {
    pub fn is_true(&self) -> bool {
        self.classification == Classification::TrueProgram
    }
}

#[inline]
fn pop(stack: &mut Vec<Value>) -> Value {
    stack.pop().unwrap_or(Value::Nan)
}

fn floor_div(a: i64, b: i64) -> Option<i64> {
    if b == 0 {
        return None;
    }
    let q = a.checked_div(b)?;
    if a % b != 0 && ((a < 0) != (b < 0)) {
        Some(q - 1)
    } else {
        Some(q)
    }
}

fn floor_mod(a: i64, b: i64) -> Option<i64> {
    if b == 0 {
        return None;
    }
    if b == -1 {
        return Some(0);
    }
    let r = a % b;
    if r != 0 && ((r < 0) != (b < 0)) {
        Some(r + b)
    } else {
        Some(r)
    }
}

/// Result of a binary opcode on two integers; `None` means `NAN`.
pub fn binary_result(op: OpCode, a: i64, b: i64) -> Option<i64> {
    match op {
        OpCode::Add => a.checked_add(b),
        OpCode::Sub => a.checked_sub(b),
        OpCode::Mul => a.checked_mul(b),
        OpCode::FloorDiv => floor_div(a, b),
        OpCode::Mod => floor_mod(a, b),
        OpCode::Max => Some(a.max(b)),
        OpCode::Min => Some(a.min(b)),
        OpCode::Lt => Some((a < b) as i64),
        OpCode::Gt => Some((a > b) as i64),
        OpCode::Eq => Some((a == b) as i64),
        _ => None,
    }
}

/// Applies the stack effect of a data opcode. Control opcodes (`End`,
/// `{`, `}`, calls) leave the stack alone; reserved opcodes push `NAN`.
#[inline]
pub fn apply(stack: &mut Vec<Value>, op: OpCode) {
    match op {
        OpCode::PushDigit(d) => stack.push(Value::Int(d as i64)),
        OpCode::Not => {
            let v = match pop(stack) {
                Value::Int(0) => Value::Int(1),
                Value::Int(_) => Value::Int(0),
                Value::Nan => Value::Nan,
            };
            stack.push(v);
        }
        OpCode::End | OpCode::DefBegin | OpCode::DefEnd | OpCode::Call(_) => {}
        OpCode::Reserved(_) => stack.push(Value::Nan),
        op => {
            let b = pop(stack);
            let a = pop(stack);
            let v = match (a, b) {
                (Value::Int(a), Value::Int(b)) => {
                    binary_result(op, a, b).map_or(Value::Nan, Value::Int)
                }
                _ => Value::Nan,
            };
            stack.push(v);
        }
    }
}

/// Single-instruction transition on the data stack. Control flow (halting,
/// definition skipping, calls) belongs to [`execute`], so those opcodes only
/// advance `pc` here.
pub fn step(mut state: MachineState, op: OpCode) -> MachineState {
    apply(&mut state.stack, op);
    state.pc += 1;
    state
}

/// Where each `{` jumps to, plus the bound subroutine bodies.
struct Layout {
    /// For a matched `{` at index i: index of its `}`.
    def_end: Vec<Option<usize>>,
    bodies: [Option<Range<usize>>; 3],
}

fn layout(tokens: &[TokenId]) -> Layout {
    let begin = OpCode::DefBegin.token();
    let end = OpCode::DefEnd.token();
    let mut def_end = Vec::new();
    let mut bodies: [Option<Range<usize>>; 3] = Default::default();
    if !tokens.contains(&begin) {
        return Layout { def_end, bodies };
    }
    def_end = vec![None; tokens.len()];
    let mut bound = 0;
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == begin {
            match tokens[i + 1..].iter().position(|&t| t == end) {
                Some(off) => {
                    let j = i + 1 + off;
                    def_end[i] = Some(j);
                    if bound < bodies.len() {
                        bodies[bound] = Some(i + 1..j);
                        bound += 1;
                    }
                    i = j + 1;
                    continue;
                }
                // No `}` remains, so every later `{` is unmatched too.
                None => break,
            }
        }
        i += 1;
    }
    Layout { def_end, bodies }
}

struct Runner<'a> {
    tokens: &'a [TokenId],
    layout: Layout,
    config: VmConfig,
    steps: usize,
}

enum CallOutcome {
    Returned,
    StepLimit,
}

impl Runner<'_> {
    fn call(&mut self, index: u8, stack: &mut Vec<Value>) -> CallOutcome {
        let Some(body) = self.layout.bodies[index as usize].clone() else {
            stack.push(Value::Nan);
            return CallOutcome::Returned;
        };
        // frames.len() is the current call depth.
        let mut frames: Vec<Range<usize>> = vec![body];
        while let Some(frame) = frames.last_mut() {
            let Some(pos) = frame.next() else {
                frames.pop();
                continue;
            };
            if self.steps >= self.config.max_steps {
                return CallOutcome::StepLimit;
            }
            self.steps += 1;
            match OpCode::decode(self.tokens[pos]) {
                OpCode::End => {
                    frames.pop();
                }
                OpCode::Call(j) => match &self.layout.bodies[j as usize] {
                    Some(body) if frames.len() < self.config.max_call_depth => {
                        frames.push(body.clone());
                    }
                    _ => stack.push(Value::Nan),
                },
                op => apply(stack, op),
            }
        }
        CallOutcome::Returned
    }

    fn run(&mut self, mut trace: Option<&mut Vec<TraceEntry>>) -> (Vec<Value>, Halt) {
        let mut stack = Vec::new();
        let mut pc = 0;
        let mut skip_until: Option<usize> = None;
        let mut halt = Halt::Exhausted;
        while pc < self.tokens.len() {
            if self.steps >= self.config.max_steps {
                halt = Halt::StepLimit;
                break;
            }
            self.steps += 1;
            let token = self.tokens[pc];
            let op = OpCode::decode(token);
            let mut stop = None;
            if let Some(end) = skip_until {
                if pc == end {
                    skip_until = None;
                }
            } else {
                match op {
                    OpCode::End => stop = Some(Halt::End),
                    OpCode::DefBegin => {
                        if let Some(end) = self.layout.def_end.get(pc).copied().flatten() {
                            skip_until = Some(end);
                        }
                    }
                    OpCode::Call(i) => {
                        if let CallOutcome::StepLimit = self.call(i, &mut stack) {
                            stop = Some(Halt::StepLimit);
                        }
                    }
                    op => apply(&mut stack, op),
                }
            }
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(TraceEntry {
                    pos: pc,
                    token,
                    stack: stack.clone(),
                });
            }
            pc += 1;
            if let Some(h) = stop {
                halt = h;
                break;
            }
        }
        (stack, halt)
    }
}

fn run_tokens(
    tokens: &[TokenId],
    config: &VmConfig,
    trace: Option<&mut Vec<TraceEntry>>,
) -> (Vec<Value>, Halt) {
    let mut runner = Runner {
        tokens,
        layout: layout(tokens),
        config: *config,
        steps: 0,
    };
    runner.run(trace)
}

/// Runs a program and records the stack after every consumed token.
pub fn execute(program: &Program, config: &VmConfig) -> Execution {
    let mut entries = Vec::with_capacity(program.len());
    let (outputs, halt) = run_tokens(program.tokens(), config, Some(&mut entries));
    Execution {
        outputs,
        trace: ExecutionTrace { entries },
        halt,
    }
}

/// Final stack of a raw token slice, without tracing.
pub fn run(tokens: &[TokenId], config: &VmConfig) -> Vec<Value> {
    run_tokens(tokens, config, None).0
}

pub fn verdict_of(outputs: Vec<Value>) -> Verdict {
    let classification = if !outputs.is_empty() && outputs.iter().all(|&v| truthy(v)) {
        Classification::TrueProgram
    } else {
        Classification::FalseProgram
    };
    Verdict {
        classification,
        outputs,
    }
}

pub fn classify(program: &Program, config: &VmConfig) -> Verdict {
    verdict_of(run(program.tokens(), config))
}

pub fn classify_tokens(tokens: &[TokenId], config: &VmConfig) -> Verdict {
    verdict_of(run(tokens, config))
}

/// Top `k` values, padded below with `NAN` when the stack is shorter.
pub fn output_view(outputs: &[Value], k: usize) -> Vec<Value> {
    let take = outputs.len().min(k);
    let mut view = vec![Value::Nan; k - take];
    view.extend_from_slice(&outputs[outputs.len() - take..]);
    view
}
