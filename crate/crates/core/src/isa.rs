//! Instruction set, vocabulary and the fixed one-glyph-per-token codec.
//!
//! Token ids are stable across implementations:
//!
//! | ids    | glyphs          | meaning                         |
//! |--------|-----------------|---------------------------------|
//! | 0      | `.`             | end of program                  |
//! | 1..=10 | `0`..`9`        | push digit                      |
//! | 11..=21| `+-*/%xn<>=!`   | arithmetic, extrema, comparison |
//! | 22, 23 | `{` `}`         | subroutine definition brackets  |
//! | 24..=26| `a` `b` `c`     | call subroutine 0..2            |
//! | 27..=64| none            | reserved                        |
//!
//! Every character maps to exactly one token. The alternate form remaps the
//! 22 comparison-task glyphs onto unrelated characters (`3` becomes `+`, `6`
//! becomes `9`, ...) while keeping the token ids unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the vocabulary. Always `< VOCAB_SIZE` inside a [`Program`].
pub type TokenId = u8;

/// Number of vocabulary slots, defined or reserved.
pub const VOCAB_SIZE: usize = 65;

/// Number of slots with a defined opcode (everything below is reserved).
pub const DEFINED_SLOTS: usize = 27;

/// Number of opcodes that make up the published comparison-task subset.
pub const CORE_OPCODES: usize = 22;

const STD_GLYPHS: [u8; DEFINED_SLOTS] = *b".0123456789+-*/%xn<>=!{}abc";
const ALT_GLYPHS: [u8; CORE_OPCODES] = *b".-[_+!#917^*/%)}Lb?$~&";

const NO_TOKEN: u8 = u8::MAX;

const fn build_lookup(glyphs: &[u8]) -> [u8; 128] {
    let mut table = [NO_TOKEN; 128];
    let mut i = 0;
    while i < glyphs.len() {
        table[glyphs[i] as usize] = i as u8;
        i += 1;
    }
    table
}

static STD_LOOKUP: [u8; 128] = build_lookup(&STD_GLYPHS);
static ALT_LOOKUP: [u8; 128] = build_lookup(&ALT_GLYPHS);

/// Which glyph table a program is written in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolForm {
    #[default]
    #[serde(alias = "std")]
    Standard,
    #[serde(alias = "alt")]
    Alternate,
}

impl SymbolForm {
    pub fn short_name(self) -> &'static str {
        match self {
            SymbolForm::Standard => "std",
            SymbolForm::Alternate => "alt",
        }
    }
}

impl fmt::Display for SymbolForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("unknown symbol {symbol:?} at position {position} for {form} form")]
    UnknownSymbol {
        position: usize,
        symbol: char,
        form: SymbolForm,
    },
    #[error("token {token} at position {position} has no glyph in {form} form")]
    UnprintableToken {
        position: usize,
        token: TokenId,
        form: SymbolForm,
    },
    #[error("opcode {0} is reserved and has no defined semantics")]
    ReservedOpcode(TokenId),
    #[error("token id {0} is outside the {VOCAB_SIZE}-slot vocabulary")]
    TokenOutOfRange(TokenId),
}

/// Decoded meaning of a token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCode {
    PushDigit(u8),
    Add,
    Sub,
    Mul,
    FloorDiv,
    Mod,
    Max,
    Min,
    Lt,
    Gt,
    Eq,
    Not,
    End,
    DefBegin,
    DefEnd,
    Call(u8),
    Reserved(TokenId),
}

impl OpCode {
    /// The three comparison opcodes, in token-id order.
    pub const COMPARISONS: [OpCode; 3] = [OpCode::Lt, OpCode::Gt, OpCode::Eq];

    /// The seven value-producing binary operators.
    pub const ARITHMETIC: [OpCode; 7] = [
        OpCode::Add,
        OpCode::Sub,
        OpCode::Mul,
        OpCode::FloorDiv,
        OpCode::Mod,
        OpCode::Max,
        OpCode::Min,
    ];

    pub fn from_token(id: TokenId) -> Result<OpCode, IsaError> {
        Ok(match id {
            0 => OpCode::End,
            1..=10 => OpCode::PushDigit(id - 1),
            11 => OpCode::Add,
            12 => OpCode::Sub,
            13 => OpCode::Mul,
            14 => OpCode::FloorDiv,
            15 => OpCode::Mod,
            16 => OpCode::Max,
            17 => OpCode::Min,
            18 => OpCode::Lt,
            19 => OpCode::Gt,
            20 => OpCode::Eq,
            21 => OpCode::Not,
            22 => OpCode::DefBegin,
            23 => OpCode::DefEnd,
            24..=26 => OpCode::Call(id - 24),
            27..=64 => OpCode::Reserved(id),
            _ => return Err(IsaError::TokenOutOfRange(id)),
        })
    }

    /// Token id of this opcode. `PushDigit` and `Call` arguments are taken
    /// modulo their range; `Reserved` ids are passed through unchanged.
    pub fn token(self) -> TokenId {
        match self {
            OpCode::End => 0,
            OpCode::PushDigit(d) => 1 + d % 10,
            OpCode::Add => 11,
            OpCode::Sub => 12,
            OpCode::Mul => 13,
            OpCode::FloorDiv => 14,
            OpCode::Mod => 15,
            OpCode::Max => 16,
            OpCode::Min => 17,
            OpCode::Lt => 18,
            OpCode::Gt => 19,
            OpCode::Eq => 20,
            OpCode::Not => 21,
            OpCode::DefBegin => 22,
            OpCode::DefEnd => 23,
            OpCode::Call(i) => 24 + i % 3,
            OpCode::Reserved(id) => id,
        }
    }

    /// Opcodes of the published comparison-task subset, in token-id order.
    pub fn core_set() -> [OpCode; CORE_OPCODES] {
        std::array::from_fn(|i| OpCode::decode(i as TokenId))
    }

    /// Every non-reserved opcode, in token-id order.
    pub fn defined_set() -> [OpCode; DEFINED_SLOTS] {
        std::array::from_fn(|i| OpCode::decode(i as TokenId))
    }

    /// Decoding for ids already known to be in range.
    pub(crate) fn decode(id: TokenId) -> OpCode {
        OpCode::from_token(id).unwrap_or(OpCode::Reserved(id))
    }

    pub fn is_reserved(self) -> bool {
        matches!(self, OpCode::Reserved(_))
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, OpCode::Lt | OpCode::Gt | OpCode::Eq)
    }

    pub fn glyph(self, form: SymbolForm) -> Option<char> {
        let id = self.token() as usize;
        let table: &[u8] = match form {
            SymbolForm::Standard => &STD_GLYPHS,
            SymbolForm::Alternate => &ALT_GLYPHS,
        };
        table.get(id).map(|&b| b as char)
    }

    pub fn from_glyph(ch: char, form: SymbolForm) -> Option<OpCode> {
        let table = match form {
            SymbolForm::Standard => &STD_LOOKUP,
            SymbolForm::Alternate => &ALT_LOOKUP,
        };
        let idx = ch as usize;
        if idx >= 128 || table[idx] == NO_TOKEN {
            return None;
        }
        Some(OpCode::decode(table[idx]))
    }

    /// (pop, push) counts. `Call` reports `(0, 0)` since its real effect is
    /// the effect of the bound body.
    pub fn arity(self) -> Option<(usize, usize)> {
        Some(match self {
            OpCode::PushDigit(_) => (0, 1),
            OpCode::Add
            | OpCode::Sub
            | OpCode::Mul
            | OpCode::FloorDiv
            | OpCode::Mod
            | OpCode::Max
            | OpCode::Min
            | OpCode::Lt
            | OpCode::Gt
            | OpCode::Eq => (2, 1),
            OpCode::Not => (1, 1),
            OpCode::End | OpCode::DefBegin | OpCode::DefEnd | OpCode::Call(_) => (0, 0),
            OpCode::Reserved(_) => return None,
        })
    }

    fn result_expr(self) -> Option<&'static str> {
        Some(match self {
            OpCode::Add => "a+b",
            OpCode::Sub => "a-b",
            OpCode::Mul => "a*b",
            OpCode::FloorDiv => "a//b",
            OpCode::Mod => "a%b",
            OpCode::Max => "max(a, b)",
            OpCode::Min => "min(a, b)",
            OpCode::Lt => "1 if a<b else 0",
            OpCode::Gt => "1 if a>b else 0",
            OpCode::Eq => "1 if a==b else 0",
            OpCode::Not => "0 if a else 1",
            _ => return None,
        })
    }

    /// Stack-effect notation, e.g. `(a b → max(a, b))`.
    pub fn stack_effect(self) -> Option<String> {
        Some(match self {
            OpCode::PushDigit(d) => format!("( → {d})"),
            OpCode::Not => "(a → 0 if a else 1)".to_string(),
            OpCode::End | OpCode::DefBegin | OpCode::DefEnd => "( → )".to_string(),
            OpCode::Call(_) => "(… → …)".to_string(),
            OpCode::Reserved(_) => return None,
            op => format!("(a b → {})", op.result_expr()?),
        })
    }

    pub fn description(self) -> Option<String> {
        Some(match self {
            OpCode::PushDigit(d) => format!("push {d}"),
            OpCode::End => "end program".to_string(),
            OpCode::DefBegin => "begin subroutine definition".to_string(),
            OpCode::DefEnd => "end subroutine definition".to_string(),
            OpCode::Call(i) => format!("call subroutine {i}"),
            OpCode::Reserved(_) => return None,
            op => op.result_expr()?.replace(", ", ","),
        })
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.glyph(SymbolForm::Standard) {
            Some(ch) => write!(f, "{ch}"),
            None => write!(f, "<{}>", self.token()),
        }
    }
}

/// Pop/push counts and a short description of an opcode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionInfo {
    pub pop: usize,
    pub push: usize,
    pub description: String,
}

pub fn instruction_info(op: OpCode) -> Result<InstructionInfo, IsaError> {
    match (op.arity(), op.description()) {
        (Some((pop, push)), Some(description)) => Ok(InstructionInfo {
            pop,
            push,
            description,
        }),
        _ => Err(IsaError::ReservedOpcode(op.token())),
    }
}

/// A fixed-tokenized instruction sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Program {
    tokens: Vec<TokenId>,
    form: SymbolForm,
}

impl Program {
    pub fn from_tokens(tokens: Vec<TokenId>) -> Result<Self, IsaError> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(IsaError::TokenOutOfRange(bad));
        }
        Ok(Program {
            tokens,
            form: SymbolForm::Standard,
        })
    }

    pub fn from_ops(ops: &[OpCode]) -> Self {
        Program {
            tokens: ops.iter().map(|op| op.token()).collect(),
            form: SymbolForm::Standard,
        }
    }

    /// Caller guarantees every id is `< VOCAB_SIZE`.
    pub(crate) fn from_raw(tokens: Vec<TokenId>) -> Self {
        debug_assert!(tokens.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        Program {
            tokens,
            form: SymbolForm::Standard,
        }
    }

    pub fn with_form(mut self, form: SymbolForm) -> Self {
        self.form = form;
        self
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    pub fn form(&self) -> SymbolForm {
        self.form
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = OpCode> + '_ {
        self.tokens.iter().map(|&t| OpCode::decode(t))
    }

    pub fn push(&mut self, op: OpCode) {
        self.tokens.push(op.token());
    }

    /// Standard-form text, or `None` if the program holds reserved tokens.
    pub fn to_standard(&self) -> Option<String> {
        decode(self, SymbolForm::Standard).ok()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in self.ops() {
            match op.glyph(self.form) {
                Some(ch) => write!(f, "{ch}")?,
                None => write!(f, "<{}>", op.token())?,
            }
        }
        Ok(())
    }
}

/// Parses `text` one glyph per token. In standard form a `[...]` wrapper
/// around the whole text is dropped first.
pub fn encode(text: &str, form: SymbolForm) -> Result<Program, IsaError> {
    let (body, offset) = match form {
        SymbolForm::Standard if text.len() >= 2 && text.starts_with('[') && text.ends_with(']') => {
            (&text[1..text.len() - 1], 1)
        }
        _ => (text, 0),
    };
    let tokens = body
        .chars()
        .enumerate()
        .map(|(i, ch)| {
            OpCode::from_glyph(ch, form)
                .map(OpCode::token)
                .ok_or(IsaError::UnknownSymbol {
                    position: i + offset,
                    symbol: ch,
                    form,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Program { tokens, form })
}

pub fn decode(program: &Program, form: SymbolForm) -> Result<String, IsaError> {
    program
        .tokens
        .iter()
        .enumerate()
        .map(|(position, &token)| {
            OpCode::decode(token)
                .glyph(form)
                .ok_or(IsaError::UnprintableToken {
                    position,
                    token,
                    form,
                })
        })
        .collect()
}

pub fn transcode(text: &str, from: SymbolForm, to: SymbolForm) -> Result<String, IsaError> {
    decode(&encode(text, from)?, to)
}

/// One row of the machine-readable instruction table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionEntry {
    pub id: TokenId,
    pub std: Option<String>,
    pub alt: Option<String>,
    pub pop: usize,
    pub push: usize,
    pub description: String,
    pub stack_effect: String,
}

/// The 65-slot vocabulary: glyph tables for both forms plus reserved slots.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub const fn size(self) -> usize {
        VOCAB_SIZE
    }

    pub fn glyph(self, id: TokenId, form: SymbolForm) -> Option<char> {
        OpCode::from_token(id).ok()?.glyph(form)
    }

    pub fn lookup(self, ch: char, form: SymbolForm) -> Option<TokenId> {
        OpCode::from_glyph(ch, form).map(OpCode::token)
    }

    /// Table rows for every defined (non-reserved) slot, in id order.
    pub fn entries(self) -> Vec<InstructionEntry> {
        OpCode::defined_set()
            .into_iter()
            .map(|op| {
                let info = instruction_info(op).expect("defined opcode");
                InstructionEntry {
                    id: op.token(),
                    std: op.glyph(SymbolForm::Standard).map(String::from),
                    alt: op.glyph(SymbolForm::Alternate).map(String::from),
                    pop: info.pop,
                    push: info.push,
                    description: info.description,
                    stack_effect: op.stack_effect().expect("defined opcode"),
                }
            })
            .collect()
    }

    pub fn dump_json(self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("table serializes")
    }
}
