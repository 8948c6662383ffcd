//! Reference implementation of the Cadmus stack-machine language: ISA, VM,
//! program templates, exhaustive enumeration, dataset I/O and the
//! evaluation harness.

pub mod corpus;
pub mod enumerate;
pub mod harness;
pub mod isa;
pub mod seed;
pub mod templates;
pub mod vm;

pub use enumerate::{enum_value_programs, GridEntry, GridSpec, ValueProgramSet};
pub use isa::{decode, encode, OpCode, Program, SymbolForm, TokenId, Vocabulary, VOCAB_SIZE};
pub use templates::{sample, sample_mixture, MixtureSpec, TemplateKind, TemplateSpec};
pub use vm::{classify, execute, run, Classification, ExecutionTrace, Value, VmConfig};
