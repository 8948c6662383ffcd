//! Fixtures shared by the benchmarks.

use cadmus_core::templates::{sample, TemplateKind, TemplateSpec};
use cadmus_core::Program;

/// `n` true programs from one template, fixed seed.
pub fn programs(kind: TemplateKind, n: u64) -> Vec<Program> {
    let spec = TemplateSpec::new(kind, 7);
    (0..n).map(|i| sample(&spec, i).expect("sampling succeeds")).collect()
}
