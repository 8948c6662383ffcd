//! Seeded samplers for verified true-programs.
//!
//! Arithmetic templates are constructive: a random expression tree is
//! emitted in postfix and closed with a comparison that is known to hold,
//! so almost every draw is accepted. Every sample is still run through the
//! VM before it is returned.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{OpCode, Program, TokenId};
use crate::seed::{derive_seed, rng_for};
use crate::vm::{classify, classify_tokens, execute, Halt, Value, VmConfig};

const RANDOM_TAG: u64 = 0x5241_4E44_4F4D;
const LENGTH_TAG: u64 = 0x4C_454E;
const SHUFFLE_TAG: u64 = 0x53_4855_4646;
/// Inner retry budget before the whole candidate is redrawn.
const INNER_TRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    BasicMath,
    Equality,
    Ordering,
    Subroutines,
    Random,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::BasicMath,
        TemplateKind::Equality,
        TemplateKind::Ordering,
        TemplateKind::Subroutines,
        TemplateKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::BasicMath => "basic-math",
            TemplateKind::Equality => "equality",
            TemplateKind::Ordering => "ordering",
            TemplateKind::Subroutines => "subroutines",
            TemplateKind::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<TemplateKind> {
        TemplateKind::ALL.into_iter().find(|k| k.name() == name)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Operator-count range per expression; token-length range for `Random`.
    pub fn default_len_params(self) -> LenParams {
        match self {
            TemplateKind::BasicMath => LenParams { min: 1, max: 2 },
            TemplateKind::Equality | TemplateKind::Ordering => LenParams { min: 1, max: 3 },
            TemplateKind::Subroutines => LenParams { min: 1, max: 2 },
            TemplateKind::Random => LenParams { min: 2, max: 8 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenParams {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub kind: TemplateKind,
    pub value_bound: i64,
    pub len_params: LenParams,
    pub seed: u64,
}

pub const DEFAULT_VALUE_BOUND: i64 = 20;
const MAX_OPS: usize = 8;
const MAX_RANDOM_LEN: usize = 64;

impl TemplateSpec {
    pub fn new(kind: TemplateKind, seed: u64) -> Self {
        TemplateSpec {
            kind,
            value_bound: DEFAULT_VALUE_BOUND,
            len_params: kind.default_len_params(),
            seed,
        }
    }

    pub fn with_value_bound(mut self, bound: i64) -> Self {
        self.value_bound = bound;
        self
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.value_bound < 9 {
            return Err(TemplateError::ValueBoundTooSmall(self.value_bound));
        }
        let LenParams { min, max } = self.len_params;
        let (lo, hi) = match self.kind {
            TemplateKind::Random => (1, MAX_RANDOM_LEN),
            _ => (0, MAX_OPS),
        };
        if min > max || min < lo || max > hi {
            return Err(TemplateError::InvalidLenParams { min, max });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepairFailure {
    AlreadyTrue,
    NoOutputs,
    NanOutput,
    /// A false value sits below the top of the stack, out of reach of `!`.
    BuriedFalseOutput,
    StepLimit,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TemplateError {
    #[error("value bound {0} is below 9, digits alone would exceed it")]
    ValueBoundTooSmall(i64),
    #[error("invalid length parameters {min}..={max}")]
    InvalidLenParams { min: usize, max: usize },
    #[error("random programs need at least one token")]
    ZeroLength,
    #[error("mixture weight {0} is not a positive finite number")]
    InvalidWeight(f64),
    #[error("program cannot be repaired by negation: {0:?}")]
    NotRepairable(RepairFailure),
}

/// Arithmetic expression tree over digit leaves. `Arg` stands for a
/// subroutine argument that is already on the stack when the body runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Arg,
    Bin(OpCode, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: OpCode, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Bin(op, Box::new(lhs), Box::new(rhs))
    }

    /// Parses standard-form postfix (`941-*`), with `#` for the argument.
    pub fn parse_postfix(text: &str) -> Option<Expr> {
        let mut stack = Vec::new();
        for ch in text.chars() {
            if ch == '#' {
                stack.push(Expr::Arg);
                continue;
            }
            match OpCode::from_glyph(ch, crate::isa::SymbolForm::Standard)? {
                OpCode::PushDigit(d) => stack.push(Expr::Digit(d)),
                op if OpCode::ARITHMETIC.contains(&op) => {
                    let rhs = stack.pop()?;
                    let lhs = stack.pop()?;
                    stack.push(Expr::bin(op, lhs, rhs));
                }
                _ => return None,
            }
        }
        if stack.len() == 1 {
            stack.pop()
        } else {
            None
        }
    }

    pub fn eval(&self, arg: i64) -> Option<i64> {
        self.eval_bounded(arg, i64::MAX)
    }

    /// Value of the tree, or `None` if any subtree is `NAN` or leaves
    /// `[-bound, bound]`.
    pub fn eval_bounded(&self, arg: i64, bound: i64) -> Option<i64> {
        let v = match self {
            Expr::Digit(d) => *d as i64,
            Expr::Arg => arg,
            Expr::Bin(op, l, r) => {
                let a = l.eval_bounded(arg, bound)?;
                let b = r.eval_bounded(arg, bound)?;
                crate::vm::binary_result(*op, a, b)?
            }
        };
        (v.abs() <= bound).then_some(v)
    }

    /// Postfix tokens. `Arg` emits nothing, so it must be the leftmost leaf.
    pub fn emit(&self, out: &mut Vec<TokenId>) {
        match self {
            Expr::Digit(d) => out.push(OpCode::PushDigit(*d).token()),
            Expr::Arg => {}
            Expr::Bin(op, l, r) => {
                l.emit(out);
                r.emit(out);
                out.push(op.token());
            }
        }
    }

    fn with_leftmost_arg(self) -> Expr {
        match self {
            Expr::Digit(_) | Expr::Arg => Expr::Arg,
            Expr::Bin(op, l, r) => Expr::Bin(op, Box::new(l.with_leftmost_arg()), r),
        }
    }

    fn random(rng: &mut ChaCha8Rng, ops: usize) -> Expr {
        if ops == 0 {
            return Expr::Digit(rng.random_range(0..10));
        }
        let left = rng.random_range(0..ops);
        let op = OpCode::ARITHMETIC[rng.random_range(0..OpCode::ARITHMETIC.len())];
        let l = Expr::random(rng, left);
        let r = Expr::random(rng, ops - 1 - left);
        Expr::bin(op, l, r)
    }
}

fn relation(a: i64, b: i64) -> OpCode {
    match a.cmp(&b) {
        std::cmp::Ordering::Less => OpCode::Lt,
        std::cmp::Ordering::Greater => OpCode::Gt,
        std::cmp::Ordering::Equal => OpCode::Eq,
    }
}

/// Tokens of `rhs` followed by a `c +` / `c -` step that brings it to
/// `target`, or `None` if the gap is more than one digit.
fn balanced(rhs: &Expr, arg: i64, target: i64) -> Option<Vec<TokenId>> {
    let gap = target - rhs.eval(arg)?;
    if gap.abs() > 9 {
        return None;
    }
    let mut out = Vec::new();
    rhs.emit(&mut out);
    out.push(OpCode::PushDigit(gap.unsigned_abs() as u8).token());
    out.push(if gap >= 0 { OpCode::Add } else { OpCode::Sub }.token());
    Some(out)
}

/// `lhs rhs c + =.` where `c` makes both sides equal.
pub fn equality_program(lhs: &Expr, rhs: &Expr) -> Option<Program> {
    let target = lhs.eval(0)?;
    let mut tokens = Vec::new();
    lhs.emit(&mut tokens);
    tokens.extend(balanced(rhs, 0, target)?);
    tokens.push(OpCode::Eq.token());
    tokens.push(OpCode::End.token());
    Some(Program::from_raw(tokens))
}

/// `lhs rhs R.` with `R` the relation that actually holds.
pub fn comparison_program(lhs: &Expr, rhs: &Expr) -> Option<Program> {
    let (a, b) = (lhs.eval(0)?, rhs.eval(0)?);
    let mut tokens = Vec::new();
    lhs.emit(&mut tokens);
    rhs.emit(&mut tokens);
    tokens.push(relation(a, b).token());
    tokens.push(OpCode::End.token());
    Some(Program::from_raw(tokens))
}

/// Subroutine program comparing `f(arg)` with `rhs`. With `balance` the
/// right side gets a `c +` adjustment and the relation is `=`.
pub fn subroutine_program(
    body: &Expr,
    arg: u8,
    rhs: &Expr,
    balance: bool,
    call_first: bool,
) -> Option<Program> {
    let value = body.eval(arg as i64)?;
    let mut def = vec![OpCode::DefBegin.token()];
    body.emit(&mut def);
    def.push(OpCode::DefEnd.token());

    let mut main = vec![OpCode::PushDigit(arg).token(), OpCode::Call(0).token()];
    if balance {
        main.extend(balanced(rhs, 0, value)?);
        main.push(OpCode::Eq.token());
    } else {
        rhs.emit(&mut main);
        main.push(relation(value, rhs.eval(0)?).token());
    }
    let tokens = if call_first {
        [main, def, vec![OpCode::End.token()]].concat()
    } else {
        [def, main, vec![OpCode::End.token()]].concat()
    };
    Some(Program::from_raw(tokens))
}

fn ops_in(rng: &mut ChaCha8Rng, len: LenParams) -> usize {
    rng.random_range(len.min..=len.max)
}

fn bounded_expr(rng: &mut ChaCha8Rng, ops: usize, bound: i64) -> (Expr, i64) {
    loop {
        let e = Expr::random(rng, ops);
        if let Some(v) = e.eval_bounded(0, bound) {
            return (e, v);
        }
    }
}

/// Right-hand side whose value is different from `avoid`.
fn distinct_expr(rng: &mut ChaCha8Rng, ops: usize, bound: i64, avoid: i64) -> Option<Expr> {
    (0..INNER_TRIES).find_map(|_| {
        let (e, v) = bounded_expr(rng, ops, bound);
        (v != avoid).then_some(e)
    })
}

fn balanced_expr(rng: &mut ChaCha8Rng, ops: usize, bound: i64, target: i64) -> Option<Vec<TokenId>> {
    (0..INNER_TRIES).find_map(|_| {
        let (e, _) = bounded_expr(rng, ops, bound);
        balanced(&e, 0, target)
    })
}

fn draw_basic_math(rng: &mut ChaCha8Rng, spec: &TemplateSpec) -> Option<Vec<TokenId>> {
    let ops = ops_in(rng, spec.len_params);
    let (e, v) = bounded_expr(rng, ops, spec.value_bound);
    let d: u8 = rng.random_range(0..10);
    let digit = Expr::Digit(d);
    let program = if rng.random_bool(0.5) {
        comparison_program(&digit, &e)?
    } else {
        comparison_program(&e, &digit)?
    };
    debug_assert!(v.abs() <= spec.value_bound);
    Some(program.into_tokens())
}

fn draw_equality(rng: &mut ChaCha8Rng, spec: &TemplateSpec) -> Option<Vec<TokenId>> {
    let (lhs_ops, rhs_ops) = (ops_in(rng, spec.len_params), ops_in(rng, spec.len_params));
    let (lhs, target) = bounded_expr(rng, lhs_ops, spec.value_bound);
    let rhs = balanced_expr(rng, rhs_ops, spec.value_bound, target)?;
    let mut tokens = Vec::new();
    lhs.emit(&mut tokens);
    tokens.extend(rhs);
    tokens.push(OpCode::Eq.token());
    tokens.push(OpCode::End.token());
    Some(tokens)
}

fn draw_ordering(rng: &mut ChaCha8Rng, spec: &TemplateSpec) -> Option<Vec<TokenId>> {
    let (lhs_ops, rhs_ops) = (ops_in(rng, spec.len_params), ops_in(rng, spec.len_params));
    let (lhs, a) = bounded_expr(rng, lhs_ops, spec.value_bound);
    let rhs = distinct_expr(rng, rhs_ops, spec.value_bound, a)?;
    Some(comparison_program(&lhs, &rhs)?.into_tokens())
}

fn draw_subroutine(rng: &mut ChaCha8Rng, spec: &TemplateSpec) -> Option<Vec<TokenId>> {
    let bound = spec.value_bound;
    let body_ops = ops_in(rng, spec.len_params);
    let body = Expr::random(rng, body_ops).with_leftmost_arg();
    let arg: u8 = rng.random_range(0..10);
    let value = body.eval_bounded(arg as i64, bound)?;
    let call_first = rng.random_bool(0.5);
    let rhs_ops = ops_in(rng, spec.len_params);
    let program = if rng.random_bool(0.5) {
        let rhs = (0..INNER_TRIES).find_map(|_| {
            let (e, _) = bounded_expr(rng, rhs_ops, bound);
            balanced(&e, 0, value).map(|_| e)
        })?;
        subroutine_program(&body, arg, &rhs, true, call_first)?
    } else {
        let rhs = distinct_expr(rng, rhs_ops, bound, value)?;
        subroutine_program(&body, arg, &rhs, false, call_first)?
    };
    Some(program.into_tokens())
}

/// Deterministic sample `index` of a template. Retries with a fresh
/// sub-seed until the candidate classifies as a true-program.
pub fn sample(spec: &TemplateSpec, index: u64) -> Result<Program, TemplateError> {
    spec.validate()?;
    if spec.kind == TemplateKind::Random {
        let mut rng = rng_for(&[spec.seed, spec.kind.tag(), index, LENGTH_TAG]);
        let length = rng.random_range(spec.len_params.min..=spec.len_params.max);
        return Ok(random_true_program(spec.seed, index, length)?.program);
    }
    let config = VmConfig::default();
    for attempt in 0u64.. {
        let mut rng = rng_for(&[spec.seed, spec.kind.tag(), index, attempt]);
        let candidate = match spec.kind {
            TemplateKind::BasicMath => draw_basic_math(&mut rng, spec),
            TemplateKind::Equality => draw_equality(&mut rng, spec),
            TemplateKind::Ordering => draw_ordering(&mut rng, spec),
            TemplateKind::Subroutines => draw_subroutine(&mut rng, spec),
            TemplateKind::Random => unreachable!(),
        };
        if let Some(tokens) = candidate {
            if classify_tokens(&tokens, &config).is_true() {
                return Ok(Program::from_raw(tokens));
            }
        }
    }
    unreachable!("attempt counter is unbounded")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomDraw {
    pub program: Program,
    /// Candidates drawn, including the accepted one.
    pub attempts: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceRate {
    pub accepted: u64,
    pub attempted: u64,
}

impl AcceptanceRate {
    pub fn record(&mut self, draw: &RandomDraw) {
        self.accepted += 1;
        self.attempted += draw.attempts;
    }

    pub fn rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }
}

/// Rejection-samples uniform sequences of `length` tokens over the 22 core
/// opcodes. The kept program is cut after its first `.` (later tokens are
/// never consumed) or gets a `.` appended.
pub fn random_true_program(seed: u64, index: u64, length: usize) -> Result<RandomDraw, TemplateError> {
    if length == 0 {
        return Err(TemplateError::ZeroLength);
    }
    let alphabet = OpCode::core_set();
    let config = VmConfig::default();
    let mut rng = rng_for(&[seed, RANDOM_TAG, index, length as u64]);
    let mut tokens = Vec::with_capacity(length + 1);
    for attempts in 1u64.. {
        tokens.clear();
        tokens.extend((0..length).map(|_| alphabet[rng.random_range(0..alphabet.len())].token()));
        if let Some(end) = tokens.iter().position(|&t| t == OpCode::End.token()) {
            tokens.truncate(end);
        }
        tokens.push(OpCode::End.token());
        if classify_tokens(&tokens, &config).is_true() {
            return Ok(RandomDraw {
                program: Program::from_raw(tokens),
                attempts,
            });
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Turns a false-program whose only false output is a `0` on top of the
/// stack into a true-program by inserting `!` before its terminating `.`.
pub fn negate_repair(program: &Program) -> Result<Program, TemplateError> {
    let config = VmConfig::default();
    let run = execute(program, &config);
    let fail = |why| Err(TemplateError::NotRepairable(why));
    let outputs = &run.outputs;
    if crate::vm::verdict_of(outputs.clone()).is_true() {
        return fail(RepairFailure::AlreadyTrue);
    }
    if outputs.is_empty() {
        return fail(RepairFailure::NoOutputs);
    }
    if outputs.iter().any(|v| v.is_nan()) {
        return fail(RepairFailure::NanOutput);
    }
    if outputs[..outputs.len() - 1].contains(&Value::Int(0)) {
        return fail(RepairFailure::BuriedFalseOutput);
    }
    let not = OpCode::Not.token();
    let tokens = program.tokens();
    let repaired = match run.halt {
        Halt::End => {
            let at = run.trace.consumed_count() - 1;
            [&tokens[..at], &[not], &tokens[at..]].concat()
        }
        Halt::Exhausted => [tokens, &[not, OpCode::End.token()]].concat(),
        Halt::StepLimit => return fail(RepairFailure::StepLimit),
    };
    let repaired = Program::from_raw(repaired);
    if !classify(&repaired, &config).is_true() {
        return fail(RepairFailure::StepLimit);
    }
    Ok(repaired)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub template: TemplateSpec,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
    pub total_count: u64,
    pub seed: u64,
}

/// Published training-set sizes for the five implemented templates.
pub const PUBLISHED_COUNTS: [(TemplateKind, u64); 5] = [
    (TemplateKind::BasicMath, 10_000_000),
    (TemplateKind::Equality, 10_000_000),
    (TemplateKind::Ordering, 10_000_000),
    (TemplateKind::Subroutines, 10_000_000),
    (TemplateKind::Random, 200_000),
];

impl MixtureSpec {
    /// Mixture in the published proportions, with template seeds derived
    /// from `seed`.
    pub fn published_ratio(total_count: u64, value_bound: i64, seed: u64) -> Self {
        let entries = PUBLISHED_COUNTS
            .iter()
            .enumerate()
            .map(|(i, &(kind, count))| MixtureEntry {
                template: TemplateSpec::new(kind, derive_seed(&[seed, i as u64]))
                    .with_value_bound(value_bound),
                weight: count as f64,
            })
            .collect();
        MixtureSpec {
            entries,
            total_count,
            seed,
        }
    }

    /// Published counts divided by `divisor`.
    pub fn published_scaled(divisor: u64, value_bound: i64, seed: u64) -> Self {
        let total = PUBLISHED_COUNTS.iter().map(|&(_, c)| c).sum::<u64>() / divisor;
        Self::published_ratio(total, value_bound, seed)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for entry in &self.entries {
            if !(entry.weight.is_finite() && entry.weight > 0.0) {
                return Err(TemplateError::InvalidWeight(entry.weight));
            }
            entry.template.validate()?;
        }
        Ok(())
    }

    /// Per-entry counts by largest-remainder apportionment; they always sum
    /// to `total_count` (ties go to the earlier entry).
    pub fn counts(&self) -> Vec<u64> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        let total_weight: f64 = self.entries.iter().map(|e| e.weight).sum();
        let quotas: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.weight / total_weight * self.total_count as f64)
            .collect();
        let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
        let assigned: u64 = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take(self.total_count.saturating_sub(assigned) as usize) {
            counts[i] += 1;
        }
        counts
    }
}

/// A program tagged with the index of the mixture entry that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledProgram {
    pub template: usize,
    pub program: Program,
}

/// Draws every entry's share in parallel, then applies a seeded shuffle.
pub fn sample_mixture(mix: &MixtureSpec) -> Result<Vec<LabeledProgram>, TemplateError> {
    mix.validate()?;
    let jobs: Vec<(usize, u64)> = mix
        .counts()
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    let mut programs = jobs
        .par_iter()
        .map(|&(template, index)| {
            sample(&mix.entries[template].template, index)
                .map(|program| LabeledProgram { template, program })
        })
        .collect::<Result<Vec<_>, _>>()?;
    programs.shuffle(&mut rng_for(&[mix.seed, SHUFFLE_TAG]));
    Ok(programs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, SymbolForm};

    fn p(s: &str) -> Program {
        encode(s, SymbolForm::Standard).unwrap()
    }

    fn e(s: &str) -> Expr {
        Expr::parse_postfix(s).unwrap()
    }

    #[test]
    fn published_examples_are_in_template_support() {
        let basic = comparison_program(&e("12+"), &e("0")).unwrap();
        assert_eq!(basic.to_standard().unwrap(), "12+0>.");
        let eq = equality_program(&e("941-*"), &e("55*")).unwrap();
        assert_eq!(eq.to_standard().unwrap(), "941-*55*2+=.");
        let ord = comparison_program(&e("941-*"), &e("55*1+")).unwrap();
        assert_eq!(ord.to_standard().unwrap(), "941-*55*1+>.");
        let body = e("#41-*");
        let def_first = subroutine_program(&body, 9, &e("55*1+"), false, false).unwrap();
        assert_eq!(def_first.to_standard().unwrap(), "{41-*}9a55*1+>.");
        let call_first = subroutine_program(&body, 9, &e("55*"), true, true).unwrap();
        assert_eq!(call_first.to_standard().unwrap(), "9a55*2+={41-*}.");
        for prog in [basic, eq, ord, def_first, call_first] {
            assert!(classify(&prog, &VmConfig::default()).is_true(), "{prog}");
        }
    }

    #[test]
    fn balancing_uses_subtraction_for_negative_gap() {
        let prog = equality_program(&e("3"), &e("9")).unwrap();
        assert_eq!(prog.to_standard().unwrap(), "396-=.");
        assert!(equality_program(&e("99*"), &e("1")).is_none());
    }

    #[test]
    fn samples_are_true_and_terminated() {
        let config = VmConfig::default();
        for kind in TemplateKind::ALL {
            let spec = TemplateSpec::new(kind, 11);
            for i in 0..500 {
                let prog = sample(&spec, i).unwrap();
                assert!(classify(&prog, &config).is_true(), "{kind:?} {prog}");
                assert_eq!(prog.tokens().last(), Some(&OpCode::End.token()));
                assert_eq!(
                    prog.tokens().iter().filter(|&&t| t == 0).count(),
                    1,
                    "{prog}"
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        for kind in TemplateKind::ALL {
            let spec = TemplateSpec::new(kind, 99);
            for i in [0, 1, 17, 1000] {
                assert_eq!(sample(&spec, i).unwrap(), sample(&spec, i).unwrap());
            }
        }
    }

    #[test]
    fn range_discipline() {
        let config = VmConfig::default();
        for kind in [TemplateKind::BasicMath, TemplateKind::Equality, TemplateKind::Ordering] {
            for bound in [9, 20, 50] {
                let spec = TemplateSpec::new(kind, 5).with_value_bound(bound);
                for i in 0..300 {
                    let run = execute(&sample(&spec, i).unwrap(), &config);
                    for entry in &run.trace.entries {
                        for v in &entry.stack {
                            let x = v.as_int().expect("no NAN in template programs");
                            assert!(x.abs() <= bound, "{kind:?} bound {bound}: {x}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn subroutine_template_uses_both_orders() {
        let spec = TemplateSpec::new(TemplateKind::Subroutines, 3);
        let (mut def_first, mut call_first) = (0, 0);
        for i in 0..200 {
            let prog = sample(&spec, i).unwrap();
            if prog.tokens()[0] == OpCode::DefBegin.token() {
                def_first += 1;
            } else {
                call_first += 1;
            }
        }
        assert!(def_first > 50 && call_first > 50, "{def_first} / {call_first}");
    }

    #[test]
    fn spec_validation() {
        let spec = TemplateSpec::new(TemplateKind::Equality, 0).with_value_bound(8);
        assert_eq!(sample(&spec, 0), Err(TemplateError::ValueBoundTooSmall(8)));
        let mut spec = TemplateSpec::new(TemplateKind::Random, 0);
        spec.len_params = LenParams { min: 0, max: 3 };
        assert!(matches!(spec.validate(), Err(TemplateError::InvalidLenParams { .. })));
    }

    #[test]
    fn negate_repair_examples() {
        assert_eq!(negate_repair(&p("34+8=.")).unwrap().to_standard().unwrap(), "34+8=!.");
        assert_eq!(negate_repair(&p("0.")).unwrap().to_standard().unwrap(), "0!.");
        assert_eq!(negate_repair(&p("34+8=")).unwrap().to_standard().unwrap(), "34+8=!.");
        assert_eq!(
            negate_repair(&p("90/.")),
            Err(TemplateError::NotRepairable(RepairFailure::NanOutput))
        );
        assert_eq!(
            negate_repair(&p("90/!.")),
            Err(TemplateError::NotRepairable(RepairFailure::NanOutput))
        );
        assert_eq!(
            negate_repair(&p(".")),
            Err(TemplateError::NotRepairable(RepairFailure::NoOutputs))
        );
        assert_eq!(
            negate_repair(&p("05.")),
            Err(TemplateError::NotRepairable(RepairFailure::BuriedFalseOutput))
        );
        assert_eq!(
            negate_repair(&p("34+7=.")),
            Err(TemplateError::NotRepairable(RepairFailure::AlreadyTrue))
        );
    }

    #[test]
    fn negate_repair_keeps_dead_tail() {
        let fixed = negate_repair(&p("0.55")).unwrap();
        assert_eq!(fixed.to_standard().unwrap(), "0!.55");
    }

    #[test]
    fn random_single_token_programs_are_nonzero_digits() {
        // Brute force over the whole single-token space.
        let config = VmConfig::default();
        let accepted: Vec<String> = OpCode::core_set()
            .into_iter()
            .map(|op| Program::from_ops(&[op, OpCode::End]))
            .filter(|prog| classify(prog, &config).is_true())
            .map(|prog| prog.to_standard().unwrap())
            .collect();
        assert_eq!(accepted, ["1.", "2.", "3.", "4.", "5.", "6.", "7.", "8.", "9."]);

        for i in 0..200 {
            let draw = random_true_program(4, i, 1).unwrap();
            assert!(accepted.contains(&draw.program.to_standard().unwrap()));
        }
        assert_eq!(random_true_program(4, 0, 0), Err(TemplateError::ZeroLength));
    }

    #[test]
    fn acceptance_rate_accumulates() {
        let mut rate = AcceptanceRate::default();
        for i in 0..100 {
            rate.record(&random_true_program(1, i, 1).unwrap());
        }
        assert_eq!(rate.accepted, 100);
        // 9 of 22 single tokens are accepted.
        assert!((rate.rate() - 9.0 / 22.0).abs() < 0.1, "{}", rate.rate());
    }

    #[test]
    fn mixture_counts() {
        let mix = MixtureSpec {
            entries: vec![
                MixtureEntry {
                    template: TemplateSpec::new(TemplateKind::BasicMath, 1),
                    weight: 2.0,
                },
                MixtureEntry {
                    template: TemplateSpec::new(TemplateKind::Equality, 2),
                    weight: 2.0,
                },
            ],
            total_count: 4,
            seed: 9,
        };
        let out = sample_mixture(&mix).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.iter().filter(|l| l.template == 0).count(), 2);

        let published = MixtureSpec::published_scaled(4000, 20, 0);
        assert_eq!(published.total_count, 10_050);
        assert_eq!(published.counts(), vec![2500, 2500, 2500, 2500, 50]);

        let uneven = MixtureSpec {
            total_count: 10,
            ..MixtureSpec::published_ratio(0, 20, 0)
        };
        assert_eq!(uneven.counts().iter().sum::<u64>(), 10);

        let empty = MixtureSpec {
            entries: vec![],
            total_count: 0,
            seed: 1,
        };
        assert!(sample_mixture(&empty).unwrap().is_empty());
    }

    #[test]
    fn mixture_is_shuffled_deterministically() {
        let mix = MixtureSpec::published_ratio(200, 20, 42);
        let a = sample_mixture(&mix).unwrap();
        let b = sample_mixture(&mix).unwrap();
        assert_eq!(a, b);
        // Not simply grouped by template.
        let first_labels: Vec<usize> = a.iter().take(20).map(|l| l.template).collect();
        assert!(first_labels.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn invalid_weight_rejected() {
        let mut mix = MixtureSpec::published_ratio(10, 20, 0);
        mix.entries[0].weight = 0.0;
        assert_eq!(sample_mixture(&mix), Err(TemplateError::InvalidWeight(0.0)));
    }
}
