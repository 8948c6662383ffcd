//! Exhaustive enumeration of fixed-length value programs, the X-vs-Y
//! comparison grid built from them, and the majority-answer baseline.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::sha256_hex;
use crate::isa::{decode, encode, OpCode, Program, SymbolForm, TokenId};
use crate::seed::rng_for;
use crate::vm::binary_result;

pub const MAX_ENUM_LENGTH: usize = 7;
pub const DEFAULT_LENGTH: usize = 5;
const VALUE_SET_FORMAT: u32 = 1;
const GRID_TAG: u64 = 0x4752_4944;

#[derive(Debug, Error)]
pub enum EnumError {
    #[error("alphabet contains the end token '.'")]
    AlphabetContainsEnd,
    #[error("alphabet contains {0}, which has no fixed stack effect")]
    UnsupportedOpcode(OpCode),
    #[error("length {0} exceeds the enumeration limit of {MAX_ENUM_LENGTH}")]
    LengthTooLarge(usize),
    #[error("prefix length {t} exceeds program length {length}")]
    PrefixTooLong { t: usize, length: usize },
    #[error("value {0} is not computed by any program in the set")]
    UnreachableValue(i64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("digest mismatch: manifest says {expected}, data hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("malformed value-set cache: {0}")]
    MalformedCache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Digits plus the seven arithmetic/extremum binary operators.
pub fn default_alphabet() -> Vec<OpCode> {
    (0..10)
        .map(OpCode::PushDigit)
        .chain(OpCode::ARITHMETIC)
        .collect()
}

/// Every program of one length over an alphabet that leaves exactly one
/// integer on the stack. Entries are sorted by token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValueProgramSet {
    length: usize,
    alphabet: Vec<OpCode>,
    tokens: Vec<TokenId>,
    values: Vec<i64>,
    index: BTreeMap<i64, Vec<u32>>,
}

impl ValueProgramSet {
    fn from_parts(length: usize, alphabet: Vec<OpCode>, tokens: Vec<TokenId>, values: Vec<i64>) -> Self {
        let mut index: BTreeMap<i64, Vec<u32>> = BTreeMap::new();
        for (i, &v) in values.iter().enumerate() {
            index.entry(v).or_default().push(i as u32);
        }
        ValueProgramSet {
            length,
            alphabet,
            tokens,
            values,
            index,
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn alphabet(&self) -> &[OpCode] {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn program(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.length..(i + 1) * self.length]
    }

    pub fn value(&self, i: usize) -> i64 {
        self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], i64)> + '_ {
        (0..self.len()).map(|i| (self.program(i), self.values[i]))
    }

    /// Value computed by `tokens`, if it is a member.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<i64> {
        if tokens.len() != self.length || self.length == 0 {
            return None;
        }
        let n = self.len();
        let (mut lo, mut hi) = (0, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.program(mid).cmp(tokens) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(self.values[mid]),
            }
        }
        None
    }

    pub fn indices_for_value(&self, v: i64) -> &[u32] {
        self.index.get(&v).map_or(&[], Vec::as_slice)
    }

    pub fn programs_for_value(&self, v: i64) -> Vec<Program> {
        self.indices_for_value(v)
            .iter()
            .map(|&i| Program::from_raw(self.program(i as usize).to_vec()))
            .collect()
    }

    /// (value, number of programs) in ascending value order.
    pub fn histogram(&self) -> impl Iterator<Item = (i64, usize)> + '_ {
        self.index.iter().map(|(&v, ids)| (v, ids.len()))
    }

    pub fn is_reachable(&self, v: i64) -> bool {
        self.index.contains_key(&v)
    }
}

fn check_alphabet(length: usize, alphabet: &[OpCode]) -> Result<Vec<OpCode>, EnumError> {
    if length > MAX_ENUM_LENGTH {
        return Err(EnumError::LengthTooLarge(length));
    }
    let mut sorted = alphabet.to_vec();
    sorted.sort_by_key(|op| op.token());
    sorted.dedup();
    for &op in &sorted {
        match op {
            OpCode::End => return Err(EnumError::AlphabetContainsEnd),
            OpCode::DefBegin | OpCode::DefEnd | OpCode::Call(_) => {
                return Err(EnumError::UnsupportedOpcode(op))
            }
            _ => {}
        }
    }
    Ok(sorted)
}

struct Search<'a> {
    alphabet: &'a [OpCode],
    length: usize,
    /// Largest possible stack shrink per token (1 with a binary op, else 0).
    max_shrink: usize,
    prefix: Vec<TokenId>,
    stack: Vec<i64>,
    out_tokens: Vec<TokenId>,
    out_values: Vec<i64>,
}

impl Search<'_> {
    /// Applies `op` to the stack, or returns `None` if it would produce
    /// `NAN`. On success returns what is needed to undo it.
    fn push_op(&mut self, op: OpCode) -> Option<Undo> {
        match op {
            OpCode::PushDigit(d) => {
                self.stack.push(d as i64);
                Some(Undo::Pop)
            }
            OpCode::Not => {
                let a = *self.stack.last()?;
                *self.stack.last_mut()? = (a == 0) as i64;
                Some(Undo::Restore1(a))
            }
            OpCode::Reserved(_) => None,
            op => {
                let n = self.stack.len();
                if n < 2 {
                    return None;
                }
                let (a, b) = (self.stack[n - 2], self.stack[n - 1]);
                let v = binary_result(op, a, b)?;
                self.stack.truncate(n - 2);
                self.stack.push(v);
                Some(Undo::Restore2(a, b))
            }
        }
    }

    fn undo(&mut self, undo: Undo) {
        match undo {
            Undo::Pop => {
                self.stack.pop();
            }
            Undo::Restore1(a) => *self.stack.last_mut().expect("non-empty") = a,
            Undo::Restore2(a, b) => {
                self.stack.pop();
                self.stack.push(a);
                self.stack.push(b);
            }
        }
    }

    fn dfs(&mut self) {
        let depth = self.prefix.len();
        if depth == self.length {
            if self.stack.len() == 1 {
                self.out_tokens.extend_from_slice(&self.prefix);
                self.out_values.push(self.stack[0]);
            }
            return;
        }
        let remaining = self.length - depth - 1;
        for &op in self.alphabet {
            let Some(undo) = self.push_op(op) else { continue };
            if self.stack.len() <= 1 + remaining * self.max_shrink {
                self.prefix.push(op.token());
                self.dfs();
                self.prefix.pop();
            }
            self.undo(undo);
        }
    }
}

#[derive(Clone, Copy)]
enum Undo {
    Pop,
    Restore1(i64),
    Restore2(i64, i64),
}

/// Depth-first enumeration with pruning: a prefix is abandoned as soon as
/// it produces `NAN` (which can never leave the stack) or holds more cells
/// than the remaining tokens can reduce to one. Work is split by first
/// token and merged in token order.
pub fn enum_value_programs(length: usize, alphabet: &[OpCode]) -> Result<ValueProgramSet, EnumError> {
    let alphabet = check_alphabet(length, alphabet)?;
    if length == 0 || alphabet.is_empty() {
        return Ok(ValueProgramSet::from_parts(length, alphabet, Vec::new(), Vec::new()));
    }
    let max_shrink = alphabet.iter().any(|op| op.arity() == Some((2, 1))) as usize;
    let parts: Vec<(Vec<TokenId>, Vec<i64>)> = alphabet
        .par_iter()
        .map(|&first| {
            let mut search = Search {
                alphabet: &alphabet,
                length,
                max_shrink,
                prefix: Vec::with_capacity(length),
                stack: Vec::with_capacity(length),
                out_tokens: Vec::new(),
                out_values: Vec::new(),
            };
            if let Some(_undo) = search.push_op(first) {
                if search.stack.len() <= 1 + (length - 1) * max_shrink {
                    search.prefix.push(first.token());
                    search.dfs();
                }
            }
            (search.out_tokens, search.out_values)
        })
        .collect();
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    for (t, v) in parts {
        tokens.extend(t);
        values.extend(v);
    }
    Ok(ValueProgramSet::from_parts(length, alphabet, tokens, values))
}

/// How the majority predictor conditions on what it has seen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Condition on the exact observed prefix.
    #[default]
    Conditional,
    /// Condition only on how many tokens were seen.
    LengthOnly,
}

/// Majority answer for one observed prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixMajority {
    pub prefix: Vec<TokenId>,
    pub value: i64,
    pub hits: usize,
    pub completions: usize,
}

fn majority_of(values: &[i64], counts: &mut HashMap<i64, usize>) -> (i64, usize) {
    counts.clear();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .iter()
        .map(|(&v, &c)| (v, c))
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty group")
}

/// Majority value per distinct length-`t` prefix, ties broken toward the
/// smaller value.
pub fn prefix_majorities(set: &ValueProgramSet, t: usize) -> Result<Vec<PrefixMajority>, EnumError> {
    if t > set.length {
        return Err(EnumError::PrefixTooLong { t, length: set.length });
    }
    let mut out = Vec::new();
    let mut counts = HashMap::new();
    let mut start = 0;
    while start < set.len() {
        let prefix = &set.program(start)[..t];
        let mut end = start + 1;
        while end < set.len() && &set.program(end)[..t] == prefix {
            end += 1;
        }
        let (value, hits) = majority_of(&set.values[start..end], &mut counts);
        out.push(PrefixMajority {
            prefix: prefix.to_vec(),
            value,
            hits,
            completions: end - start,
        });
        start = end;
    }
    Ok(out)
}

/// Fraction of the set whose value equals the majority prediction after
/// seeing `t` tokens.
pub fn majority_baseline(set: &ValueProgramSet, t: usize, mode: BaselineMode) -> Result<f64, EnumError> {
    if t > set.length {
        return Err(EnumError::PrefixTooLong { t, length: set.length });
    }
    if set.is_empty() {
        return Ok(0.0);
    }
    let hits = match mode {
        BaselineMode::Conditional => prefix_majorities(set, t)?.iter().map(|m| m.hits).sum(),
        BaselineMode::LengthOnly => set.histogram().map(|(_, c)| c).max().unwrap_or(0),
    };
    Ok(hits as f64 / set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: i64,
    pub hi: i64,
}

impl ValueRange {
    pub fn new(lo: i64, hi: i64) -> Self {
        ValueRange { lo, hi }
    }

    pub fn symmetric(bound: i64) -> Self {
        ValueRange { lo: -bound, hi: bound }
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<i64> {
        self.lo..=self.hi
    }

    pub fn width(&self) -> usize {
        (self.hi - self.lo + 1).max(0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    Lt,
    Gt,
    Eq,
}

impl Comparison {
    pub const ALL: [Comparison; 3] = [Comparison::Lt, Comparison::Gt, Comparison::Eq];

    pub fn opcode(self) -> OpCode {
        match self {
            Comparison::Lt => OpCode::Lt,
            Comparison::Gt => OpCode::Gt,
            Comparison::Eq => OpCode::Eq,
        }
    }

    pub fn truth(x: i64, y: i64) -> Comparison {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => Comparison::Lt,
            std::cmp::Ordering::Greater => Comparison::Gt,
            std::cmp::Ordering::Equal => Comparison::Eq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: ValueRange,
    pub y_range: ValueRange,
    /// Programs per cell.
    pub k: usize,
    /// Cells whose true relation is not listed here are left out.
    pub comparisons: Vec<Comparison>,
    pub seed: u64,
}

impl GridSpec {
    pub fn square(bound: i64, k: usize, seed: u64) -> Self {
        GridSpec {
            x_range: ValueRange::symmetric(bound),
            y_range: ValueRange::symmetric(bound),
            k,
            comparisons: Comparison::ALL.to_vec(),
            seed,
        }
    }

    pub fn candidate_tokens(&self) -> Vec<TokenId> {
        let mut tokens: Vec<TokenId> = self.comparisons.iter().map(|c| c.opcode().token()).collect();
        tokens.sort_unstable();
        tokens.dedup();
        tokens
    }

    fn validate(&self) -> Result<(), EnumError> {
        if self.k == 0 {
            return Err(EnumError::InvalidGrid("k must be at least 1".into()));
        }
        if self.x_range.lo > self.x_range.hi || self.y_range.lo > self.y_range.hi {
            return Err(EnumError::InvalidGrid("empty value range".into()));
        }
        if self.comparisons.is_empty() {
            return Err(EnumError::InvalidGrid("no comparisons".into()));
        }
        Ok(())
    }
}

/// One grid program: "compute X, compute Y", to be followed by the
/// comparison token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub x: i64,
    pub y: i64,
    pub slot: usize,
    pub prefix_tokens: Vec<TokenId>,
    pub truth_token: TokenId,
}

impl GridEntry {
    pub fn key(&self) -> (i64, i64, usize) {
        (self.x, self.y, self.slot)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub spec: GridSpec,
    /// Sorted by (x, y, slot).
    pub entries: Vec<GridEntry>,
}

impl Grid {
    pub fn cell_count(&self) -> usize {
        self.entries.len() / self.spec.k
    }
}

/// Builds `k` prefixes per (X, Y) cell, choosing the X and Y programs
/// uniformly with replacement from a per-cell seeded stream.
pub fn build_grid(spec: &GridSpec, set: &ValueProgramSet) -> Result<Grid, EnumError> {
    spec.validate()?;
    for v in spec.x_range.iter().chain(spec.y_range.iter()) {
        if !set.is_reachable(v) {
            return Err(EnumError::UnreachableValue(v));
        }
    }
    let mut entries = Vec::with_capacity(spec.x_range.width() * spec.y_range.width() * spec.k);
    for x in spec.x_range.iter() {
        let xs = set.indices_for_value(x);
        for y in spec.y_range.iter() {
            let truth = Comparison::truth(x, y);
            if !spec.comparisons.contains(&truth) {
                continue;
            }
            let ys = set.indices_for_value(y);
            for slot in 0..spec.k {
                let mut rng = rng_for(&[spec.seed, GRID_TAG, x as u64, y as u64, slot as u64]);
                let px = xs[rng.random_range(0..xs.len())] as usize;
                let py = ys[rng.random_range(0..ys.len())] as usize;
                let prefix_tokens = [set.program(px), set.program(py)].concat();
                entries.push(GridEntry {
                    x,
                    y,
                    slot,
                    prefix_tokens,
                    truth_token: truth.opcode().token(),
                });
            }
        }
    }
    Ok(Grid {
        spec: spec.clone(),
        entries,
    })
}

pub fn grid_spec_path(path: &Path) -> PathBuf {
    path.with_extension("spec.json")
}

/// Writes entries as JSON lines to `path` and the spec next to it.
pub fn write_grid(grid: &Grid, path: &Path) -> Result<(), EnumError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for entry in &grid.entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    fs::write(grid_spec_path(path), serde_json::to_string_pretty(&grid.spec)? + "\n")?;
    Ok(())
}

/// Reads grid entries, plus the spec if its sidecar file exists.
pub fn read_grid(path: &Path) -> Result<(Vec<GridEntry>, Option<GridSpec>), EnumError> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    let spec_path = grid_spec_path(path);
    let spec = if spec_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(spec_path)?)?)
    } else {
        None
    };
    Ok((entries, spec))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueSetManifest {
    pub format_version: u32,
    pub length: usize,
    pub alphabet: Vec<TokenId>,
    pub count: usize,
    pub digest: String,
}

pub fn value_set_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.values.tsv")),
        dir.join(format!("{name}.values.manifest.json")),
    )
}

/// Cache layout: one `program<TAB>value` line per entry in standard form,
/// plus a manifest carrying the SHA-256 of the data file.
pub fn write_value_set(set: &ValueProgramSet, dir: &Path, name: &str) -> Result<ValueSetManifest, EnumError> {
    let (data_path, manifest_path) = value_set_paths(dir, name);
    let mut data = Vec::with_capacity(set.len() * (set.length + 6));
    for (tokens, value) in set.iter() {
        let text = decode(&Program::from_raw(tokens.to_vec()), SymbolForm::Standard)
            .map_err(|e| EnumError::MalformedCache(e.to_string()))?;
        writeln!(data, "{text}\t{value}")?;
    }
    fs::write(&data_path, &data)?;
    let manifest = ValueSetManifest {
        format_version: VALUE_SET_FORMAT,
        length: set.length,
        alphabet: set.alphabet.iter().map(|op| op.token()).collect(),
        count: set.len(),
        digest: sha256_hex(&data),
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_value_set(dir: &Path, name: &str) -> Result<ValueProgramSet, EnumError> {
    let (data_path, manifest_path) = value_set_paths(dir, name);
    let manifest: ValueSetManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != VALUE_SET_FORMAT {
        return Err(EnumError::MalformedCache(format!(
            "unknown format version {}",
            manifest.format_version
        )));
    }
    let data = fs::read(data_path)?;
    let actual = sha256_hex(&data);
    if actual != manifest.digest {
        return Err(EnumError::DigestMismatch {
            expected: manifest.digest,
            actual,
        });
    }
    let bad = |msg: String| EnumError::MalformedCache(msg);
    let text = String::from_utf8(data).map_err(|e| bad(e.to_string()))?;
    let mut tokens = Vec::with_capacity(manifest.count * manifest.length);
    let mut values = Vec::with_capacity(manifest.count);
    for line in text.lines() {
        let (program, value) = line.split_once('\t').ok_or_else(|| bad(format!("line {line:?}")))?;
        let program = encode(program, SymbolForm::Standard).map_err(|e| bad(e.to_string()))?;
        if program.len() != manifest.length {
            return Err(bad(format!("program {line:?} has wrong length")));
        }
        tokens.extend_from_slice(program.tokens());
        values.push(value.parse().map_err(|_| bad(format!("value in {line:?}")))?);
    }
    if values.len() != manifest.count {
        return Err(bad(format!("expected {} entries, found {}", manifest.count, values.len())));
    }
    let alphabet = manifest
        .alphabet
        .iter()
        .map(|&t| OpCode::from_token(t).map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ValueProgramSet::from_parts(manifest.length, alphabet, tokens, values))
}
