//! Grid evaluation of next-token predictors.
//!
//! A predictor sees the 10-token "compute X, compute Y" prefix of every
//! grid program and names the next token. Predictors are either built in
//! or external processes speaking newline-delimited JSON on stdin/stdout:
//!
//! ```text
//! → {"id":0,"tokens":[4,5,11,...],"candidates":[18,19,20]}
//! ← {"id":0,"argmax":18,"scores":{"18":0.9}}
//! ```
//!
//! Responses may come back in any order; they are matched by `id`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enumerate::{GridEntry, GridSpec, ValueProgramSet, ValueRange};
use crate::isa::{OpCode, SymbolForm, TokenId, Vocabulary, VOCAB_SIZE};
use crate::seed::rng_for;
use crate::templates::DEFAULT_VALUE_BOUND;
use crate::vm::{run, truthy, VmConfig};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const UNIFORM_TAG: u64 = 0x554E_4946;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("predictor did not answer within {0:?}")]
    PredictorTimeout(Duration),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("malformed response file: {0}")]
    MalformedResponseFile(String),
    #[error(transparent)]
    Enum(#[from] crate::enumerate::EnumError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorRequest {
    pub id: u64,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<TokenId>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorResponse {
    pub id: u64,
    pub argmax: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

pub trait Predictor {
    fn predict(&mut self, request: &PredictorRequest) -> Result<PredictorResponse, HarnessError>;

    /// Answers in request order; `None` marks a request that was never
    /// answered (timeout or predictor exit).
    fn predict_batch(
        &mut self,
        requests: &[PredictorRequest],
    ) -> Result<Vec<Option<PredictorResponse>>, HarnessError> {
        requests.iter().map(|r| self.predict(r).map(Some)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuiltinKind {
    VmOracle,
    Majority,
    UniformRandom { seed: u64 },
    Constant(TokenId),
}

/// Predictors used as fixtures: the VM itself, the grid's most frequent
/// answer, a seeded coin, and a constant.
#[derive(Clone, Debug)]
pub struct BuiltinPredictor {
    kind: BuiltinKind,
    majority: TokenId,
    config: VmConfig,
}

fn comparison_tokens() -> Vec<TokenId> {
    OpCode::COMPARISONS.iter().map(|op| op.token()).collect()
}

impl BuiltinPredictor {
    /// `grid` is only consulted by the majority predictor.
    pub fn new(kind: BuiltinKind, grid: &[GridEntry]) -> Self {
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        for e in grid {
            *counts.entry(e.truth_token).or_default() += 1;
        }
        // Highest count; ties go to the smaller token id.
        let majority = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map_or(OpCode::Eq.token(), |(&t, _)| t);
        BuiltinPredictor {
            kind,
            majority,
            config: VmConfig::default(),
        }
    }

    pub fn kind(&self) -> BuiltinKind {
        self.kind
    }
}

impl Predictor for BuiltinPredictor {
    fn predict(&mut self, request: &PredictorRequest) -> Result<PredictorResponse, HarnessError> {
        let candidates = request.candidates.clone().unwrap_or_else(comparison_tokens);
        let argmax = match self.kind {
            BuiltinKind::VmOracle => {
                let mut tokens = request.tokens.clone();
                tokens.push(0);
                let truth = candidates.iter().copied().find(|&c| {
                    *tokens.last_mut().expect("pushed") = c;
                    run(&tokens, &self.config).last().is_some_and(|&v| truthy(v))
                });
                truth.or(candidates.first().copied()).unwrap_or(OpCode::Eq.token())
            }
            BuiltinKind::Majority => self.majority,
            BuiltinKind::UniformRandom { seed } => {
                let mut rng = rng_for(&[seed, UNIFORM_TAG, request.id]);
                match request.candidates {
                    Some(ref c) if !c.is_empty() => c[rng.random_range(0..c.len())],
                    _ => rng.random_range(0..VOCAB_SIZE as TokenId),
                }
            }
            BuiltinKind::Constant(t) => t,
        };
        Ok(PredictorResponse {
            id: request.id,
            argmax,
            scores: None,
        })
    }
}

/// External predictor run through `sh -c`, one pipelined session per
/// process. On timeout only the shell is killed, so a single long-running
/// command is best started with `exec`.
pub struct ProcessPredictor {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    fail_on_timeout: bool,
    dead: bool,
}

impl ProcessPredictor {
    pub fn spawn(command: &str, timeout: Duration) -> io::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| io::Error::other("predictor stdin unavailable"))?;
        let stdout = child.stdout.take().ok_or_else(|| io::Error::other("predictor stdout unavailable"))?;
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessPredictor {
            child,
            stdin,
            lines,
            timeout,
            fail_on_timeout: false,
            dead: false,
        })
    }

    /// Turn an unanswered request into [`HarnessError::PredictorTimeout`]
    /// instead of a missing answer.
    pub fn fail_on_timeout(mut self, yes: bool) -> Self {
        self.fail_on_timeout = yes;
        self
    }

    fn shut_down(&mut self) {
        self.dead = true;
        let _ = self.child.kill();
    }
}

impl Drop for ProcessPredictor {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Predictor for ProcessPredictor {
    fn predict(&mut self, request: &PredictorRequest) -> Result<PredictorResponse, HarnessError> {
        self.predict_batch(std::slice::from_ref(request))?
            .pop()
            .flatten()
            .ok_or(HarnessError::PredictorTimeout(self.timeout))
    }

    fn predict_batch(
        &mut self,
        requests: &[PredictorRequest],
    ) -> Result<Vec<Option<PredictorResponse>>, HarnessError> {
        let mut answers: Vec<Option<PredictorResponse>> = vec![None; requests.len()];
        if self.dead || requests.is_empty() {
            return Ok(answers);
        }
        let mut pending: HashMap<u64, usize> = HashMap::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            if pending.insert(r.id, i).is_some() {
                return Err(HarnessError::ProtocolViolation(format!("duplicate request id {}", r.id)));
            }
        }
        let timeout = self.timeout;
        let stdin = &mut self.stdin;
        let lines = &self.lines;
        let outcome: Result<bool, HarnessError> = thread::scope(|scope| {
            let writer = scope.spawn(move || -> io::Result<()> {
                let mut out = BufWriter::new(stdin);
                for r in requests {
                    serde_json::to_writer(&mut out, r)?;
                    out.write_all(b"\n")?;
                }
                out.flush()
            });
            let mut stalled = false;
            let mut result = Ok(());
            while !pending.is_empty() {
                match lines.recv_timeout(timeout) {
                    Ok(Ok(line)) => {
                        if line.trim().is_empty() {
                            continue;
                        }
                        let response: PredictorResponse = match serde_json::from_str(&line) {
                            Ok(r) => r,
                            Err(e) => {
                                result = Err(HarnessError::ProtocolViolation(format!("malformed response {line:?}: {e}")));
                                break;
                            }
                        };
                        let Some(slot) = pending.remove(&response.id) else {
                            result = Err(HarnessError::ProtocolViolation(format!(
                                "response id {} matches no pending request",
                                response.id
                            )));
                            break;
                        };
                        if let Err(e) = check_response(&requests[slot], &response) {
                            result = Err(e);
                            break;
                        }
                        answers[slot] = Some(response);
                    }
                    Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) | Err(RecvTimeoutError::Timeout) => {
                        stalled = true;
                        break;
                    }
                }
            }
            if stalled || result.is_err() {
                // Unblocks a writer stuck on a full pipe.
                let _ = self.child.kill();
            }
            let _ = writer.join();
            result.map(|()| stalled)
        });
        match outcome {
            Ok(false) => Ok(answers),
            Ok(true) => {
                self.shut_down();
                if self.fail_on_timeout {
                    Err(HarnessError::PredictorTimeout(timeout))
                } else {
                    Ok(answers)
                }
            }
            Err(e) => {
                self.shut_down();
                Err(e)
            }
        }
    }
}

fn check_response(request: &PredictorRequest, response: &PredictorResponse) -> Result<(), HarnessError> {
    if response.id != request.id {
        return Err(HarnessError::ProtocolViolation(format!(
            "response id {} answers request {}",
            response.id, request.id
        )));
    }
    if response.argmax as usize >= VOCAB_SIZE {
        return Err(HarnessError::ProtocolViolation(format!(
            "argmax {} is outside the vocabulary",
            response.argmax
        )));
    }
    if let Some(candidates) = &request.candidates {
        if !candidates.contains(&response.argmax) {
            return Err(HarnessError::ProtocolViolation(format!(
                "argmax {} is not among candidates {candidates:?} for request {}",
                response.argmax, request.id
            )));
        }
    }
    Ok(())
}

/// Answers protocol requests from `input` until EOF, one response line per
/// request line.
pub fn serve_stdio<P: Predictor + ?Sized>(
    predictor: &mut P,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<(), HarnessError> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: PredictorRequest = serde_json::from_str(&line)
            .map_err(|e| HarnessError::ProtocolViolation(format!("malformed request {line:?}: {e}")))?;
        let response = predictor.predict(&request)?;
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Restrict requests to the grid's comparison tokens; otherwise the
    /// predictor may answer with any vocabulary token.
    pub restrict: bool,
    /// Square whose cells make up the in-distribution accuracy.
    pub in_dist: ValueRange,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            restrict: true,
            in_dist: ValueRange::symmetric(DEFAULT_VALUE_BOUND),
        }
    }
}

/// One answer keyed by grid position; the line format of response files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub x: i64,
    pub y: i64,
    pub slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax: Option<TokenId>,
    /// Free-form answer (e.g. from an LLM); its first glyph is decoded in
    /// the scoring form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Hit,
    Miss,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub x_values: Vec<i64>,
    pub y_values: Vec<i64>,
    /// `accuracy[row][col]` for y = `y_values[row]`, x = `x_values[col]`;
    /// `None` where the grid has no cell.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub aggregate: f64,
    pub in_dist: Option<f64>,
    pub in_dist_range: ValueRange,
    pub k: usize,
    pub cells: usize,
    pub requests: usize,
    pub correct: usize,
    pub missing: usize,
}

impl GridResult {
    pub fn cell(&self, x: i64, y: i64) -> Option<f64> {
        let col = self.x_values.iter().position(|&v| v == x)?;
        let row = self.y_values.iter().position(|&v| v == y)?;
        self.accuracy[row][col]
    }

    /// Rows are y values, columns x values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y\\x");
        for x in &self.x_values {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
        for (row, y) in self.y_values.iter().enumerate() {
            write!(out, "{y}").unwrap();
            for acc in &self.accuracy[row] {
                match acc {
                    Some(a) => write!(out, ",{a}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub aggregate: f64,
    pub in_dist: Option<f64>,
    pub in_dist_range: ValueRange,
    pub k: usize,
    pub cells: usize,
    pub requests: usize,
    pub correct: usize,
    pub missing: usize,
    pub spec: Option<GridSpec>,
}

pub fn summary(result: &GridResult, spec: Option<&GridSpec>) -> Summary {
    Summary {
        aggregate: result.aggregate,
        in_dist: result.in_dist,
        in_dist_range: result.in_dist_range,
        k: result.k,
        cells: result.cells,
        requests: result.requests,
        correct: result.correct,
        missing: result.missing,
        spec: spec.cloned(),
    }
}

/// Writes `{stem}.csv` and `{stem}.json`.
pub fn write_result(result: &GridResult, spec: Option<&GridSpec>, stem: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let csv = stem.with_extension("csv");
    let json = stem.with_extension("json");
    fs::write(&csv, result.to_csv())?;
    fs::write(&json, serde_json::to_string_pretty(&summary(result, spec))? + "\n")?;
    Ok((csv, json))
}

fn tally(entries: &[GridEntry], outcomes: &[Outcome], options: &EvalOptions) -> GridResult {
    let mut cells: BTreeMap<(i64, i64), (usize, usize)> = BTreeMap::new();
    let (mut correct, mut missing) = (0, 0);
    let mut k = 0;
    for (e, &o) in entries.iter().zip(outcomes) {
        let cell = cells.entry((e.x, e.y)).or_default();
        cell.1 += 1;
        k = k.max(e.slot + 1);
        match o {
            Outcome::Hit => {
                cell.0 += 1;
                correct += 1;
            }
            Outcome::Miss => {}
            Outcome::Missing => missing += 1,
        }
    }
    let mut x_values: Vec<i64> = cells.keys().map(|&(x, _)| x).collect();
    let mut y_values: Vec<i64> = cells.keys().map(|&(_, y)| y).collect();
    x_values.sort_unstable();
    x_values.dedup();
    y_values.sort_unstable();
    y_values.dedup();
    let mut accuracy = vec![vec![None; x_values.len()]; y_values.len()];
    let (mut total, mut in_total, mut in_cells) = (0.0, 0.0, 0usize);
    for (&(x, y), &(hits, n)) in &cells {
        let acc = hits as f64 / n as f64;
        let row = y_values.binary_search(&y).expect("y present");
        let col = x_values.binary_search(&x).expect("x present");
        accuracy[row][col] = Some(acc);
        total += acc;
        if options.in_dist.contains(x) && options.in_dist.contains(y) {
            in_total += acc;
            in_cells += 1;
        }
    }
    GridResult {
        x_values,
        y_values,
        accuracy,
        aggregate: if cells.is_empty() { 0.0 } else { total / cells.len() as f64 },
        in_dist: (in_cells > 0).then(|| in_total / in_cells as f64),
        in_dist_range: options.in_dist,
        k,
        cells: cells.len(),
        requests: entries.len(),
        correct,
        missing,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub result: GridResult,
    /// Answers that came back, in grid order.
    pub responses: Vec<ResponseRecord>,
}

/// Queries the predictor once per grid entry (request id = entry ordinal)
/// and scores argmax against the truth token.
pub fn evaluate_entries<P: Predictor + ?Sized>(
    predictor: &mut P,
    entries: &[GridEntry],
    candidates: &[TokenId],
    options: &EvalOptions,
) -> Result<EvalOutcome, HarnessError> {
    let requests: Vec<PredictorRequest> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| PredictorRequest {
            id: i as u64,
            tokens: e.prefix_tokens.clone(),
            candidates: options.restrict.then(|| candidates.to_vec()),
        })
        .collect();
    let answers = predictor.predict_batch(&requests)?;
    if answers.len() != requests.len() {
        return Err(HarnessError::ProtocolViolation(format!(
            "{} answers for {} requests",
            answers.len(),
            requests.len()
        )));
    }
    let mut outcomes = Vec::with_capacity(entries.len());
    let mut responses = Vec::new();
    for ((entry, request), answer) in entries.iter().zip(&requests).zip(&answers) {
        match answer {
            Some(response) => {
                check_response(request, response)?;
                outcomes.push(if response.argmax == entry.truth_token {
                    Outcome::Hit
                } else {
                    Outcome::Miss
                });
                responses.push(ResponseRecord {
                    x: entry.x,
                    y: entry.y,
                    slot: entry.slot,
                    argmax: Some(response.argmax),
                    answer: None,
                });
            }
            None => outcomes.push(Outcome::Missing),
        }
    }
    Ok(EvalOutcome {
        result: tally(entries, &outcomes, options),
        responses,
    })
}

/// Builds the grid from `spec` and evaluates it.
pub fn run_grid_eval<P: Predictor + ?Sized>(
    predictor: &mut P,
    spec: &GridSpec,
    set: &ValueProgramSet,
    options: &EvalOptions,
) -> Result<EvalOutcome, HarnessError> {
    let grid = crate::enumerate::build_grid(spec, set)?;
    evaluate_entries(predictor, &grid.entries, &spec.candidate_tokens(), options)
}

pub fn write_responses(responses: &[ResponseRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in responses {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>, HarnessError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| HarnessError::MalformedResponseFile(format!("line {}: {e}", n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Offline scoring. Entries without a response count as wrong and are
/// tallied in `missing`.
pub fn score_predictions(
    entries: &[GridEntry],
    responses: &[ResponseRecord],
    form: SymbolForm,
    options: &EvalOptions,
) -> Result<GridResult, HarnessError> {
    let index: HashMap<(i64, i64, usize), usize> = entries.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    let mut answers: Vec<Option<Option<TokenId>>> = vec![None; entries.len()];
    for r in responses {
        let key = (r.x, r.y, r.slot);
        let &i = index
            .get(&key)
            .ok_or_else(|| HarnessError::MalformedResponseFile(format!("no grid entry for {key:?}")))?;
        if answers[i].is_some() {
            return Err(HarnessError::MalformedResponseFile(format!("duplicate response for {key:?}")));
        }
        let token = match (r.argmax, &r.answer) {
            (Some(t), _) => Some(t),
            (None, Some(text)) => text
                .trim()
                .chars()
                .next()
                .and_then(|ch| Vocabulary.lookup(ch, form)),
            (None, None) => {
                return Err(HarnessError::MalformedResponseFile(format!(
                    "response for {key:?} has neither argmax nor answer"
                )))
            }
        };
        answers[i] = Some(token);
    }
    let outcomes: Vec<Outcome> = entries
        .iter()
        .zip(&answers)
        .map(|(e, a)| match a {
            None => Outcome::Missing,
            Some(Some(t)) if *t == e.truth_token => Outcome::Hit,
            Some(_) => Outcome::Miss,
        })
        .collect();
    Ok(tally(entries, &outcomes, options))
}

/// Text of one prompt: the instruction table in `form`, optional extra
/// instructions, the program prefix, and the answer format.
pub fn render_prompt(prefix: &[TokenId], form: SymbolForm, instruction_doc: Option<&str>) -> String {
    let mut out = String::new();
    out.push_str(
        "You are executing programs for a small stack machine. A program is a string of \
         single-character instructions executed left to right on a stack of integers.\n\
         In a stack effect, values left of the arrow are popped (b is the top of the stack) \
         and values right of the arrow are pushed.\n\nInstructions:\n",
    );
    for op in OpCode::core_set() {
        let glyph = op.glyph(form).expect("core opcode has a glyph in both forms");
        let effect = op.stack_effect().expect("core opcode");
        let description = op.description().expect("core opcode");
        writeln!(out, "  {glyph}  {effect}  {description}").unwrap();
    }
    if let Some(doc) = instruction_doc {
        out.push('\n');
        out.push_str(doc.trim_end());
        out.push('\n');
    }
    let program: String = prefix
        .iter()
        .map(|&t| Vocabulary.glyph(t, form).unwrap_or('?'))
        .collect();
    let answers: Vec<String> = OpCode::COMPARISONS
        .iter()
        .map(|op| op.glyph(form).expect("comparison glyph").to_string())
        .collect();
    write!(
        out,
        "\nProgram so far:\n[{program}]\n\nThe next instruction is one of {}. Choose the one that \
         leaves a true (nonzero) value on top of the stack.\nAnswer with that single character \
         and nothing else.\n",
        answers.join(", ")
    )
    .unwrap();
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub file: String,
    pub x: i64,
    pub y: i64,
    pub slot: usize,
    pub form: SymbolForm,
    pub token_budget: u32,
}

/// Writes one prompt file per grid entry into `dir`, plus `prompts.jsonl`
/// listing each file with its metadata.
pub fn emit_prompts(
    entries: &[GridEntry],
    form: SymbolForm,
    instruction_doc: Option<&str>,
    token_budget: u32,
    dir: &Path,
) -> Result<Vec<PromptRecord>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(entries.len());
    let mut index = BufWriter::new(fs::File::create(dir.join("prompts.jsonl"))?);
    for e in entries {
        let file = format!("prompt_x{}_y{}_s{}.txt", e.x, e.y, e.slot);
        fs::write(dir.join(&file), render_prompt(&e.prefix_tokens, form, instruction_doc))?;
        let record = PromptRecord {
            file,
            x: e.x,
            y: e.y,
            slot: e.slot,
            form,
            token_budget,
        };
        serde_json::to_writer(&mut index, &record)?;
        index.write_all(b"\n")?;
        records.push(record);
    }
    index.flush()?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumerate::{build_grid, default_alphabet, enum_value_programs};
    use crate::isa::encode;

    fn grid(bound: i64, k: usize) -> Vec<GridEntry> {
        let set = enum_value_programs(3, &default_alphabet()).unwrap();
        build_grid(&GridSpec::square(bound, k, 1), &set).unwrap().entries
    }

    fn request(tokens: &str, id: u64) -> PredictorRequest {
        PredictorRequest {
            id,
            tokens: encode(tokens, SymbolForm::Standard).unwrap().into_tokens(),
            candidates: Some(comparison_tokens()),
        }
    }

    #[test]
    fn oracle_answers_truth() {
        let mut oracle = BuiltinPredictor::new(BuiltinKind::VmOracle, &[]);
        let r = oracle.predict(&request("00003941-*", 0)).unwrap();
        assert_eq!(r.argmax, OpCode::Lt.token());
        let r = oracle.predict(&request("55", 1)).unwrap();
        assert_eq!(r.argmax, OpCode::Eq.token());
        let full = PredictorRequest {
            candidates: None,
            ..request("72", 2)
        };
        assert_eq!(oracle.predict(&full).unwrap().argmax, OpCode::Gt.token());
    }

    #[test]
    fn uniform_is_seeded() {
        let mut a = BuiltinPredictor::new(BuiltinKind::UniformRandom { seed: 5 }, &[]);
        let mut b = BuiltinPredictor::new(BuiltinKind::UniformRandom { seed: 5 }, &[]);
        for id in 0..50 {
            let req = request("12", id);
            let ra = a.predict(&req).unwrap();
            assert_eq!(ra, b.predict(&req).unwrap());
            assert!(comparison_tokens().contains(&ra.argmax));
        }
    }

    #[test]
    fn majority_breaks_ties_to_smaller_token() {
        let entries = grid(2, 1);
        let m = BuiltinPredictor::new(BuiltinKind::Majority, &entries);
        assert_eq!(m.majority, OpCode::Lt.token());
    }

    #[test]
    fn eval_ceiling_and_constants() {
        let entries = grid(5, 3);
        let cands = comparison_tokens();
        let opts = EvalOptions::default();
        let mut oracle = BuiltinPredictor::new(BuiltinKind::VmOracle, &entries);
        let out = evaluate_entries(&mut oracle, &entries, &cands, &opts).unwrap();
        assert_eq!(out.result.aggregate, 1.0);
        assert_eq!(out.result.cells, 121);
        assert_eq!(out.result.k, 3);
        assert_eq!(out.result.missing, 0);

        let mut eq = BuiltinPredictor::new(BuiltinKind::Constant(OpCode::Eq.token()), &entries);
        let out = evaluate_entries(&mut eq, &entries, &cands, &opts).unwrap();
        assert_eq!(out.result.aggregate, 11.0 / 121.0);
        assert_eq!(out.result.cell(2, 2), Some(1.0));
        assert_eq!(out.result.cell(1, 2), Some(0.0));
    }

    #[test]
    fn restriction_violation_is_reported() {
        let entries = grid(1, 1);
        let mut bad = BuiltinPredictor::new(BuiltinKind::Constant(OpCode::Add.token()), &entries);
        let err = evaluate_entries(&mut bad, &entries, &comparison_tokens(), &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::ProtocolViolation(_)));
        let unrestricted = EvalOptions {
            restrict: false,
            ..Default::default()
        };
        let out = evaluate_entries(&mut bad, &entries, &comparison_tokens(), &unrestricted).unwrap();
        assert_eq!(out.result.aggregate, 0.0);
    }

    #[test]
    fn offline_scoring_matches_online() {
        let entries = grid(4, 2);
        let opts = EvalOptions::default();
        let mut uniform = BuiltinPredictor::new(BuiltinKind::UniformRandom { seed: 2 }, &entries);
        let online = evaluate_entries(&mut uniform, &entries, &comparison_tokens(), &opts).unwrap();
        let offline = score_predictions(&entries, &online.responses, SymbolForm::Standard, &opts).unwrap();
        assert_eq!(offline, online.result);
    }

    #[test]
    fn missing_and_malformed_responses() {
        let entries = grid(2, 2);
        let opts = EvalOptions::default();
        let half: Vec<ResponseRecord> = entries
            .iter()
            .step_by(2)
            .map(|e| ResponseRecord {
                x: e.x,
                y: e.y,
                slot: e.slot,
                argmax: Some(e.truth_token),
                answer: None,
            })
            .collect();
        let r = score_predictions(&entries, &half, SymbolForm::Standard, &opts).unwrap();
        assert_eq!(r.missing, entries.len() / 2);
        assert!(r.aggregate <= 0.5);

        let mut dup = half.clone();
        dup.push(half[0].clone());
        assert!(matches!(
            score_predictions(&entries, &dup, SymbolForm::Standard, &opts),
            Err(HarnessError::MalformedResponseFile(_))
        ));
        let stray = vec![ResponseRecord {
            x: 99,
            y: 0,
            slot: 0,
            argmax: Some(18),
            answer: None,
        }];
        assert!(matches!(
            score_predictions(&entries, &stray, SymbolForm::Standard, &opts),
            Err(HarnessError::MalformedResponseFile(_))
        ));
    }

    #[test]
    fn glyph_answers_scored_in_form() {
        let entries = grid(1, 1);
        let answers: Vec<ResponseRecord> = entries
            .iter()
            .map(|e| ResponseRecord {
                x: e.x,
                y: e.y,
                slot: e.slot,
                argmax: None,
                answer: Some(format!(" {}\n", Vocabulary.glyph(e.truth_token, SymbolForm::Alternate).unwrap())),
            })
            .collect();
        let r = score_predictions(&entries, &answers, SymbolForm::Alternate, &EvalOptions::default()).unwrap();
        assert_eq!(r.aggregate, 1.0);
        // The same glyphs read in standard form are wrong answers, not missing ones.
        let r = score_predictions(&entries, &answers, SymbolForm::Standard, &EvalOptions::default()).unwrap();
        assert_eq!(r.aggregate, 0.0);
        assert_eq!(r.missing, 0);
    }

    #[test]
    fn csv_layout() {
        let entries = grid(1, 1);
        let mut eq = BuiltinPredictor::new(BuiltinKind::Constant(OpCode::Eq.token()), &entries);
        let r = evaluate_entries(&mut eq, &entries, &comparison_tokens(), &EvalOptions::default())
            .unwrap()
            .result;
        assert_eq!(r.to_csv(), "y\\x,-1,0,1\n-1,1,0,0\n0,0,1,0\n1,0,0,1\n");
    }

    #[test]
    fn in_dist_subsquare() {
        let entries = grid(4, 1);
        let opts = EvalOptions {
            in_dist: ValueRange::symmetric(1),
            ..Default::default()
        };
        let mut eq = BuiltinPredictor::new(BuiltinKind::Constant(OpCode::Eq.token()), &entries);
        let r = evaluate_entries(&mut eq, &entries, &comparison_tokens(), &opts).unwrap().result;
        assert_eq!(r.in_dist, Some(3.0 / 9.0));
        assert_eq!(r.aggregate, 9.0 / 81.0);
    }

    #[test]
    fn serve_roundtrip() {
        let mut oracle = BuiltinPredictor::new(BuiltinKind::VmOracle, &[]);
        let input = "{\"id\":7,\"tokens\":[4,5],\"candidates\":[18,19,20]}\n\n{\"id\":8,\"tokens\":[5,5]}\n";
        let mut out = Vec::new();
        serve_stdio(&mut oracle, input.as_bytes(), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"id\":7,\"argmax\":18}\n{\"id\":8,\"argmax\":20}\n"
        );
        let mut sink = Vec::new();
        assert!(matches!(
            serve_stdio(&mut oracle, "not json\n".as_bytes(), &mut sink),
            Err(HarnessError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn prompt_contents() {
        let prefix = encode("0000300027", SymbolForm::Standard).unwrap().into_tokens();
        let std_prompt = render_prompt(&prefix, SymbolForm::Standard, None);
        assert!(std_prompt.contains("x  (a b → max(a, b))"));
        assert!(std_prompt.contains("!  (a → 0 if a else 1)"));
        assert!(std_prompt.contains("[0000300027]"));
        assert!(std_prompt.contains("one of <, >, ="));
        let alt = render_prompt(&prefix, SymbolForm::Alternate, Some("Think carefully."));
        assert!(alt.contains("  9  ( → 6)  push 6\n"));
        assert!(alt.contains("[----+---_1]"));
        assert!(alt.contains("one of ?, $, ~"));
        assert!(alt.contains("Think carefully."));
    }

    #[test]
    fn prompts_written_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let entries = grid(1, 1);
        let records = emit_prompts(&entries, SymbolForm::Standard, None, 2000, dir.path()).unwrap();
        assert_eq!(records.len(), 9);
        assert!(records.iter().all(|r| r.token_budget == 2000));
        let index = fs::read_to_string(dir.path().join("prompts.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 9);
        assert!(dir.path().join(&records[0].file).exists());
    }
}
