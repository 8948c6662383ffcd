//! On-disk datasets and manifests.
//!
//! A dataset is `{name}.txt` (one standard-form program per line) or
//! `{name}.bin` (one byte per token, programs terminated by `0x00`), plus
//! `{name}.manifest.json`. The manifest holds everything needed to
//! regenerate the data file byte for byte, and the SHA-256 of that file.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::isa::{decode, encode, OpCode, Program, SymbolForm, Vocabulary};
use crate::seed::rng_for;
use crate::templates::{sample_mixture, LabeledProgram, MixtureSpec, TemplateError};

pub const FORMAT_VERSION: u32 = 1;
const SPLIT_TAG: u64 = 0x53_504C_4954;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the instruction-table dump; changes whenever ids or glyphs do.
pub fn vocabulary_hash() -> String {
    sha256_hex(Vocabulary.dump_json().as_bytes())
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("digest mismatch: manifest says {expected}, data hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("unknown dataset format version {0}")]
    UnknownFormatVersion(u32),
    #[error("program {index} cannot be stored: {reason}")]
    InvalidProgram { index: usize, reason: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("malformed data file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Text,
    Binary,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Text => "txt",
            DataFormat::Binary => "bin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let ok = |r: f64| r.is_finite() && (0.0..=1.0).contains(&r);
        if !ok(self.train) || !ok(self.validation) || (self.train + self.validation - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "ratios {}/{} must be in [0, 1] and sum to 1",
                self.train, self.validation
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub part: SplitPart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub data_format: DataFormat,
    pub mixture: MixtureSpec,
    pub vocabulary_hash: String,
    pub form: SymbolForm,
    /// Program count per mixture entry, keyed by entry index.
    pub counts: BTreeMap<usize, u64>,
    pub split: Option<SplitInfo>,
    pub master_seed: u64,
    pub count: u64,
    pub content_digest: String,
}

impl DatasetManifest {
    /// Manifest skeleton for a mixture; counts and digest are filled in by
    /// [`write_dataset`].
    pub fn for_mixture(mixture: MixtureSpec, data_format: DataFormat, split: Option<SplitInfo>) -> Self {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            data_format,
            master_seed: mixture.seed,
            mixture,
            vocabulary_hash: vocabulary_hash(),
            form: SymbolForm::Standard,
            counts: BTreeMap::new(),
            split,
            count: 0,
            content_digest: String::new(),
        }
    }
}

pub fn dataset_paths(dir: &Path, name: &str, format: DataFormat) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.{}", format.extension())),
        dir.join(format!("{name}.manifest.json")),
    )
}

fn check_storable(index: usize, program: &Program) -> Result<(), CorpusError> {
    let end = OpCode::End.token();
    let bad = |reason: &str| {
        Err(CorpusError::InvalidProgram {
            index,
            reason: reason.to_string(),
        })
    };
    match program.tokens().iter().position(|&t| t == end) {
        None => bad("missing '.' terminator"),
        Some(p) if p + 1 != program.len() => bad("'.' before the end of the program"),
        Some(_) => Ok(()),
    }
}

pub fn encode_data(programs: &[Program], format: DataFormat) -> Result<Vec<u8>, CorpusError> {
    let mut data = Vec::new();
    for (index, program) in programs.iter().enumerate() {
        check_storable(index, program)?;
        match format {
            DataFormat::Text => {
                let text = decode(program, SymbolForm::Standard).map_err(|e| CorpusError::InvalidProgram {
                    index,
                    reason: e.to_string(),
                })?;
                data.extend_from_slice(text.as_bytes());
                data.push(b'\n');
            }
            DataFormat::Binary => data.extend_from_slice(program.tokens()),
        }
    }
    Ok(data)
}

pub fn decode_data(data: &[u8], format: DataFormat) -> Result<Vec<Program>, CorpusError> {
    match format {
        DataFormat::Text => {
            let text = std::str::from_utf8(data).map_err(|e| CorpusError::Malformed(e.to_string()))?;
            text.lines()
                .map(|line| encode(line, SymbolForm::Standard).map_err(|e| CorpusError::Malformed(e.to_string())))
                .collect()
        }
        DataFormat::Binary => {
            if data.last().is_some_and(|&b| b != OpCode::End.token()) {
                return Err(CorpusError::Malformed("trailing bytes without terminator".into()));
            }
            data.split_inclusive(|&b| b == OpCode::End.token())
                .map(|chunk| Program::from_tokens(chunk.to_vec()).map_err(|e| CorpusError::Malformed(e.to_string())))
                .collect()
        }
    }
}

/// Writes the data file and its manifest; returns the completed manifest.
pub fn write_dataset(
    programs: &[LabeledProgram],
    mut manifest: DatasetManifest,
    dir: &Path,
    name: &str,
) -> Result<DatasetManifest, CorpusError> {
    let plain: Vec<Program> = programs.iter().map(|l| l.program.clone()).collect();
    let data = encode_data(&plain, manifest.data_format)?;
    let (data_path, manifest_path) = dataset_paths(dir, name, manifest.data_format);
    fs::write(data_path, &data)?;
    manifest.counts = BTreeMap::new();
    for l in programs {
        *manifest.counts.entry(l.template).or_default() += 1;
    }
    manifest.count = programs.len() as u64;
    manifest.content_digest = sha256_hex(&data);
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<DatasetManifest, CorpusError> {
    let path = dir.join(format!("{name}.manifest.json"));
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(CorpusError::UnknownFormatVersion(version));
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_dataset(dir: &Path, name: &str) -> Result<(Vec<Program>, DatasetManifest), CorpusError> {
    let manifest = read_manifest(dir, name)?;
    let (data_path, _) = dataset_paths(dir, name, manifest.data_format);
    let data = fs::read(data_path)?;
    let actual = sha256_hex(&data);
    if actual != manifest.content_digest {
        return Err(CorpusError::DigestMismatch {
            expected: manifest.content_digest,
            actual,
        });
    }
    Ok((decode_data(&data, manifest.data_format)?, manifest))
}

/// Seeded stratified split. Each template's validation share is within one
/// program of its exact quota, and the validation total is
/// `round(len * ratios.validation)`. Both parts keep dataset order.
pub fn split(
    dataset: &[LabeledProgram],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<LabeledProgram>, Vec<LabeledProgram>), CorpusError> {
    ratios.validate()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in dataset.iter().enumerate() {
        groups.entry(l.template).or_default().push(i);
    }
    let target = (dataset.len() as f64 * ratios.validation).round() as usize;
    let quotas: Vec<(usize, f64)> = groups
        .iter()
        .map(|(&label, members)| (label, members.len() as f64 * ratios.validation))
        .collect();
    let mut take: BTreeMap<usize, usize> = quotas.iter().map(|&(l, q)| (l, q.floor() as usize)).collect();
    let mut order: Vec<&(usize, f64)> = quotas.iter().collect();
    order.sort_by(|a, b| (b.1 - b.1.floor()).total_cmp(&(a.1 - a.1.floor())).then(a.0.cmp(&b.0)));
    let mut missing = target.saturating_sub(take.values().sum());
    for &&(label, _) in &order {
        if missing == 0 {
            break;
        }
        let t = take.get_mut(&label).expect("label present");
        if *t < groups[&label].len() {
            *t += 1;
            missing -= 1;
        }
    }

    let mut in_validation = vec![false; dataset.len()];
    for (label, members) in &groups {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(&[seed, SPLIT_TAG, *label as u64]));
        for &i in &shuffled[..take[label]] {
            in_validation[i] = true;
        }
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (l, &v) in dataset.iter().zip(&in_validation) {
        if v {
            validation.push(l.clone());
        } else {
            train.push(l.clone());
        }
    }
    Ok((train, validation))
}

/// Recomputes the labeled programs a manifest describes.
pub fn materialize(manifest: &DatasetManifest) -> Result<Vec<LabeledProgram>, CorpusError> {
    let all = sample_mixture(&manifest.mixture)?;
    Ok(match manifest.split {
        None => all,
        Some(info) => {
            let (train, validation) = split(&all, info.ratios, info.seed)?;
            match info.part {
                SplitPart::Train => train,
                SplitPart::Validation => validation,
            }
        }
    })
}

/// Digest the manifest's data file would have if regenerated now.
pub fn regenerated_digest(manifest: &DatasetManifest) -> Result<String, CorpusError> {
    let programs: Vec<Program> = materialize(manifest)?.into_iter().map(|l| l.program).collect();
    Ok(sha256_hex(&encode_data(&programs, manifest.data_format)?))
}
