mod config;

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use cadmus_core::corpus::{self, CorpusError, DataFormat, DatasetManifest, SplitInfo, SplitPart, SplitRatios};
use cadmus_core::enumerate::{
    self, build_grid, default_alphabet, majority_baseline, BaselineMode, Comparison, EnumError, GridSpec,
    ValueRange, DEFAULT_LENGTH,
};
use cadmus_core::harness::{
    self, BuiltinKind, BuiltinPredictor, EvalOptions, HarnessError, Predictor, ProcessPredictor,
};
use cadmus_core::isa::{self, IsaError};
use cadmus_core::templates::{
    LenParams, MixtureEntry, MixtureSpec, TemplateKind, TemplateSpec, DEFAULT_VALUE_BOUND,
};
use cadmus_core::vm::{self, Classification, VmConfig};
use cadmus_core::{OpCode, Program, SymbolForm, Vocabulary};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{CliConfig, FileConfig};

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "cadmus", version, about = "Cadmus stack machine: run, sample, enumerate and evaluate programs")]
struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true, env = "CADMUS_SEED")]
    seed: Option<u64>,
    /// TOML file with defaults for seed, form, output and quiet.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Symbol form for program text read or written.
    #[arg(long, global = true, value_enum)]
    form: Option<FormArg>,
    /// Directory for generated files.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormArg {
    #[value(alias = "standard")]
    Std,
    #[value(alias = "alternate")]
    Alt,
}

impl From<FormArg> for SymbolForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Std => SymbolForm::Standard,
            FormArg::Alt => SymbolForm::Alternate,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => DataFormat::Text,
            FormatArg::Binary => DataFormat::Binary,
        }
    }
}

#[derive(Args, Debug)]
struct VmArgs {
    #[arg(long, default_value_t = VmConfig::default().max_steps)]
    max_steps: usize,
    #[arg(long, default_value_t = VmConfig::default().max_call_depth)]
    max_call_depth: usize,
}

impl VmArgs {
    fn config(&self) -> anyhow::Result<VmConfig> {
        let config = VmConfig {
            max_steps: self.max_steps,
            max_call_depth: self.max_call_depth,
            ..VmConfig::default()
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct EnumArgs {
    /// Tokens per value program.
    #[arg(long, default_value_t = DEFAULT_LENGTH)]
    length: usize,
    /// Alphabet as standard glyphs; defaults to digits and the binary operators.
    #[arg(long)]
    alphabet: Option<String>,
}

impl EnumArgs {
    fn alphabet(&self) -> anyhow::Result<Vec<OpCode>> {
        match &self.alphabet {
            None => Ok(default_alphabet()),
            Some(text) => text
                .chars()
                .map(|ch| {
                    OpCode::from_glyph(ch, SymbolForm::Standard)
                        .ok_or_else(|| usage(format!("unknown glyph {ch:?} in alphabet")))
                })
                .collect(),
        }
    }

    fn build(&self) -> anyhow::Result<enumerate::ValueProgramSet> {
        Ok(enumerate::enum_value_programs(self.length, &self.alphabet()?)?)
    }
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// Half-width of the in-distribution square.
    #[arg(long, default_value_t = DEFAULT_VALUE_BOUND)]
    in_dist: i64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a program and print its outputs.
    Run {
        program: String,
        #[command(flatten)]
        vm: VmArgs,
    },
    /// Print TRUE or FALSE; exits 0 for true programs and 1 otherwise.
    Classify {
        program: String,
        #[command(flatten)]
        vm: VmArgs,
    },
    /// Print the execution trace as JSON lines.
    Trace {
        program: String,
        #[command(flatten)]
        vm: VmArgs,
    },
    /// Convert a program between symbol forms.
    Transcode {
        program: String,
        #[arg(long, value_enum)]
        to: FormArg,
        /// Defaults to the other form.
        #[arg(long, value_enum)]
        from: Option<FormArg>,
    },
    /// Write a corpus drawn from one template.
    Sample {
        #[arg(long)]
        template: String,
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = DEFAULT_VALUE_BOUND)]
        value_bound: i64,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        /// Base file name; defaults to the template name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Write a corpus from the five-template mixture in published proportions.
    Mixture {
        /// Divide the published template counts by this.
        #[arg(long, default_value_t = 4000, conflicts_with = "total")]
        divisor: u64,
        /// Total program count, overriding --divisor.
        #[arg(long)]
        total: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_VALUE_BOUND)]
        value_bound: i64,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        /// Training fraction; writes `<name>.train` and `<name>.validation`.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long, default_value = "mixture")]
        name: String,
    },
    /// Enumerate value programs and write the cache.
    Enum {
        #[command(flatten)]
        set: EnumArgs,
        #[arg(long, default_value = "values")]
        name: String,
    },
    /// Build the X-vs-Y comparison grid.
    Grid {
        #[command(flatten)]
        set: EnumArgs,
        /// Use [-bound, bound] for both axes.
        #[arg(long, default_value_t = DEFAULT_VALUE_BOUND)]
        bound: i64,
        /// X range as LO:HI, overriding --bound.
        #[arg(long)]
        x_range: Option<String>,
        /// Y range as LO:HI, overriding --bound.
        #[arg(long)]
        y_range: Option<String>,
        /// Programs per cell.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Comparison glyphs to keep (standard form).
        #[arg(long, default_value = "<>=")]
        comparisons: String,
        #[arg(long, default_value = "grid")]
        name: String,
    },
    /// Evaluate a predictor on a grid.
    Eval {
        #[arg(long)]
        grid: PathBuf,
        /// Shell command of a predictor process speaking JSON lines.
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        predictor: Option<String>,
        #[arg(long, value_enum)]
        builtin: Option<BuiltinArg>,
        /// Answer glyph for `--builtin constant`.
        #[arg(long, default_value = "=")]
        constant: char,
        /// Let the predictor answer with any vocabulary token.
        #[arg(long)]
        full_vocab: bool,
        /// Seconds to wait for each response.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
        /// Fail instead of counting unanswered requests as missing.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Score a response file against a grid.
    Score {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long, default_value = "score")]
        name: String,
    },
    /// Write one text prompt per grid program.
    Prompts {
        #[arg(long)]
        grid: PathBuf,
        /// Extra instructions appended after the instruction table.
        #[arg(long)]
        instructions: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        token_budget: u32,
        #[arg(long, default_value = "prompts")]
        dir: String,
    },
    /// Print the majority-answer baseline for every prefix length.
    Baseline {
        #[command(flatten)]
        set: EnumArgs,
        #[arg(long, value_enum, default_value = "conditional")]
        mode: ModeArg,
    },
    /// Print the instruction table as JSON.
    IsaDump,
    /// Serve the VM oracle over the predictor protocol on stdin/stdout.
    OraclePredictor,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BuiltinArg {
    Oracle,
    Majority,
    Uniform,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Conditional,
    LengthOnly,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::Classify { .. } => "classify",
            Command::Trace { .. } => "trace",
            Command::Transcode { .. } => "transcode",
            Command::Sample { .. } => "sample",
            Command::Mixture { .. } => "mixture",
            Command::Enum { .. } => "enum",
            Command::Grid { .. } => "grid",
            Command::Eval { .. } => "eval",
            Command::Score { .. } => "score",
            Command::Prompts { .. } => "prompts",
            Command::Baseline { .. } => "baseline",
            Command::IsaDump => "isa-dump",
            Command::OraclePredictor => "oracle-predictor",
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<CliConfig> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    Ok(CliConfig {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        form: cli.form.map(SymbolForm::from).or(file.form).unwrap_or_default(),
        output: cli.output.clone().or(file.output).unwrap_or_else(|| PathBuf::from(".")),
        quiet: cli.quiet || file.quiet.unwrap_or(false),
        config_file: cli.config.clone(),
        command: cli.command.name().to_string(),
    })
}

fn parse_program(text: &str, form: SymbolForm) -> anyhow::Result<Program> {
    isa::encode(text, form).map_err(|e| usage(e.to_string()))
}

fn parse_range(text: &str) -> anyhow::Result<ValueRange> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("range {text:?} must look like LO:HI")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<i64>()
            .map_err(|e| usage(format!("range {text:?}: {e}")))
    };
    Ok(ValueRange::new(parse(lo)?, parse(hi)?))
}

fn output_dir(cfg: &CliConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    Ok(&cfg.output)
}

fn note(cfg: &CliConfig, msg: impl fmt::Display) {
    if !cfg.quiet {
        eprintln!("cadmus: {msg}");
    }
}

fn read_grid(path: &Path) -> anyhow::Result<(Vec<enumerate::GridEntry>, Option<GridSpec>)> {
    enumerate::read_grid(path).with_context(|| format!("reading grid {}", path.display()))
}

fn candidates(spec: Option<&GridSpec>) -> Vec<cadmus_core::TokenId> {
    match spec {
        Some(s) => s.candidate_tokens(),
        None => OpCode::COMPARISONS.iter().map(|op| op.token()).collect(),
    }
}

fn write_dataset(
    cfg: &CliConfig,
    programs: &[cadmus_core::templates::LabeledProgram],
    manifest: DatasetManifest,
    name: &str,
) -> anyhow::Result<()> {
    let dir = output_dir(cfg)?;
    let format = manifest.data_format;
    let written = corpus::write_dataset(programs, manifest, dir, name)?;
    let (data, _) = corpus::dataset_paths(dir, name, format);
    note(cfg, format_args!("wrote {} programs to {}", written.count, data.display()));
    Ok(())
}

fn print_result(result: &harness::GridResult) {
    let in_dist = result.in_dist.map_or("none".to_string(), |v| v.to_string());
    println!(
        "aggregate {} in_dist {} cells {} requests {} correct {} missing {}",
        result.aggregate, in_dist, result.cells, result.requests, result.correct, result.missing
    );
}

fn execute(cli: Cli, cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { program, vm } => {
            let outputs = vm::run(parse_program(&program, cfg.form)?.tokens(), &vm.config()?);
            let text: Vec<String> = outputs.iter().map(ToString::to_string).collect();
            println!("{}", text.join(" "));
        }
        Command::Classify { program, vm } => {
            let verdict = vm::classify(&parse_program(&program, cfg.form)?, &vm.config()?);
            return Ok(match verdict.classification {
                Classification::TrueProgram => {
                    println!("TRUE");
                    ExitCode::SUCCESS
                }
                Classification::FalseProgram => {
                    println!("FALSE");
                    ExitCode::from(1)
                }
            });
        }
        Command::Trace { program, vm } => {
            let execution = vm::execute(&parse_program(&program, cfg.form)?, &vm.config()?);
            print!("{}", execution.trace.to_json_lines());
        }
        Command::Transcode { program, to, from } => {
            let to = SymbolForm::from(to);
            let from = from.map(SymbolForm::from).unwrap_or(match to {
                SymbolForm::Standard => SymbolForm::Alternate,
                SymbolForm::Alternate => SymbolForm::Standard,
            });
            println!("{}", isa::transcode(&program, from, to).map_err(|e| usage(e.to_string()))?);
        }
        Command::Sample {
            template,
            count,
            value_bound,
            min_len,
            max_len,
            format,
            name,
        } => {
            let kind = TemplateKind::from_name(&template).ok_or_else(|| {
                let known: Vec<&str> = TemplateKind::ALL.iter().map(|k| k.name()).collect();
                usage(format!("unknown template {template:?}; expected one of {}", known.join(", ")))
            })?;
            let mut spec = TemplateSpec::new(kind, cfg.seed).with_value_bound(value_bound);
            let defaults = kind.default_len_params();
            spec.len_params = LenParams {
                min: min_len.unwrap_or(defaults.min),
                max: max_len.unwrap_or(defaults.max),
            };
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let mix = MixtureSpec {
                entries: vec![MixtureEntry {
                    template: spec,
                    weight: 1.0,
                }],
                total_count: count,
                seed: cfg.seed,
            };
            let programs = cadmus_core::sample_mixture(&mix)?;
            let name = name.unwrap_or_else(|| kind.name().to_string());
            write_dataset(cfg, &programs, DatasetManifest::for_mixture(mix, format.into(), None), &name)?;
        }
        Command::Mixture {
            divisor,
            total,
            value_bound,
            format,
            split,
            name,
        } => {
            if divisor == 0 {
                return Err(usage("--divisor must be positive"));
            }
            let mix = match total {
                Some(t) => MixtureSpec::published_ratio(t, value_bound, cfg.seed),
                None => MixtureSpec::published_scaled(divisor, value_bound, cfg.seed),
            };
            mix.validate().map_err(|e| usage(e.to_string()))?;
            let programs = cadmus_core::sample_mixture(&mix)?;
            match split {
                None => write_dataset(cfg, &programs, DatasetManifest::for_mixture(mix, format.into(), None), &name)?,
                Some(train) => {
                    let ratios = SplitRatios {
                        train,
                        validation: 1.0 - train,
                    };
                    ratios.validate().map_err(|e| usage(e.to_string()))?;
                    let (train_part, validation_part) = corpus::split(&programs, ratios, cfg.seed)?;
                    for (part, programs, suffix) in [
                        (SplitPart::Train, &train_part, "train"),
                        (SplitPart::Validation, &validation_part, "validation"),
                    ] {
                        let info = SplitInfo {
                            ratios,
                            seed: cfg.seed,
                            part,
                        };
                        let manifest = DatasetManifest::for_mixture(mix.clone(), format.into(), Some(info));
                        write_dataset(cfg, programs, manifest, &format!("{name}.{suffix}"))?;
                    }
                }
            }
        }
        Command::Enum { set, name } => {
            let values = set.build()?;
            let dir = output_dir(cfg)?;
            let manifest = enumerate::write_value_set(&values, dir, &name)?;
            let (data, _) = enumerate::value_set_paths(dir, &name);
            println!("{}", manifest.count);
            note(cfg, format_args!("wrote {}", data.display()));
        }
        Command::Grid {
            set,
            bound,
            x_range,
            y_range,
            k,
            comparisons,
            name,
        } => {
            let mut spec = GridSpec::square(bound, k, cfg.seed);
            if let Some(r) = x_range {
                spec.x_range = parse_range(&r)?;
            }
            if let Some(r) = y_range {
                spec.y_range = parse_range(&r)?;
            }
            spec.comparisons = comparisons
                .chars()
                .map(|ch| {
                    Comparison::ALL
                        .into_iter()
                        .find(|c| c.opcode().glyph(SymbolForm::Standard) == Some(ch))
                        .ok_or_else(|| usage(format!("{ch:?} is not a comparison")))
                })
                .collect::<anyhow::Result<_>>()?;
            let values = set.build()?;
            let grid = build_grid(&spec, &values).map_err(|e| match e {
                EnumError::InvalidGrid(_) | EnumError::UnreachableValue(_) => usage(e.to_string()),
                e => e.into(),
            })?;
            let path = output_dir(cfg)?.join(format!("{name}.jsonl"));
            enumerate::write_grid(&grid, &path)?;
            println!("{} cells, {} programs", grid.cell_count(), grid.entries.len());
            note(cfg, format_args!("wrote {}", path.display()));
        }
        Command::Eval {
            grid,
            predictor,
            builtin,
            constant,
            full_vocab,
            timeout,
            strict,
            scoring,
            name,
        } => {
            let (entries, spec) = read_grid(&grid)?;
            if !(timeout.is_finite() && timeout > 0.0) {
                return Err(usage("--timeout must be positive"));
            }
            let mut predictor: Box<dyn Predictor> = match (predictor, builtin) {
                (Some(cmd), _) => Box::new(
                    ProcessPredictor::spawn(&cmd, Duration::from_secs_f64(timeout))
                        .with_context(|| format!("starting predictor {cmd:?}"))?
                        .fail_on_timeout(strict),
                ),
                (None, Some(b)) => {
                    let kind = match b {
                        BuiltinArg::Oracle => BuiltinKind::VmOracle,
                        BuiltinArg::Majority => BuiltinKind::Majority,
                        BuiltinArg::Uniform => BuiltinKind::UniformRandom { seed: cfg.seed },
                        BuiltinArg::Constant => BuiltinKind::Constant(
                            Vocabulary
                                .lookup(constant, SymbolForm::Standard)
                                .ok_or_else(|| usage(format!("unknown glyph {constant:?}")))?,
                        ),
                    };
                    Box::new(BuiltinPredictor::new(kind, &entries))
                }
                (None, None) => bail!(usage("one of --predictor or --builtin is required")),
            };
            let options = EvalOptions {
                restrict: !full_vocab,
                in_dist: ValueRange::symmetric(scoring.in_dist),
            };
            let outcome = harness::evaluate_entries(predictor.as_mut(), &entries, &candidates(spec.as_ref()), &options)?;
            let dir = output_dir(cfg)?;
            let (csv, _) = harness::write_result(&outcome.result, spec.as_ref(), &dir.join(&name))?;
            harness::write_responses(&outcome.responses, &dir.join(format!("{name}.responses.jsonl")))?;
            print_result(&outcome.result);
            note(cfg, format_args!("wrote {}", csv.display()));
        }
        Command::Score {
            grid,
            responses,
            scoring,
            name,
        } => {
            let (entries, spec) = read_grid(&grid)?;
            let records = harness::read_responses(&responses)
                .with_context(|| format!("reading responses {}", responses.display()))?;
            let options = EvalOptions {
                restrict: true,
                in_dist: ValueRange::symmetric(scoring.in_dist),
            };
            let result = harness::score_predictions(&entries, &records, cfg.form, &options)?;
            let (csv, _) = harness::write_result(&result, spec.as_ref(), &output_dir(cfg)?.join(&name))?;
            print_result(&result);
            note(cfg, format_args!("wrote {}", csv.display()));
        }
        Command::Prompts {
            grid,
            instructions,
            token_budget,
            dir,
        } => {
            let (entries, _) = read_grid(&grid)?;
            let doc = match instructions {
                Some(path) => {
                    Some(fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)
                }
                None => None,
            };
            let target = output_dir(cfg)?.join(dir);
            let records = harness::emit_prompts(&entries, cfg.form, doc.as_deref(), token_budget, &target)?;
            println!("{}", records.len());
            note(cfg, format_args!("wrote prompts to {}", target.display()));
        }
        Command::Baseline { set, mode } => {
            let values = set.build()?;
            let mode = match mode {
                ModeArg::Conditional => BaselineMode::Conditional,
                ModeArg::LengthOnly => BaselineMode::LengthOnly,
            };
            for t in 0..=values.length() {
                println!("{t}\t{}", majority_baseline(&values, t, mode)?);
            }
        }
        Command::IsaDump => println!("{}", Vocabulary.dump_json()),
        Command::OraclePredictor => {
            let mut oracle = BuiltinPredictor::new(BuiltinKind::VmOracle, &[]);
            let stdin = io::stdin();
            harness::serve_stdio(&mut oracle, stdin.lock(), io::stdout().lock())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn is_io(cause: &(dyn std::error::Error + 'static)) -> bool {
    cause.is::<io::Error>()
        || matches!(cause.downcast_ref::<CorpusError>(), Some(CorpusError::Io(_)))
        || matches!(cause.downcast_ref::<EnumError>(), Some(EnumError::Io(_)))
        || matches!(
            cause.downcast_ref::<HarnessError>(),
            Some(HarnessError::Io(_) | HarnessError::Enum(EnumError::Io(_)))
        )
}

/// 2 for usage errors, 3 for I/O errors, 4 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<IsaError>() {
            return 2;
        }
        if is_io(cause) {
            return 3;
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        if !cfg.quiet {
            eprintln!("cadmus: config {}", serde_json::to_string(&cfg)?);
        }
        execute(cli, &cfg)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("cadmus: error: {e:#}");
            let _ = io::stderr().flush();
            ExitCode::from(exit_code(&e))
        }
    }
}
