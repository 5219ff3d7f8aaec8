//! The `polevent` command line: build an index from a news corpus, ask it
//! questions, explore it interactively and score answers against a gold set.
//!
//! Everything runs through [`run`], which takes its arguments and standard
//! streams explicitly so the binary can be driven in-process.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use polevent_core::corpus::CorpusError;
use polevent_core::embed::EmbedError;
use polevent_core::engine::{self, Answer, Engine, EngineError};
use polevent_core::eval::{self, EvalError, EvalReport, Prediction};
use polevent_core::events::schema_description;
use polevent_core::http::{redact, API_KEY_ENV};
use polevent_core::index::IndexError;
use polevent_core::llm::{LlmBackend, LlmError, MockScript};
use polevent_core::prompt::{PromptError, PromptTemplate};
use serde::Serialize;

use crate::config::{AppConfig, ConfigError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const GENERAL: i32 = 1;
    /// Bad input data or configuration.
    pub const DATA: i32 = 2;
    /// The remote endpoint could not be reached or refused the request.
    pub const TRANSPORT: i32 = 3;
    pub const USAGE: i32 = 64;
}

pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Parser)]
#[command(name = "polevent", version, about = "Extract political events from news with retrieval-augmented prompting")]
pub struct Cli {
    /// JSON settings file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Machine-readable output on stdout
    #[arg(long, global = true)]
    json: bool,
    /// Show retrieval hits, scores and raw model output on stderr
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a corpus and write the index
    Build(BuildArgs),
    /// Answer one question
    Query(QueryArgs),
    /// Answer questions read line by line
    Repl(EngineArgs),
    /// Score answers against a gold set
    Eval(EvalArgs),
    /// Print the effective configuration
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// JSON-lines file or directory of them
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for the index
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// Index directory written by `build`
    #[arg(long)]
    index: Option<PathBuf>,
    /// Number of passages to retrieve
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    /// Answer from a scripted mock instead of the chat endpoint
    #[arg(long, value_name = "SCRIPT")]
    mock: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// The question; read from stdin when omitted
    #[arg(long)]
    q: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Gold set file
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Similarity threshold for a slot match
    #[arg(long)]
    tau: Option<f64>,
    /// Where to write the JSON report (default: <index>/eval_report.json)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Precomputed predictions instead of querying the index
    #[arg(long)]
    answers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Include the prompt templates and output schema
    #[arg(long)]
    show_prompts: bool,
}

/// The standard streams a command reads and writes.
pub struct Io<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::new(exit::GENERAL, err.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(err: ConfigError) -> Self {
        let code = match err {
            ConfigError::Read { .. } => exit::GENERAL,
            _ => exit::DATA,
        };
        Failure::new(code, err.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(err: EvalError) -> Self {
        Failure::new(exit::DATA, err.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(err: EngineError) -> Self {
        Failure::new(engine_exit_code(&err), err.to_string())
    }
}

fn engine_exit_code(err: &EngineError) -> i32 {
    if err.is_transport() {
        return exit::TRANSPORT;
    }
    match err {
        EngineError::EmptyQuestion | EngineError::Prompt(PromptError::EmptyQuestion) => exit::USAGE,
        EngineError::Corpus(CorpusError::Io(_)) | EngineError::Io(_) => exit::GENERAL,
        EngineError::Index(IndexError::Io(_)) => exit::GENERAL,
        EngineError::Corpus(_)
        | EngineError::Index(_)
        | EngineError::Prompt(_)
        | EngineError::QueryOnEmptyIndex
        | EngineError::EmbedderMismatch { .. }
        | EngineError::Config(_)
        | EngineError::Meta { .. }
        | EngineError::Embed(EmbedError::Config(_))
        | EngineError::Llm(LlmError::Config(_) | LlmError::Script(_)) => exit::DATA,
        // A malformed response still came from the endpoint.
        EngineError::Embed(EmbedError::Protocol(_)) | EngineError::Llm(LlmError::Protocol(_)) => {
            exit::TRANSPORT
        }
        _ => exit::GENERAL,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { exit::USAGE } else { exit::OK };
            let target: &mut dyn Write = if err.use_stderr() { io.stderr } else { io.stdout };
            let _ = write!(target, "{}", err.render());
            return code;
        }
    };
    init_tracing(cli.verbose);
    match dispatch(&cli, io) {
        Ok(()) => exit::OK,
        Err(failure) => {
            let _ = writeln!(io.stderr, "error: {}", redact(&failure.message));
            failure.code
        }
    }
}

fn init_tracing(verbose: bool) {
    let level = if verbose {
        tracing::Level::DEBUG
    } else {
        tracing::Level::WARN
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .without_time()
        .try_init();
}

fn dispatch(cli: &Cli, io: &mut Io<'_>) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    let ctx = Context {
        config,
        json: cli.json,
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::Build(args) => ctx.build(args, io),
        Command::Query(args) => ctx.query(args, io),
        Command::Repl(args) => ctx.repl(args, io),
        Command::Eval(args) => ctx.eval(args, io),
        Command::Config(args) => ctx.show_config(args, io),
    }
}

struct Context {
    config: AppConfig,
    json: bool,
    verbose: bool,
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T, compact: bool) -> Result<(), Failure> {
    let text = if compact {
        serde_json::to_string(value)
    } else {
        serde_json::to_string_pretty(value)
    }
    .map_err(|e| Failure::new(exit::GENERAL, e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

impl Context {
    fn index_dir(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned().unwrap_or_else(|| self.config.paths.index.clone())
    }

    fn open_engine(&self, args: &EngineArgs) -> Result<Engine, Failure> {
        let template = PromptTemplate::from_files(
            self.config.prompts.system.as_deref(),
            self.config.prompts.wrapper.as_deref(),
        )
        .map_err(|e| Failure::new(exit::DATA, e.to_string()))?;
        let backend = match args.mock.as_ref().or(self.config.paths.mock.as_ref()) {
            Some(path) => LlmBackend::Mock(
                MockScript::load(path).map_err(|e| Failure::new(exit::DATA, e.to_string()))?,
            ),
            None => LlmBackend::Remote(self.config.llm.clone()),
        };
        let mut engine_config = self.config.engine.clone();
        if let Some(k) = args.k {
            engine_config.k = k as usize;
        }
        let dir = self.index_dir(args.index.as_ref());
        Ok(Engine::open(
            &dir,
            self.config.embedder.clone(),
            backend,
            template,
            engine_config,
        )?)
    }

    fn build(&self, args: &BuildArgs, io: &mut Io<'_>) -> Result<(), Failure> {
        let corpus = args
            .corpus
            .as_ref()
            .or(self.config.paths.corpus.as_ref())
            .ok_or_else(|| Failure::usage("build needs --corpus (or paths.corpus in the config)"))?;
        let out = self.index_dir(args.out.as_ref());
        let output = engine::build(corpus, &self.config.corpus, &self.config.embedder, &out)?;
        let r = &output.report;
        if self.json {
            write_json(io.stdout, r, true)?;
        } else {
            writeln!(
                io.stdout,
                "{} records read, {} rejected, {} outside the filter",
                r.records_read,
                r.rejected_lines + r.rejected_records,
                r.filtered_out
            )?;
            writeln!(io.stdout, "{} documents, {} chunks, dim {}", r.documents, r.chunks, r.dim)?;
        }
        writeln!(io.stderr, "index written to {}", out.display())?;
        Ok(())
    }

    fn report_answer(&self, answer: &Answer, io: &mut Io<'_>) -> Result<(), Failure> {
        if let Some(warning) = &answer.warning {
            writeln!(io.stderr, "warning: {warning}")?;
        }
        if !answer.invalid.is_empty() {
            writeln!(io.stderr, "{} event(s) dropped as invalid", answer.invalid.len())?;
        }
        if self.verbose {
            for hit in &answer.hits {
                let shown = if answer.context_ids.contains(&hit.chunk_id) { "" } else { " (over budget)" };
                writeln!(io.stderr, "{:.4}  {}  {}{shown}", hit.score, hit.chunk_id, hit.source.headline)?;
            }
            for invalid in &answer.invalid {
                let reasons: Vec<String> = invalid.violations.iter().map(ToString::to_string).collect();
                writeln!(io.stderr, "invalid: {} ({})", invalid.raw, reasons.join(", "))?;
            }
            writeln!(io.stderr, "raw model output:\n{}", answer.raw_text)?;
        }
        write_json(io.stdout, &answer.events, self.json)
    }

    fn query(&self, args: &QueryArgs, io: &mut Io<'_>) -> Result<(), Failure> {
        let question = match &args.q {
            Some(q) => q.clone(),
            None => {
                let mut text = String::new();
                io.stdin.read_to_string(&mut text)?;
                text
            }
        };
        if question.trim().is_empty() {
            return Err(Failure::usage("the question is empty"));
        }
        let engine = self.open_engine(&args.engine)?;
        let answer = engine.answer_query(&question)?;
        self.report_answer(&answer, io)
    }

    fn repl(&self, args: &EngineArgs, io: &mut Io<'_>) -> Result<(), Failure> {
        let engine = self.open_engine(args)?;
        writeln!(io.stderr, "ask a question; :sources lists the last answer's sources, :quit exits")?;
        let mut last: Option<Answer> = None;
        loop {
            write!(io.stderr, "> ")?;
            io.stderr.flush()?;
            let mut line = String::new();
            if io.stdin.read_line(&mut line)? == 0 {
                return Ok(());
            }
            match line.trim() {
                "" => continue,
                ":quit" | ":q" | ":exit" => return Ok(()),
                ":sources" => match &last {
                    Some(answer) => {
                        let attributions = answer.attributions();
                        if attributions.is_empty() {
                            writeln!(io.stdout, "(no sources)")?;
                        }
                        for (chunk_id, source) in attributions {
                            let link = source.link.as_deref().unwrap_or("-");
                            writeln!(io.stdout, "{chunk_id}\t{}\t{link}", source.headline)?;
                        }
                    }
                    None => writeln!(io.stderr, "no answer yet")?,
                },
                command if command.starts_with(':') => {
                    writeln!(io.stderr, "unknown command {command}; try :sources or :quit")?;
                }
                question => match engine.answer_query(question) {
                    Ok(answer) => {
                        self.report_answer(&answer, io)?;
                        last = Some(answer);
                    }
                    Err(err) => writeln!(io.stderr, "error: {}", redact(&err.to_string()))?,
                },
            }
        }
    }

    fn eval(&self, args: &EvalArgs, io: &mut Io<'_>) -> Result<(), Failure> {
        let gold_path = args
            .gold
            .as_ref()
            .or(self.config.paths.gold.as_ref())
            .ok_or_else(|| Failure::usage("eval needs --gold (or paths.gold in the config)"))?;
        let gold = eval::load_gold(gold_path)?;
        let tau = args.tau.unwrap_or(self.config.eval.tau);

        let predictions: Vec<Prediction> = match &args.answers {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| {
                    Failure::new(exit::DATA, format!("answers file {}: {e}", path.display()))
                })?
            }
            None => {
                let engine = self.open_engine(&args.engine)?;
                let mut out = Vec::with_capacity(gold.items.len());
                for item in &gold.items {
                    let answer = engine.answer_query(&item.question)?;
                    if let Some(warning) = &answer.warning {
                        writeln!(io.stderr, "warning for {:?}: {warning}", item.question)?;
                    }
                    out.push(Prediction::from(&answer));
                }
                out
            }
        };
        let report = eval::evaluate(&predictions, &gold, tau)?;

        let report_path = args
            .report
            .clone()
            .unwrap_or_else(|| self.index_dir(args.engine.index.as_ref()).join(REPORT_FILE));
        write_report(&report_path, &report)?;

        write!(io.stderr, "{}", eval::render_table(&report))?;
        writeln!(io.stderr, "report written to {}", report_path.display())?;
        if self.json {
            write_json(io.stdout, &report, true)?;
        } else {
            writeln!(
                io.stdout,
                "accuracy: {:.3} ({}/{} slots, tau {})",
                report.accuracy, report.matched_count, report.gold_slot_count, report.tau
            )?;
        }
        Ok(())
    }

    fn show_config(&self, args: &ConfigArgs, io: &mut Io<'_>) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Prompts {
            system: String,
            wrapper: String,
            schema: String,
        }
        #[derive(Serialize)]
        struct Shown<'a> {
            config: &'a AppConfig,
            api_key_env: &'static str,
            api_key_set: bool,
            #[serde(skip_serializing_if = "Option::is_none")]
            prompts: Option<Prompts>,
        }
        let prompts = if args.show_prompts {
            let template = PromptTemplate::from_files(
                self.config.prompts.system.as_deref(),
                self.config.prompts.wrapper.as_deref(),
            )
            .map_err(|e| Failure::new(exit::DATA, e.to_string()))?;
            Some(Prompts {
                system: template.system_text().to_owned(),
                wrapper: template.wrapper_text().to_owned(),
                schema: schema_description(),
            })
        } else {
            None
        };
        let shown = Shown {
            config: &self.config,
            api_key_env: API_KEY_ENV,
            api_key_set: std::env::var_os(API_KEY_ENV).is_some_and(|v| !v.is_empty()),
            prompts,
        };
        write_json(io.stdout, &shown, self.json)
    }
}

fn write_report(path: &Path, report: &EvalReport) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Failure::new(exit::GENERAL, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
