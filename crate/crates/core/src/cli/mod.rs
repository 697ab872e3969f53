//! The `kdq7` command-line tool.
//!
//! Every subcommand takes its settings from flags, optionally layered over a
//! JSON object given with `--config` (flags win). The merged settings are
//! recorded in a [`RunManifest`] together with SHA-256 digests of all inputs
//! and outputs, and `kdq7 replay` re-runs a manifest and checks that the
//! outputs come out byte-identical.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub use commands::{
    BenchArgs, EvaluateArgs, GenDataArgs, InferArgs, QuantizeArgs, TeacherLogitsArgs, TrainArgs,
};
pub use manifest::{FileDigest, RunManifest};

use crate::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "kdq7", version, about = "Train, distill, quantize and run GRU-MLP classifiers")]
struct Cli {
    /// JSON object of settings for the subcommand; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the command summary to stdout as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic accelerometer dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a model on hard labels.
    Train(TrainArgs),
    /// Train a student on hard labels and teacher soft labels.
    Distill(TrainArgs),
    /// Write a model's logits for every datapoint as a soft-label CSV.
    TeacherLogits(TeacherLogitsArgs),
    /// Convert a float model to Q7 form.
    Quantize(QuantizeArgs),
    /// Score a model, or run leave-one-animal-out cross-validation.
    Evaluate(EvaluateArgs),
    /// Classify one window.
    Infer(InferArgs),
    /// Time the forward pass and count multiplications.
    Bench(BenchArgs),
    /// Re-run a manifest and verify its outputs are reproduced exactly.
    Replay {
        #[arg(value_name = "MANIFEST")]
        path: PathBuf,
    },
}

/// Failure of a CLI invocation, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) | Error::Shape(_) => EXIT_USAGE,
            Error::Parse { .. } | Error::DataContract(_) | Error::Coverage { .. } | Error::Json(_) => EXIT_DATA,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            Error::Io(_) | Error::Training(_) => EXIT_INTERNAL,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// What a command produced.
pub(crate) struct Outcome {
    pub summary: Value,
    /// Human-readable lines printed when `--json` is absent.
    pub text: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Outputs that contain timings and are not expected to replay exactly.
    pub volatile_outputs: Vec<PathBuf>,
}

/// Overlays explicitly given flags on the config file and decodes the result.
fn merge_settings<A: Serialize + DeserializeOwned>(config: Option<&PathBuf>, flags: &A) -> CliResult<(A, Value)> {
    let mut merged = Map::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => merged = m,
            Ok(_) => return Err(CliError::usage(format!("config {} is not a JSON object", path.display()))),
            Err(e) => return Err(CliError::usage(format!("config {}: {e}", path.display()))),
        }
    }
    match serde_json::to_value(flags).map_err(|e| CliError { code: EXIT_INTERNAL, message: e.to_string() })? {
        Value::Object(m) => {
            for (k, v) in m {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        _ => unreachable!("argument structs serialize to objects"),
    }
    let snapshot = Value::Object(merged);
    let args = serde_json::from_value(snapshot.clone()).map_err(|e| CliError::usage(format!("invalid settings: {e}")))?;
    Ok((args, snapshot))
}

fn dispatch(name: &str, settings: Value) -> CliResult<(Outcome, Value)> {
    fn go<A: Serialize + DeserializeOwned>(settings: Value, f: impl FnOnce(&A) -> CliResult<Outcome>) -> CliResult<(Outcome, Value)> {
        let args: A = serde_json::from_value(settings).map_err(|e| CliError::usage(format!("invalid settings: {e}")))?;
        let snapshot = serde_json::to_value(&args).map_err(|e| CliError { code: EXIT_INTERNAL, message: e.to_string() })?;
        Ok((f(&args)?, snapshot))
    }
    match name {
        "gen-data" => go(settings, commands::gen_data),
        "train" => go(settings, |a| commands::train(a, false)),
        "distill" => go(settings, |a| commands::train(a, true)),
        "teacher-logits" => go(settings, commands::teacher_logits),
        "quantize" => go(settings, commands::quantize),
        "evaluate" => go(settings, commands::evaluate),
        "infer" => go(settings, commands::infer),
        "bench" => go(settings, commands::bench),
        other => Err(CliError::usage(format!("unknown command {other:?}"))),
    }
}

fn seed_of(settings: &Value) -> Option<u64> {
    settings.get("seed").and_then(Value::as_u64)
}

fn emit(json: bool, outcome: &Outcome) {
    if json {
        println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
    } else {
        for line in &outcome.text {
            println!("{line}");
        }
    }
}

fn run_command(cli: &Cli) -> CliResult<()> {
    let (name, settings) = match &cli.command {
        Command::GenData(a) => ("gen-data", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Train(a) => ("train", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Distill(a) => ("distill", merge_settings(cli.config.as_ref(), a)?.1),
        Command::TeacherLogits(a) => ("teacher-logits", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Quantize(a) => ("quantize", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Evaluate(a) => ("evaluate", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Infer(a) => ("infer", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Bench(a) => ("bench", merge_settings(cli.config.as_ref(), a)?.1),
        Command::Replay { path } => return replay(path, cli.json),
    };
    let start = std::time::Instant::now();
    let (outcome, snapshot) = dispatch(name, settings)?;
    let wall_ms = start.elapsed().as_millis() as u64;
    let manifest_path = cli.manifest.clone().or_else(|| outcome.outputs.first().map(|p| manifest::default_path(p)));
    if let Some(path) = manifest_path {
        let m = RunManifest::build(name, snapshot.clone(), seed_of(&snapshot), &outcome, wall_ms)?;
        m.save(&path)?;
    }
    emit(cli.json, &outcome);
    Ok(())
}

fn replay(path: &PathBuf, json: bool) -> CliResult<()> {
    let m = RunManifest::load(path)?;
    if let Some(dir) = &m.working_dir {
        std::env::set_current_dir(dir).map_err(|e| CliError::usage(format!("cannot enter {dir}: {e}")))?;
    }
    let (outcome, _) = dispatch(&m.command, m.config.clone())?;
    let mismatches = m.verify_outputs()?;
    let summary = serde_json::json!({
        "command": m.command,
        "outputs_checked": m.outputs.iter().filter(|o| o.reproducible).count(),
        "mismatches": mismatches,
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    } else {
        for line in &outcome.text {
            println!("{line}");
        }
    }
    if mismatches.is_empty() {
        if !json {
            println!("replay of {} reproduced all outputs", m.command);
        }
        Ok(())
    } else {
        Err(CliError { code: EXIT_INTERNAL, message: format!("outputs differ from manifest: {}", mismatches.join(", ")) })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return if code == EXIT_OK { Ok(()) } else { Err(CliError { code, message: String::new() }) };
        }
    };
    run_command(&cli)
}

pub fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
