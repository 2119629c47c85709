//! The `molalign` command line: data generation, training under any of the
//! four objectives, translation, checkpoint merging, evaluation and
//! reporting. Every command writes a run manifest next to its outputs.

pub mod commands;
pub mod config_file;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use molalign_core::data::Direction;
use molalign_core::merge::Algorithm;
use molalign_core::train::Method;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "molalign", version, about = "Preference-aligned language-molecule translation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy caption/SMILES corpus.
    GenData(GenDataArgs),
    /// Shuffle and split a pair file into train/val/test.
    Split(SplitArgs),
    /// Build preference triples (and optionally KTO examples) from pairs.
    BuildTriples(BuildTriplesArgs),
    /// Train a policy with sft, dpo, cpo or kto.
    Train(TrainArgs),
    /// Greedy-decode a checkpoint over the sources of a pair file.
    Translate(TranslateArgs),
    /// Fuse checkpoints with ties, slerp or lerp.
    Merge(MergeArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Tabulate several eval reports into one CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Receives train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Corruption,
    Identity,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildTriplesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = GeneratorKind::Corruption)]
    pub generator: GeneratorKind,
    #[arg(long, default_value_t = 0.5)]
    pub strength: f64,
    /// Required for the corruption generator.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write two labelled KTO examples per triple here.
    #[arg(long)]
    pub kto_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Method,
    /// Pairs for sft, triples for dpo/cpo, labelled examples for kto.
    #[arg(long)]
    pub data: PathBuf,
    /// Starting checkpoint; a fresh model is built from the data when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Frozen reference checkpoint (dpo and kto only).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Train on one direction only.
    #[arg(long)]
    pub direction: Option<Direction>,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 640)]
    pub context: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub direction: Option<Direction>,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub algo: Algorithm,
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// One weight per model; `19 1` interpolates 5% of the way to the second.
    /// Defaults to equal weights.
    #[arg(long, num_args = 1..)]
    pub weights: Vec<f64>,
    /// Shared base model (ties only).
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Records with `id`, `direction` and `prediction` (a `target` field is
    /// accepted in its place).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Pair file holding the reference targets.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `baseline` for the lexical-overlap stand-in, otherwise a command that
    /// speaks the line-delimited JSON protocol.
    #[arg(long)]
    pub nli_scorer: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 30)]
    pub nli_timeout_secs: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// One label per report; defaults to the report paths.
    #[arg(long, num_args = 1..)]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match config_file::expand(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("molalign: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("molalign: {e}");
            e.exit_code()
        }
    }
}
