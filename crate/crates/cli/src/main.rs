//! `clonealign` command-line front end.
//!
//! Every failure prints a single line `error[<class>]: <message>` on stderr
//! and exits with the class's status: 2 usage, 3 config, 4 data, 5 numeric.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clonealign::ErrorKind;

/// Environment variable naming the default run configuration file.
pub const CONFIG_ENV: &str = "CLONEALIGN_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "clonealign", version, about = "Zero-shot cross-language code clone retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-dialect corpus.
    Gen(GenArgs),
    /// Split a corpus into train and held-out problems.
    Split(SplitArgs),
    /// Train an encoder and write a run directory.
    Train(TrainArgs),
    /// Rank candidates and report mean average precision.
    Eval(EvalArgs),
    /// Export one embedding per program as TSV.
    Embed(EmbedArgs),
    /// Project exported embeddings to 2-D and draw a scatter plot.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub problems: usize,
    /// Comma-separated dialect tags, at least two.
    #[arg(long, value_delimiter = ',', default_value = "dA,dB")]
    pub dialects: Vec<String>,
    /// Solutions per problem and dialect.
    #[arg(long, default_value_t = 1)]
    pub solutions: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fraction of problems held out.
    #[arg(long, default_value_t = 0.5)]
    pub holdout: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Csp,
    Adversarial,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run directory for checkpoint, metrics and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML run configuration; defaults to $CLONEALIGN_CONFIG, then
    /// built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_csp: bool,
    #[arg(long)]
    pub no_dal: bool,
    #[arg(long)]
    pub no_cycle: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cross,
    Mono,
}

#[derive(Args, Debug)]
pub struct EncoderSource {
    /// Trained checkpoint to embed with.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the problem one-hot oracle instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderSource,
    #[arg(long, value_enum, default_value_t = ModeArg::Cross)]
    pub mode: ModeArg,
    #[arg(long)]
    pub query_lang: String,
    /// Candidate language; required for cross mode.
    #[arg(long)]
    pub cand_lang: Option<String>,
    /// Cross mode: rank over every other program, not only the candidate
    /// language.
    #[arg(long)]
    pub mixed_pool: bool,
    /// Write the full per-query report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColorBy {
    Language,
    Problem,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ColorBy::Language)]
    pub color_by: ColorBy,
    /// Also write the projected coordinates as TSV.
    #[arg(long)]
    pub coords_out: Option<PathBuf>,
}

/// A command-line mistake the parser could not catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    let lib = err.chain().find_map(|e| e.downcast_ref::<clonealign::Error>());
    match lib.map(clonealign::Error::kind) {
        Some(ErrorKind::Config) => ("config", 3),
        Some(ErrorKind::Numeric) => ("numeric", 5),
        _ => ("data", 4),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The error chain joined by `: `, skipping causes whose text an outer
/// message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = one_line(&cause.to_string());
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Plot(a) => plot::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = classify(&e);
            eprintln!("error[{class}]: {}", describe(&e));
            ExitCode::from(code)
        }
    }
}
