mod commands;
mod config;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use groundst::corpus::Split;
use groundst::promptgen::PromptFormat;

use crate::config::{Config, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "groundst", version, about = "Grounded prompts and schema robustness for dialogue state tracking")]
pub struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus directory (split folders, variants/, seen_services.txt).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long, default_value = "d3st")]
    pub format: PromptFormat,
    /// Turn library, required by the turn and turnslot formats.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Schema variant ranks: `0..5`, `0,2,4` or `3`. Defaults to 0 when
    /// building; a prebuilt dataset keeps every rank unless given.
    #[arg(long, alias = "variant", value_parser = commands::parse_ranks)]
    pub variants: Option<commands::Ranks>,
}

/// Where evaluation examples come from: a corpus or a prebuilt dataset.
#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Prebuilt JSONL dataset.
    #[arg(long, alias = "input", conflicts_with = "corpus", required_unless_present = "corpus")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Eda,
    Backtranslate,
    Kst,
    SgdxMerge,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine knowledge-seeking turn candidates, one JSON file per key.
    Mine {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Candidate counts and token statistics per key.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Only this key (`Service.name`).
        #[arg(long)]
        key: Option<String>,
        /// Tokens shown per key.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Also write the full statistics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Diverse suggestions per key; with --out, an automatic library.
    Suggest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        key: Option<String>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Slot synonym groups, one comma-separated group per line.
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the curation service.
    Serve {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of a static UI bundle served at the root.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Linearize a split into a JSONL dataset.
    Build {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        /// Grounded prompt variants per example.
        #[arg(long, default_value_t = 1)]
        prompt_variants: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Create schema variants and the merged training dataset.
    Augment {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        method: Method,
        /// Number of extra variants (at most 5).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "d3st")]
        format: PromptFormat,
        /// Turn library (kst method and grounded formats).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Comma-separated pivot languages for backtranslation.
        #[arg(long, value_delimiter = ',')]
        pivots: Option<Vec<String>>,
        /// Translator: `cmd:PROGRAM ARGS` or an http(s) URL.
        #[arg(long)]
        translator: Option<String>,
        /// JSONL translation cache, replayed offline without --translator.
        #[arg(long)]
        translation_cache: Option<PathBuf>,
        /// Synonym lexicon for EDA (`token<TAB>syn1,syn2`); bundled by default.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Merged dataset.
        #[arg(long)]
        out: PathBuf,
        /// Also write variant schemas under DIR/v{rank}/{split}/schema.json.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Evaluate a backend: JGA per variant and schema sensitivity.
    Eval {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        /// oracle | noisy[:drop=P,corrupt=P,flip=P] | cmd:PROGRAM ARGS | http:HOST:PORT | http(s)://URL
        #[arg(long)]
        backend: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grounded prompt ensembling against a backend.
    Gpe {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        backend: String,
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Vote on raw output strings instead of parsed states.
        #[arg(long)]
        raw_vote: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let (mut config, path) = match Config::resolve(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    tracing::info!(
        config = %serde_json::to_string(&config).unwrap_or_default(),
        file = ?path,
        seed = config.seed,
        "resolved config"
    );
    match commands::run(cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
