//! `persona`: command-line entry point for the extraction pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::fs::OpenOptions;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use persona_core::annotation::{load_session, run_session};
use persona_core::dataset::{CharacterProfile, SplitRatios};
use persona_core::jsonl::read_jsonl;
use persona_core::pipeline::{
    annotation_items, execute, BackendSpec, Command, CorpusFormat, ExtractOptions, ExtractionRecord,
    RunConfig,
};
use persona_core::{
    AdjudicationConfig, AdjudicationMode, DecodeConfig, DecodeMethod, RemoteScorerConfig,
    TemplateVariant,
};

const URL_ENV: &str = "PERSONA_SIDECAR_URL";

#[derive(Debug, Parser)]
#[command(name = "persona", version, about = "Persona triplet extraction pipeline")]
struct Cli {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Request timeout for remote backends, in milliseconds.
    #[arg(long, global = true, default_value_t = 30_000)]
    timeout_ms: u64,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Map fine-grained persona records onto the five coarse relations.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// Fine-to-coarse mapping table (JSON); the bundled table by default.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Stratified train/dev/test split of converted records.
    Split {
        #[arg(long)]
        input: PathBuf,
        /// Train, dev and test shares.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.81, 0.09, 0.10])]
        ratios: Vec<f64>,
    },
    /// Build the binary NLI training set from fact-linking records.
    BuildNli {
        #[arg(long)]
        input: PathBuf,
        /// Premises that must not appear in training data.
        #[arg(long)]
        blocklist: Option<PathBuf>,
    },
    /// Read a dialogue corpus into utterance, character and extraction-input files.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        /// Leave character description sentences out of the extraction inputs.
        #[arg(long)]
        no_descriptions: bool,
    },
    /// Decode persona triplets for every input text.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        backend: BackendArg,
        #[arg(long, default_value = "relation_first")]
        template: TemplateVariant,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Rerank or filter extraction candidates with an NLI judge.
    Adjudicate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        backend: BackendArg,
        #[arg(long, default_value = "relation_first")]
        template: TemplateVariant,
        #[arg(long, default_value = "none")]
        mode: AdjudicationMode,
    },
    /// Reference or intrinsic metrics.
    Metrics {
        #[command(subcommand)]
        kind: MetricsCmd,
    },
    /// Per-character persona graphs in JSON and DOT.
    Graph {
        #[arg(long)]
        input: PathBuf,
    },
    /// Interactive verdicts for one character's consolidated triplets.
    Annotate {
        /// Extraction records (extractions.jsonl or adjudicated.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// characters.jsonl from `ingest`.
        #[arg(long)]
        characters: PathBuf,
        #[arg(long)]
        character: String,
        #[arg(long)]
        annotator: String,
        /// Session file; appended to and resumed from.
        #[arg(long)]
        session: PathBuf,
    },
    /// Inter-annotator agreement and acceptance over session files.
    Agreement {
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// Scores against gold triplets, matched by source id.
    Reference {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Coverage, first-person, entity and recall statistics per character.
    Intrinsic {
        #[arg(long)]
        extractions: PathBuf,
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct BackendArg {
    /// `table:PATH` or `remote:URL`.
    #[arg(long)]
    backend: Option<BackendSpec>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long, default_value = "greedy")]
    method: DecodeMethod,
    #[arg(long, default_value_t = 5)]
    beams: usize,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    /// Diversity strength for diverse beam search.
    #[arg(long, default_value_t = 0.4)]
    lambda: f64,
    #[arg(long, default_value_t = 64)]
    max_length: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl From<persona_core::Error> for Failure {
    fn from(e: persona_core::Error) -> Self {
        if e.is_backend() {
            Failure::Backend(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<persona_core::Error>() {
            Some(core) if core.is_backend() => Failure::Backend(e),
            _ => Failure::Data(e),
        }
    }
}

/// Applies the URL override and requires exactly one backend when `needed`.
fn resolve_backend(arg: Option<BackendSpec>, needed: bool) -> Result<Option<BackendSpec>, Failure> {
    let env_url = std::env::var(URL_ENV).ok().filter(|u| !u.trim().is_empty());
    let spec = match (arg, env_url) {
        (Some(BackendSpec::Remote(_)), Some(url)) | (None, Some(url)) => Some(BackendSpec::Remote(url)),
        (spec, _) => spec,
    };
    if needed && spec.is_none() {
        return Err(Failure::Usage(format!(
            "a backend is required: pass --backend table:PATH or --backend remote:URL, or set {URL_ENV}"
        )));
    }
    Ok(spec)
}

fn command(cmd: Cmd, seed: u64) -> Result<Command, Failure> {
    Ok(match cmd {
        Cmd::Convert { input, mapping } => Command::Convert { input, mapping },
        Cmd::Split { input, ratios } => Command::Split {
            input,
            ratios: SplitRatios::new(ratios[0], ratios[1], ratios[2])
                .map_err(|e| Failure::Usage(e.to_string()))?,
        },
        Cmd::BuildNli { input, blocklist } => Command::BuildNli { input, blocklist },
        Cmd::Ingest {
            input,
            format,
            no_descriptions,
        } => Command::Ingest {
            input,
            format,
            descriptions: !no_descriptions,
        },
        Cmd::Extract {
            input,
            backend,
            template,
            decode,
        } => {
            let config = DecodeConfig {
                method: decode.method,
                beam_count: decode.beams,
                group_count: decode.groups,
                diversity_strength: decode.lambda,
                max_length: decode.max_length,
                seed,
                ..DecodeConfig::default()
            };
            config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            Command::Extract {
                input,
                backend: resolve_backend(backend.backend, true)?.expect("backend resolved"),
                options: ExtractOptions {
                    template,
                    decode: config,
                },
            }
        }
        Cmd::Adjudicate {
            input,
            backend,
            template,
            mode,
        } => Command::Adjudicate {
            input,
            backend: resolve_backend(backend.backend, mode != AdjudicationMode::None)?,
            template,
            config: AdjudicationConfig { mode },
        },
        Cmd::Metrics { kind } => match kind {
            MetricsCmd::Reference { predictions, gold } => {
                Command::MetricsReference { predictions, gold }
            }
            MetricsCmd::Intrinsic {
                extractions,
                descriptions,
            } => Command::MetricsIntrinsic {
                extractions,
                descriptions,
            },
        },
        Cmd::Graph { input } => Command::Graph { input },
        Cmd::Agreement { sessions } => Command::Agreement { sessions },
        Cmd::Annotate { .. } => unreachable!("annotate runs outside the pipeline"),
    })
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn annotate(
    input: &Path,
    characters: &Path,
    character: &str,
    annotator: &str,
    session: &Path,
) -> Result<(), Failure> {
    let records: Vec<ExtractionRecord> = read_records(input)?;
    let profiles: Vec<CharacterProfile> = read_records(characters)?;
    let profile = profiles
        .into_iter()
        .find(|p| p.character_id == character)
        .ok_or_else(|| Failure::Usage(format!("character `{character}` is not in {}", characters.display())))?;
    let items = annotation_items(&records, character);
    let existing = if session.exists() {
        let file = std::fs::File::open(session).context("opening session file")?;
        load_session(BufReader::new(file))?
    } else {
        Vec::new()
    };
    let out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(session)
        .with_context(|| format!("opening {}", session.display()))?;
    let done = run_session(
        &items,
        &profile,
        annotator,
        &existing,
        io::stdin().lock(),
        io::stdout().lock(),
        out,
        || {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        },
    )?;
    log::info!("recorded {} verdicts in {}", done.len(), session.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Cmd::Annotate {
        input,
        characters,
        character,
        annotator,
        session,
    } = &cli.command
    {
        return annotate(input, characters, character, annotator, session);
    }
    let mut config = RunConfig::new(command(cli.command, cli.seed)?, cli.out);
    config.seed = cli.seed;
    config.remote = RemoteScorerConfig {
        timeout_ms: cli.timeout_ms,
        ..RemoteScorerConfig::new("")
    };
    let manifest = execute(&config)?;
    log::info!(
        "{}: wrote {} files to {}",
        manifest.command,
        manifest.outputs.len() + 1,
        config.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Backend(e)) => {
            eprintln!("backend error: {e:#}");
            ExitCode::from(3)
        }
    }
}
