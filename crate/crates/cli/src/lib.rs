//! The `locret` command line. Every command writes one run directory holding
//! `manifest.json` (argv, resolved config, SHA-256 of every input and
//! output), `config.toml` and `outputs/`.

pub mod commands;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use error::{CliError, CliResult, ExitCategory};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "locret", version, about = "Location-conditioned multimodal retrieval on a synthetic lesion corpus")]
pub struct Cli {
    /// Log verbosity: off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate train and test corpus files.
    Gen(GenArgs),
    /// Run one training stage and save a checkpoint.
    Train(TrainArgs),
    /// Phrase grounding metrics and heatmaps over a boxed corpus.
    EvalGrounding(GroundingArgs),
    /// Location-conditioned and cross-modal retrieval metrics.
    EvalRetrieval(RetrievalArgs),
    /// Rank a corpus against one query image and region.
    Query(QueryArgs),
    /// Retrieval-grounded explanations and consistency scores.
    Explain(ExplainArgs),
    /// Re-execute a recorded run and compare every output byte for byte.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::EvalGrounding(_) => "eval-grounding",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::Query(_) => "query",
            Command::Explain(_) => "explain",
            Command::Rerun(_) => "rerun",
        }
    }

    fn run_args_mut(&mut self) -> Option<&mut RunArgs> {
        match self {
            Command::Gen(a) => Some(&mut a.run),
            Command::Train(a) => Some(&mut a.run),
            Command::EvalGrounding(a) => Some(&mut a.run),
            Command::EvalRetrieval(a) => Some(&mut a.run),
            Command::Query(a) => Some(&mut a.run),
            Command::Explain(a) => Some(&mut a.run),
            Command::Rerun(_) => None,
        }
    }

    /// Makes every relative path argument absolute against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            Command::Gen(_) | Command::Rerun(_) => {}
            Command::Train(a) => {
                fix(&mut a.corpus);
                a.init.iter_mut().for_each(fix);
                a.config.iter_mut().for_each(fix);
            }
            Command::EvalGrounding(a) => {
                fix(&mut a.model.checkpoint);
                fix(&mut a.model.corpus);
            }
            Command::EvalRetrieval(a) => {
                fix(&mut a.model.checkpoint);
                fix(&mut a.model.corpus);
            }
            Command::Query(a) => {
                fix(&mut a.model.checkpoint);
                fix(&mut a.model.corpus);
                a.image.iter_mut().for_each(fix);
            }
            Command::Explain(a) => {
                fix(&mut a.model.checkpoint);
                fix(&mut a.model.corpus);
            }
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Run directory receiving manifest.json, config.toml and outputs/.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Overwrite a run directory that already holds a manifest.
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelInputs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file (JSON lines) written by `gen`.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingArg {
    /// Base64 of little-endian f32 pixels.
    Base64,
    /// Nested JSON arrays.
    Inline,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Training samples.
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    /// Test samples.
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Number of disease motifs.
    #[arg(long, default_value_t = 3)]
    pub diseases: usize,
    /// Fraction of samples without any lesion.
    #[arg(long, default_value_t = 0.2)]
    pub normal_fraction: f64,
    /// Generator and split seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image storage in the corpus files.
    #[arg(long, value_enum, default_value = "base64")]
    pub encoding: EncodingArg,
    /// Drop the ground-truth lesion boxes.
    #[arg(long)]
    pub no_boxes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    /// Rates for training from scratch.
    Desk,
    /// Fine-tuning rates for pretrained encoders.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualArg {
    /// Cross-attention residual adds the self-attention output.
    Paper,
    /// Cross-attention residual adds the self-attention residual sum.
    Primed,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// 1: alignment losses; 2: triplet loss.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Starting checkpoint. Required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training config TOML; its stage must match --stage.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config when no --config is given.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Passes over the corpus.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seeds initialization, batching and mining.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pairs per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate for both the encoders and the alignment stack.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Treat same-disease pairs at other regions as triplet negatives.
    #[arg(long)]
    pub hard_region_negatives: bool,
    /// Stacked alignment blocks (fresh models only).
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Attention heads (fresh models only).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Cross-attention residual form (fresh models only).
    #[arg(long, value_enum)]
    pub residual_mode: Option<ResidualArg>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GroundingArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelInputs,
    /// IoU thresholds on the normalized map, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub thresholds: Vec<f64>,
    /// Seed labels the summary is aggregated over, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Export the first N maps as PGM and raw text.
    #[arg(long, default_value_t = 0)]
    pub heatmaps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GalleryArg {
    /// Every gallery sample embedded under the query's region.
    Conditioned,
    /// One entry per (sample, finding), each under its own region.
    FindingIndex,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RetrievalArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelInputs,
    /// Region-query gallery construction.
    #[arg(long, value_enum, default_value = "conditioned")]
    pub gallery: GalleryArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    /// Region-conditioned embeddings.
    RegionQuery,
    /// Global image embeddings.
    GlobalImage,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QueryArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelInputs,
    /// Region name the query is conditioned on.
    #[arg(long)]
    pub region: String,
    /// Gallery size; larger values return the whole corpus.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Query image (PNG or PGM, grayscale, model input size).
    #[arg(long, conflicts_with = "sample", required_unless_present = "sample")]
    pub image: Option<PathBuf>,
    /// Use this corpus sample as the query; it is left out of the gallery.
    #[arg(long)]
    pub sample: Option<String>,
    /// Query embedding: region-conditioned or global image.
    #[arg(long, value_enum, default_value = "region-query")]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendArg {
    /// Deterministic offline generator and rater.
    Stub,
    /// HTTP completion endpoint.
    Remote,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelInputs,
    /// Retrieval embedding.
    #[arg(long, value_enum, default_value = "region-query")]
    pub mode: ModeArg,
    /// Text generation service.
    #[arg(long, value_enum, default_value = "stub")]
    pub backend: BackendArg,
    /// Completion URL for the remote backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the remote bearer token.
    #[arg(long, default_value = "LOCRET_LLM_TOKEN")]
    pub token_env: String,
    /// Remote model name.
    #[arg(long, default_value = "gpt-4o-mini")]
    pub model_name: String,
    /// Per-request timeout for the remote backend.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Retrieved cases shown to the generator.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Concurrent backend calls.
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RerunArgs {
    /// Manifest of the run to reproduce.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh run directory for the re-execution.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Overwrite a run directory that already holds a manifest.
    #[arg(long)]
    pub force: bool,
}

/// Parses `argv` (without the program name) and runs it.
pub fn run_args(argv: &[String]) -> CliResult<RunManifest> {
    let cli = Cli::try_parse_from(std::iter::once("locret".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Argument(e.to_string()))?;
    run(cli, argv)
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult<RunManifest> {
    let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
    match cli.command {
        Command::Rerun(a) => rerun(&a),
        mut cmd => {
            cmd.resolve_paths(&cwd);
            commands::execute(&cmd, argv, &cwd)
        }
    }
}

/// Replaces the value of `--run-dir` in a recorded argv.
fn with_run_dir(argv: &[String], dir: &Path) -> Vec<String> {
    let dir = dir.to_string_lossy().into_owned();
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--run-dir" {
            out.push(a.clone());
            it.next();
            out.push(dir.clone());
        } else if a.starts_with("--run-dir=") {
            out.push(format!("--run-dir={dir}"));
        } else {
            out.push(a.clone());
        }
    }
    out
}

fn rerun(a: &RerunArgs) -> CliResult<RunManifest> {
    let old = RunManifest::load(&a.manifest)?;
    for input in &old.inputs {
        let path = Path::new(&input.path);
        if !path.is_file() {
            return Err(CliError::MissingFile(path.to_path_buf()));
        }
        let now = manifest::sha256_file(path)?;
        if now != input.sha256 {
            return Err(CliError::Mismatch(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let run_dir = std::path::absolute(&a.run_dir).map_err(|e| CliError::io(&a.run_dir, e))?;
    let argv = with_run_dir(&old.argv, &run_dir);
    let cli = Cli::try_parse_from(std::iter::once("locret".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Format(format!("recorded argv does not parse: {e}")))?;
    let mut cmd = cli.command;
    let Some(run_args) = cmd.run_args_mut() else {
        return Err(CliError::Argument("a rerun manifest cannot be rerun".into()));
    };
    run_args.force = a.force;
    let cwd = PathBuf::from(&old.cwd);
    cmd.resolve_paths(&cwd);
    let new = commands::execute(&cmd, &argv, &cwd)?;

    let mut problems = Vec::new();
    for o in &old.outputs {
        match new.outputs.iter().find(|n| n.path == o.path) {
            None => problems.push(format!("{} missing", o.path)),
            Some(n) if n.sha256 != o.sha256 => problems.push(format!("{} differs", o.path)),
            Some(_) => {}
        }
    }
    for n in &new.outputs {
        if !old.outputs.iter().any(|o| o.path == n.path) {
            problems.push(format!("{} not in the recorded run", n.path));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Mismatch(problems.join("; ")));
    }
    log::info!("rerun reproduced {} output files byte for byte", new.outputs.len());
    Ok(new)
}
