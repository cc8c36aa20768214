//! Batch command surface: `synth`, `prepare`, `pretrain`, `train`, `eval`,
//! `adapt`, `fewshot`, `predict` and `stats`.
//!
//! Every flag can also come from a TOML config (`--config`), either from a
//! section named after the subcommand or from top-level keys, and from
//! `--set key=value`. Precedence: explicit flags > `--set` > config file.

mod commands;
mod fewshot;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};

pub use fewshot::{fewshot_experiment, FewShotRow};
pub use manifest::{sha256_file, RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "phrasebreak", version, about = "Speaker-conditioned respiratory pause prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Common {
    /// TOML file with flag values (section named after the subcommand, or top-level keys)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one flag as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-speaker corpus with oracle speaker embeddings
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Normalize, label, split and tokenize a corpus
    #[command(args_override_self = true)]
    Prepare(PrepareArgs),
    /// Pretrain an encoder with masked-token objectives
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Train the phrasing model in two stages
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared split
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Fit the embedding adapter from raw to learned speaker embeddings
    #[command(args_override_self = true)]
    Adapt(AdaptArgs),
    /// Few-shot evaluation on unseen speakers over several sample sizes
    #[command(args_override_self = true)]
    Fewshot(FewshotArgs),
    /// Insert RP marks into text
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// RP statistics, distribution distances, clustering and association tests
    #[command(args_override_self = true)]
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub speakers: usize,
    /// Utterances per speaker
    #[arg(long, default_value_t = 200)]
    pub utts: usize,
    /// Style feature dimension
    #[arg(long, default_value_t = crate::synthgen::BASE_FEATURES)]
    pub dim_f: usize,
    /// Oracle embedding dimension
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    /// Per-utterance embedding noise
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    /// JSONL file, or a directory of TextGrid files
    #[arg(long)]
    pub corpus: PathBuf,
    /// jsonl (corpus or alignment records, detected per line) or textgrid
    #[arg(long, default_value = "jsonl")]
    pub format: String,
    /// Per-utterance embedding TSV aligned with the corpus records
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Comma-separated unseen speaker ids
    #[arg(long, value_delimiter = ',')]
    pub unseen: Vec<u32>,
    /// Validation utterances per unseen speaker
    #[arg(long, default_value_t = 50)]
    pub holdout: usize,
    /// train:validation:test ratio for seen speakers
    #[arg(long, default_value = "8:1:1")]
    pub ratio: String,
    #[arg(long, default_value_t = crate::corpus::DEFAULT_RP_THRESHOLD_MS)]
    pub rp_threshold_ms: f64,
    #[arg(long, default_value_t = 300)]
    pub subword_merges: usize,
    #[arg(long, default_value_t = 50)]
    pub sup_merges: usize,
    #[arg(long, default_value = "words")]
    pub word_tier: String,
    #[arg(long, default_value = "phones")]
    pub phone_tier: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    /// Output directory of `prepare`
    #[arg(long)]
    pub corpus: PathBuf,
    /// subword, phoneme, phoneme_mp or phoneme_pl
    #[arg(long, default_value = "subword")]
    pub encoder: String,
    /// Comma-separated objectives (mlm, sup_mlm, p2g); defaults to the encoder's set
    #[arg(long, value_delimiter = ',')]
    pub objectives: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub d_enc: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Output directory of `prepare`
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encoder family when no pretrained encoder is given
    #[arg(long, default_value = "subword")]
    pub encoder: String,
    /// Output directory of `pretrain`
    #[arg(long)]
    pub encoder_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub d_enc: usize,
    /// none, frozen or trainable
    #[arg(long, default_value = "trainable")]
    pub speaker_mode: String,
    #[arg(long, default_value_t = 16)]
    pub speaker_dim: usize,
    /// Per-speaker embedding table for frozen mode (default: <corpus>/seen_speakers.tsv)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 10)]
    pub stage1_epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub stage1_lr: f64,
    #[arg(long, default_value_t = 2)]
    pub stage2_epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub stage2_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub encoder_clip: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0.01)]
    pub threshold_step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory of `prepare`
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test_seen")]
    pub split: String,
    /// Override the checkpoint threshold
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also report the best threshold on this split
    #[arg(long)]
    pub sweep: bool,
    /// Per-speaker table for speakers absent from training
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Adapter applied to `--embeddings` (trainable-mode models)
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdaptArgs {
    /// Trainable-mode checkpoint holding the learned table
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Raw per-speaker table for the same seen speakers
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FewshotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory of `prepare`
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-utterance embeddings of the unseen speakers (default: <corpus>/validation_unseen.emb.tsv)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory of `adapt`; required for trainable-mode models
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20, 30, 40, 50])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub speaker: u32,
    /// One utterance per line, punctuation attached to words
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write annotated lines and a manifest here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StatsArgs {
    /// Output directory of `prepare`, or a corpus JSONL file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-speaker embedding table to cluster
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    /// CSV `speaker_id,prompt1|prompt2|...`
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
}

fn find_flag(args: &[String], name: &str) -> Vec<String> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        if args[i] == long && i + 1 < args.len() {
            out.push(args[i + 1].clone());
            i += 1;
        } else if let Some(v) = args[i].strip_prefix(&eq) {
            out.push(v.to_string());
        }
        i += 1;
    }
    out
}

fn flag_tokens(key: &str, value: &toml::Value) -> Result<Vec<String>> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| -> Result<String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            other => Err(Error::Config(format!("unsupported value for {key}: {other}"))),
        }
    };
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag],
        toml::Value::Boolean(false) => vec![],
        toml::Value::Array(items) => {
            vec![flag, items.iter().map(scalar).collect::<Result<Vec<_>>>()?.join(",")]
        }
        v => vec![flag, scalar(v)?],
    })
}

/// Expands `--config` and `--set` into ordinary flags placed before the
/// explicit ones, so explicit flags take precedence.
pub fn expand_args(argv: &[String]) -> Result<Vec<String>> {
    if argv.len() < 2 {
        return Ok(argv.to_vec());
    }
    let sub = argv[1].clone();
    let rest = &argv[2..];
    let mut injected = Vec::new();
    if let Some(path) = find_flag(rest, "config").last() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        let section = match table.get(&sub) {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => table.into_iter().filter(|(_, v)| !v.is_table()).collect(),
        };
        for (k, v) in &section {
            injected.extend(flag_tokens(k, v)?);
        }
    }
    for kv in find_flag(rest, "set") {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        injected.push(format!("--{}", k.trim().replace('_', "-")));
        injected.push(v.trim().to_string());
    }
    let mut out = vec![argv[0].clone(), sub];
    out.extend(injected);
    out.extend(rest.iter().cloned());
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn usage_failure(argv: &[String], err: &clap::Error) -> i32 {
    eprintln!("{err}");
    if matches!(err.kind(), clap::error::ErrorKind::UnknownArgument) {
        let mut cmd = Cli::command();
        if let Some(sub) = argv.get(1).and_then(|s| cmd.find_subcommand_mut(s)) {
            eprintln!("{}", sub.render_help());
        }
    }
    EXIT_USAGE
}

/// Runs one command line; returns the process exit code.
pub fn dispatch<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let argv: Vec<String> = args.into_iter().map(|s| s.into().to_string_lossy().into_owned()).collect();
    let expanded = match expand_args(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => return usage_failure(&argv, &e),
    };
    match commands::run(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
