//! Subcommand front end. Every stage reads one config file (plus
//! `--set section.key=value` overrides), writes its artifacts into
//! `--out`, and drops a `run_meta.json` recording the seed, the config
//! digest, and content hashes of its file inputs, so any artifact can be
//! traced back to exactly what produced it.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::file_digest;
use crate::config::RunConfig;
use crate::corpus::{self, View};
use crate::error::{Error, Result};
use crate::{adapt, decode, finetune, metrics, pretrain};

#[derive(Parser, Debug)]
#[command(name = "avsd", version, about = "Audio-visual self-distillation lipreading pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Path to the run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. --set pretrain.steps=10.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for this stage's artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Self-distillation pretraining of the shared encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Supervised fine-tuning to a speaker-independent model.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained encoder checkpoint; omit to train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Cross-language transfer: never freeze the encoder.
        #[arg(long)]
        transfer: bool,
    },
    /// Speaker adaptation of a speaker-independent checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Speaker-independent checkpoint to adapt.
        #[arg(long)]
        init: PathBuf,
    },
    /// Ensemble joint CTC/attention decoding.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        /// Comma-separated views (lip|face): one per model, or one for all.
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<String>,
    },
    /// Score hypotheses against manifest transcripts.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// decode.jsonl produced by the decode subcommand.
        #[arg(long)]
        hyps: PathBuf,
    },
}

/// Usage problems exit 2; everything else that fails exits 1.
fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or(Error::Config {
        path: "<args>".into(),
        line: 0,
        detail: "--config is required".into(),
    })?;
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        line: 0,
        detail: format!("cannot read config: {e}"),
    })?;
    let mut cfg = RunConfig::parse(&text, &path.display().to_string())?;
    cfg.apply_overrides(&common.set)?;
    Ok(cfg)
}

/// Serializable trace of one invocation, written next to the artifacts.
fn write_meta(
    out_dir: &Path,
    command: &str,
    seed: u64,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
    extra: &[(&str, String)],
) -> Result<()> {
    let mut meta: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    meta.insert("command".into(), command.into());
    meta.insert("seed".into(), seed.into());
    meta.insert("config_digest".into(), cfg.digest().into());
    let mut hashed: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    for (name, path) in inputs {
        hashed.insert(name.to_string(), file_digest(path)?.into());
    }
    meta.insert("inputs".into(), serde_json::to_value(hashed).unwrap());
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone().into());
    }
    let path = out_dir.join("run_meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let rows = corpus::generate_corpus(&cfg.corpus, &common.out)?;
            log::info!("wrote {} utterances under {}", rows.len(), common.out.display());
            write_meta(
                &common.out,
                "gen-corpus",
                cfg.corpus.master_seed,
                &cfg,
                &[],
                &[("num_utterances", rows.len().to_string())],
            )
        }
        Command::Pretrain { common, manifest } => {
            let cfg = load_config(&common)?;
            let outcome = pretrain::run_pretrain(&cfg, &manifest, &common.out)?;
            write_meta(
                &common.out,
                "pretrain",
                cfg.pretrain.seed,
                &cfg,
                &[("manifest", manifest.as_path())],
                &[("checkpoint", outcome.checkpoint.display().to_string())],
            )
        }
        Command::Finetune { common, manifest, init, transfer } => {
            let mut cfg = load_config(&common)?;
            if transfer {
                cfg.finetune.transfer = true;
            }
            let outcome = finetune::run_finetune(&cfg, &manifest, &common.out, init.as_deref())?;
            let frozen = if cfg.finetune.transfer { 0 } else { cfg.finetune.freeze_steps };
            let mut inputs: Vec<(&str, &Path)> = vec![("manifest", manifest.as_path())];
            if let Some(ckpt) = init.as_deref() {
                inputs.push(("init", ckpt));
            }
            write_meta(
                &common.out,
                "finetune",
                cfg.finetune.seed,
                &cfg,
                &inputs,
                &[
                    ("checkpoint", outcome.checkpoint.display().to_string()),
                    ("freeze_steps", frozen.to_string()),
                ],
            )
        }
        Command::Adapt { common, manifest, init } => {
            let cfg = load_config(&common)?;
            let outcome = adapt::run_adapt(&cfg, &manifest, &common.out, &init)?;
            write_meta(
                &common.out,
                "adapt",
                cfg.adapt.seed,
                &cfg,
                &[("manifest", manifest.as_path()), ("init", init.as_path())],
                &[
                    ("checkpoint", outcome.checkpoint.display().to_string()),
                    ("speaker", cfg.adapt.speaker.clone()),
                ],
            )
        }
        Command::Decode { common, manifest, models, views } => {
            let cfg = load_config(&common)?;
            let views: Vec<View> = views
                .iter()
                .map(|v| View::parse(v))
                .collect::<Result<_>>()
                .map_err(|e| Error::Config {
                    path: "<args>".into(),
                    line: 0,
                    detail: e.to_string(),
                })?;
            let paired: Vec<(PathBuf, View)> = if views.len() == 1 {
                models.iter().map(|m| (m.clone(), views[0])).collect()
            } else if views.len() == models.len() {
                models.iter().cloned().zip(views).collect()
            } else {
                return Err(Error::Config {
                    path: "<args>".into(),
                    line: 0,
                    detail: format!("{} models but {} views", models.len(), views.len()),
                });
            };
            let outcome = decode::run_decode(&cfg, &manifest, &common.out, &paired)?;
            let mut hashed: Vec<(String, PathBuf)> = vec![("manifest".into(), manifest.clone())];
            for (i, (m, _)) in paired.iter().enumerate() {
                hashed.push((format!("model_{i}"), m.clone()));
            }
            let inputs: Vec<(&str, &Path)> =
                hashed.iter().map(|(k, p)| (k.as_str(), p.as_path())).collect();
            write_meta(
                &common.out,
                "decode",
                0,
                &cfg,
                &inputs,
                &[("jsonl", outcome.jsonl.display().to_string())],
            )
        }
        Command::Score { common, manifest, hyps } => {
            let cfg = load_config(&common)?;
            let outcome = metrics::run_score(&cfg, &manifest, &hyps, &common.out)?;
            write_meta(
                &common.out,
                "score",
                cfg.score.seed,
                &cfg,
                &[("manifest", manifest.as_path()), ("hyps", hyps.as_path())],
                &[("csv", outcome.csv.display().to_string())],
            )
        }
    }
}

/// Parses argv and runs one subcommand; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AVSD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage problems are exit 2.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
