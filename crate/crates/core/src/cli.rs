//! Command-line front end. Every command takes `--config FILE` and any number
//! of `--set key=value` overrides.

use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{describe_keys, RunConfig, OUTPUT_ROOT_ENV};
use crate::data::{gen_synthetic, Dataset, Image, Split};
use crate::distill::distill;
use crate::error::{Error, Result, Violation};
use crate::mae::{load_pretrained, pretrain};
use crate::model::Classifier;
use crate::train::trainer::{evaluate, write_file};
use crate::train::train;
use crate::viz::attn_viz;

#[derive(Debug, Parser)]
#[command(name = "vitasd", version, about = "ViT + GP-head classifier: pretrain, train, distill, evaluate, visualize")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the two-class synthetic corpus to `data.root`.
    GenData(Common),
    /// MAE-pretrain an encoder; writes encoder.ckpt.
    Pretrain(Common),
    /// Supervised training; writes best.ckpt, metrics.csv, report.json.
    Train(Common),
    /// Distill a frozen teacher (`kd.teacher_checkpoint`) into a student.
    Distill(Common),
    /// Test-split metrics of a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Class-token attention heatmap per layer for one image.
    AttnViz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Also write one heatmap per head.
        #[arg(long)]
        per_head: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Train(c) | Command::Distill(c) => c,
            Command::Eval { common, .. } | Command::AttnViz { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Distill(_) => "distill",
            Command::Eval { .. } => "eval",
            Command::AttnViz { .. } => "attn-viz",
        }
    }
}

fn keys_help() -> String {
    format!(
        "Config keys (settable in --config JSON or with --set):\n{}\nThe default output directory is ${OUTPUT_ROOT_ENV}, or ./runs when unset.",
        describe_keys()
    )
}

/// The clap command with the config key listing attached to every help page.
pub fn command() -> clap::Command {
    let help = keys_help();
    Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()))
}

pub fn parse_from<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg.data.manifest.as_ref().map(PathBuf::from);
    Dataset::load(Path::new(&cfg.data.root), manifest.as_deref())
}

fn load_classifier(path: &Path) -> Result<Classifier> {
    Classifier::from_checkpoint(&Checkpoint::load(path)?)
}

fn fresh_model(cfg: &RunConfig) -> Result<Classifier> {
    let vit = cfg.vit_config()?;
    let head = cfg.head_spec()?;
    match &cfg.model.pretrained {
        Some(p) => load_pretrained(&Checkpoint::load(Path::new(p))?, &vit, &head, cfg.seed),
        None => Classifier::new(&vit, &head, cfg.seed),
    }
}

/// Execute one parsed invocation and return its JSON summary.
pub fn run(cli: &Cli) -> Result<Value> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let out = cfg.output_dir();
    let summary = match &cli.command {
        Command::GenData(_) => {
            let vit = cfg.vit_config()?;
            let root = PathBuf::from(&cfg.data.root);
            gen_synthetic(&root, cfg.data.counts(), vit.image_size, cfg.seed)?;
            json!({ "data_root": root, "counts": cfg.data.counts() })
        }
        Command::Pretrain(_) => {
            let ds = load_dataset(&cfg)?;
            let res = pretrain(&cfg, &ds, Some(&out))?;
            json!({ "checkpoint": out.join("encoder.ckpt"), "report": res.report })
        }
        Command::Train(_) => {
            let ds = load_dataset(&cfg)?;
            let res = train(fresh_model(&cfg)?, &ds, &cfg, Some(&out))?;
            json!({
                "checkpoint": out.join("best.ckpt"),
                "best_epoch": res.best_epoch,
                "test_accuracy": res.test.accuracy,
                "test_auroc": res.test.auroc,
            })
        }
        Command::Distill(_) => {
            let teacher_path = cfg.kd.teacher_checkpoint.as_ref().ok_or_else(|| {
                Error::Validation(vec![Violation::new(
                    &["kd.teacher_checkpoint"],
                    "distill requires a teacher checkpoint",
                )])
            })?;
            let teacher = load_classifier(Path::new(teacher_path))?;
            let ds = load_dataset(&cfg)?;
            let res = distill(&teacher, fresh_model(&cfg)?, &ds, &cfg, Some(&out))?;
            json!({ "checkpoint": out.join("student.ckpt"), "report": res.report })
        }
        Command::Eval { checkpoint, .. } => {
            let model = load_classifier(checkpoint)?;
            let ds = load_dataset(&cfg)?;
            let report = evaluate(&model, &ds.split(Split::Test), cfg.optimizer.batch_size)?;
            write_file(
                &out.join("eval_report.json"),
                serde_json::to_string_pretty(&json!({ "checkpoint": checkpoint, "test": report }))?.as_bytes(),
            )?;
            json!({ "test_accuracy": report.accuracy, "test_auroc": report.auroc, "test": report })
        }
        Command::AttnViz {
            checkpoint,
            image,
            per_head,
            ..
        } => {
            let model = load_classifier(checkpoint)?;
            let img = Image::load(image)?;
            let res = attn_viz(&model, &img, Some(&out), *per_head)?;
            let files: Vec<PathBuf> = res.layers.iter().map(|l| out.join(&l.file)).collect();
            json!({ "files": files, "meta": out.join("attn_meta.json") })
        }
    };
    let mut summary = summary;
    summary["command"] = json!(cli.command.name());
    summary["output"] = json!(out);
    Ok(summary)
}

/// Single-line machine-readable error.
pub fn error_json(err: &Error) -> String {
    let mut v = json!({ "error": err.kind(), "message": err.to_string() });
    match err {
        Error::Validation(violations) => {
            let fields: Vec<&String> = violations.iter().flat_map(|v| &v.fields).collect();
            v["fields"] = json!(fields);
            v["violations"] = json!(violations
                .iter()
                .map(|x| json!({ "fields": x.fields, "message": x.message }))
                .collect::<Vec<_>>());
        }
        Error::ConfigMismatch(fields) => v["fields"] = json!(fields),
        Error::NanLoss { step, lr, detail } => {
            v["step"] = json!(step);
            v["lr"] = json!(lr);
            v["detail"] = json!(detail);
        }
        _ => {}
    }
    v.to_string()
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) => 2,
        _ => 1,
    }
}
