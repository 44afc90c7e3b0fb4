//! Command-line driver: one subcommand per pipeline stage, all configured
//! from a single JSON document whose keys individual flags can override.
//!
//! Every invocation prints exactly one JSON summary line on stdout. Logs go
//! to stderr. Exit status is 0 on success, 2 for usage and configuration
//! errors, 1 for runtime failures.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rapnet_core::data::Subset;
use serde_json::{json, Value};

use crate::commands::PostprocessInputs;
use crate::config::PipelineConfig;

/// A problem with the invocation or its configuration rather than with the
/// data; reported with exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rapnet", version, about = "Temporal action proposal pipeline", arg_required_else_help = true)]
struct Cli {
    /// Pipeline configuration file (JSON). Flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread count; 1 runs everything serially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus: annotations, feature files and oracle actionness.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_videos: Option<usize>,
    },
    /// Cluster training-set instance widths into anchor widths per pyramid level.
    ClusterAnchors {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the network (and the PEM when enabled) and write a checkpoint.
    Train {
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Anchor file from `cluster-anchors`; clustered on the fly when absent.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode raw proposals and predicted actionness for every feature file.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PEM re-ranking, soft-NMS and TAG boundary snapping.
    Postprocess(PostprocessArgs),
    /// Fuse several proposal files into one.
    Ensemble {
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        nms_sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score proposals against ground truth: AR@AN, AUC, curve files.
    Eval {
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `training`, `validation`, `testing` or `all`.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Run every stage in order under the configured work directory.
    Pipeline,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long)]
    actionness: Option<PathBuf>,
    /// Checkpoint holding the trained PEM.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, overrides_with = "no_pem")]
    pem: bool,
    #[arg(long)]
    no_pem: bool,
    /// Score proposals by their true IoU against this annotation file.
    #[arg(long, value_name = "GT")]
    oracle_pem: Option<PathBuf>,
    #[arg(long, overrides_with = "no_tag")]
    tag: bool,
    #[arg(long)]
    no_tag: bool,
    #[arg(long)]
    nms_sigma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn switch(on: bool, off: bool, current: bool) -> bool {
    if on {
        true
    } else if off {
        false
    } else {
        current
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::ClusterAnchors { .. } => "cluster-anchors",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Postprocess(_) => "postprocess",
            Command::Ensemble { .. } => "ensemble",
            Command::Eval { .. } => "eval",
            Command::Pipeline => "pipeline",
        }
    }
}

fn parse_subset(s: &str) -> anyhow::Result<Option<Subset>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| UsageError(format!("unknown subset {s:?}")).into())
}

fn dispatch(command: Command, mut cfg: PipelineConfig) -> anyhow::Result<Value> {
    let layout = cfg.layout();
    match command {
        Command::GenData { out, seed, num_videos } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(n) = num_videos {
                cfg.data.num_videos = n;
            }
            cfg.validate()?;
            commands::gen_data(&cfg, &out.unwrap_or_else(|| layout.data_dir()))
        }
        Command::ClusterAnchors { k, levels, annotations, seed, out } => {
            cfg.anchors.k = k.unwrap_or(cfg.anchors.k);
            cfg.model.levels = levels.unwrap_or(cfg.model.levels);
            cfg.anchors.seed = seed.unwrap_or(cfg.anchors.seed);
            if cfg.model.levels > 0 && cfg.anchors.k % cfg.model.levels == 0 {
                cfg.model.anchors_per_level = cfg.anchors.k / cfg.model.levels;
            }
            cfg.validate()?;
            commands::cluster_anchors(
                &cfg,
                &annotations.unwrap_or_else(|| layout.annotations()),
                &out.unwrap_or_else(|| layout.anchors()),
            )
        }
        Command::Train { annotations, features, anchors, epochs, out } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.validate()?;
            let anchors = anchors.or_else(|| Some(layout.anchors()).filter(|p| p.exists()));
            commands::train(
                &cfg,
                &annotations.unwrap_or_else(|| layout.annotations()),
                &features.unwrap_or_else(|| layout.features()),
                anchors.as_deref(),
                &out.unwrap_or_else(|| layout.model_dir()),
            )
        }
        Command::Infer { checkpoint, features, out } => {
            cfg.validate()?;
            commands::infer(
                &cfg,
                &checkpoint.unwrap_or_else(|| layout.checkpoint()),
                &features.unwrap_or_else(|| layout.features()),
                &out.unwrap_or_else(|| layout.infer_dir()),
            )
        }
        Command::Postprocess(a) => {
            cfg.postprocess.pem = switch(a.pem || a.oracle_pem.is_some(), a.no_pem, cfg.postprocess.pem);
            cfg.postprocess.tag = switch(a.tag, a.no_tag, cfg.postprocess.tag);
            cfg.nms.sigma = a.nms_sigma.unwrap_or(cfg.nms.sigma);
            cfg.validate()?;
            let inputs = PostprocessInputs {
                proposals: &a.proposals.unwrap_or_else(|| layout.raw_proposals()),
                actionness: &a.actionness.unwrap_or_else(|| layout.actionness()),
                checkpoint: &a.checkpoint.unwrap_or_else(|| layout.checkpoint()),
                oracle_gt: a.oracle_pem.as_deref().filter(|_| !a.no_pem),
                out: &a.out.unwrap_or_else(|| layout.proposals()),
            };
            commands::postprocess(&cfg, &inputs)
        }
        Command::Ensemble { inputs, nms_sigma, out } => {
            cfg.nms.sigma = nms_sigma.unwrap_or(cfg.nms.sigma);
            cfg.validate()?;
            commands::ensemble(&cfg, &inputs, &out)
        }
        Command::Eval { gt, proposals, out, subset } => {
            if let Some(s) = subset {
                cfg.eval_subset = parse_subset(&s)?;
            }
            cfg.validate()?;
            commands::eval(
                &cfg,
                &gt.unwrap_or_else(|| layout.annotations()),
                &proposals.unwrap_or_else(|| layout.proposals()),
                &out.unwrap_or_else(|| layout.eval_dir()),
            )
        }
        Command::Pipeline => {
            cfg.validate()?;
            commands::pipeline(&cfg)
        }
    }
}

/// Exit status for a failed command: configuration and invocation
/// problems are usage errors, everything else is a runtime failure.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || matches!(cause.downcast_ref(), Some(rapnet_core::Error::Config(_))) {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

/// The error chain on one line, skipping causes already spelled out by
/// the message above them.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    // a second call in the same process keeps the first logger
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn execute(cli: Cli) -> anyhow::Result<Value> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let command = cli.command;
    match cli.threads {
        Some(0) => Err(UsageError("--threads must be at least 1".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(command, cfg))
        }
        None => dispatch(command, cfg),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    let name = cli.command.name();
    let (summary, code) = match execute(cli) {
        Ok(mut summary) => {
            summary["command"] = json!(name);
            summary["status"] = json!("ok");
            (summary, 0)
        }
        Err(e) => {
            let code = exit_code(&e);
            let message = describe(&e);
            log::error!("{name}: {message}");
            (json!({ "command": name, "status": "error", "exit_code": code, "error": message }), code)
        }
    };
    println!("{summary}");
    code
}
