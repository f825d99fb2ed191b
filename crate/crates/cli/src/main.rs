// SPDX-License-Identifier: MIT OR Apache-2.0

//! `forage-lens` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 input error, 3 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use forage_lens::config::RunConfig;
use forage_lens::contrastive::{Polarity, PromptCondition};
use forage_lens::par::Execution;
use forage_lens::probe::NllMode;
use forage_lens::seqstats::CellSelection;

#[derive(Debug, Parser)]
#[command(name = "forage-lens", version, about = "Semantic foraging analysis of animal fluency sequences")]
struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run single-threaded even when built with the `parallel` feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate, truncate and switch-label raw sequences.
    Label(LabelArgs),
    /// Transition matrices, correlations and switch-ratio tests.
    Stats(StatsArgs),
    /// Logit-lens curves, switch alignment and late-layer summaries.
    Lens(LensArgs),
    /// Layer-wise linear probes on residual dumps.
    Probe(ProbeArgs),
    /// Build contrastive prompt datasets from human sequences.
    Contrastive(ContrastiveArgs),
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Category norms CSV (`category,animal`).
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Raw sequences JSONL.
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    truncate_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cells {
    Union,
    Intersection,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Labeled sequences JSONL.
    #[arg(long)]
    sequences: Option<PathBuf>,
    /// Which matrix rows enter the human-model correlation.
    #[arg(long, value_enum, default_value = "union")]
    cells: Cells,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NllArg {
    Full,
    ActualOnly,
}

#[derive(Debug, Args)]
struct LensArgs {
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Labeled sequences JSONL the manifest events refer to.
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// FLNS dump with `resid.{event}.{layer}` tensors.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// FLNS file with the head tensors; defaults to the dump itself.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Alignment window as `LO,HI`, e.g. `-3,2`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_window)]
    window: Option<(i32, i32)>,
    #[arg(long)]
    layer_threshold: Option<usize>,
    #[arg(long)]
    resamples: Option<u64>,
    /// Also write layer curves z-scored across layers.
    #[arg(long)]
    zscore_layers: bool,
    #[arg(long, value_enum, default_value = "full")]
    nll_mode: NllArg,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Probe input as `MODEL_TAG:CONDITION:MANIFEST:DUMP`; repeatable.
    #[arg(long = "input", value_parser = parse_probe_input)]
    inputs: Vec<ProbeInput>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Clone)]
struct ProbeInput {
    model_tag: String,
    condition: PromptCondition,
    manifest: PathBuf,
    dump: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolarityArg {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConditionArg {
    Neutral,
    Convergent,
    Divergent,
}

#[derive(Debug, Args)]
struct ContrastiveArgs {
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Labeled sequences JSONL; only human sequences are used.
    #[arg(long)]
    sequences: Option<PathBuf>,
    /// Text embeddings, one `word v1 .. vd` entry per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    conditions: Vec<ConditionArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    polarities: Vec<PolarityArg>,
}

fn parse_window(s: &str) -> Result<(i32, i32), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let lo = lo.trim().parse().map_err(|e| format!("bad window start: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad window end: {e}"))?;
    Ok((lo, hi))
}

fn parse_probe_input(s: &str) -> Result<ProbeInput, String> {
    let parts: Vec<&str> = s.splitn(4, ':').collect();
    let [tag, cond, manifest, dump] = parts[..] else {
        return Err(format!("expected MODEL_TAG:CONDITION:MANIFEST:DUMP, got {s:?}"));
    };
    Ok(ProbeInput {
        model_tag: tag.to_string(),
        condition: cond.parse().map_err(|e| format!("{e}"))?,
        manifest: manifest.into(),
        dump: dump.into(),
    })
}

/// A failed run, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Input(e) => write!(f, "input error: {e:#}"),
            Failure::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

/// Tag a fallible result as an input or internal failure.
pub trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

/// Settings shared by every subcommand after merging config and flags.
pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub exec: Execution,
}

fn build_context(cli: &Cli) -> Result<Context, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).input()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("forage-lens-out"));
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    Ok(Context {
        config,
        out_dir,
        exec,
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut ctx = build_context(&cli)?;
    let cfg = &mut ctx.config;
    match cli.command {
        Command::Label(a) => {
            set_path(&mut cfg.norms, &a.norms);
            set_path(&mut cfg.sequences, &a.sequences);
            set(&mut cfg.truncate_len, a.truncate_len);
            cfg.validate().input()?;
            commands::label(&ctx)
        }
        Command::Stats(a) => {
            set_path(&mut cfg.norms, &a.norms);
            set_path(&mut cfg.sequences, &a.sequences);
            let cells = match a.cells {
                Cells::Union => CellSelection::Union,
                Cells::Intersection => CellSelection::Intersection,
            };
            commands::stats(&ctx, cells)
        }
        Command::Lens(a) => {
            set_path(&mut cfg.norms, &a.norms);
            set_path(&mut cfg.sequences, &a.sequences);
            set_path(&mut cfg.manifest, &a.manifest);
            set_path(&mut cfg.dump, &a.dump);
            set_path(&mut cfg.head, &a.head);
            set(&mut cfg.window, a.window);
            set(&mut cfg.layer_threshold, a.layer_threshold);
            set(&mut cfg.resamples, a.resamples);
            cfg.validate().input()?;
            let mode = match a.nll_mode {
                NllArg::Full => NllMode::Full,
                NllArg::ActualOnly => NllMode::ActualOnly,
            };
            commands::lens(&ctx, a.zscore_layers, mode)
        }
        Command::Probe(a) => {
            set(&mut cfg.top_k, a.top_k);
            set(&mut cfg.split.repeats, a.repeats);
            cfg.validate().input()?;
            let inputs: Vec<ProbeInput> = if a.inputs.is_empty() {
                match (&cfg.manifest, &cfg.dump) {
                    (Some(m), Some(d)) => vec![ProbeInput {
                        model_tag: String::new(),
                        condition: PromptCondition::Neutral,
                        manifest: m.clone(),
                        dump: d.clone(),
                    }],
                    _ => {
                        return Err(Failure::Usage(
                            "probe needs --input MODEL_TAG:CONDITION:MANIFEST:DUMP or manifest and dump in the config".into(),
                        ))
                    }
                }
            } else {
                a.inputs
            };
            commands::probe(&ctx, &inputs)
        }
        Command::Contrastive(a) => {
            set_path(&mut cfg.norms, &a.norms);
            set_path(&mut cfg.sequences, &a.sequences);
            set_path(&mut cfg.embeddings, &a.embeddings);
            let conditions = if a.conditions.is_empty() {
                PromptCondition::ALL.to_vec()
            } else {
                a.conditions
                    .iter()
                    .map(|c| match c {
                        ConditionArg::Neutral => PromptCondition::Neutral,
                        ConditionArg::Convergent => PromptCondition::Convergent,
                        ConditionArg::Divergent => PromptCondition::Divergent,
                    })
                    .collect()
            };
            let polarities = if a.polarities.is_empty() {
                vec![Polarity::Max, Polarity::Min]
            } else {
                a.polarities
                    .iter()
                    .map(|p| match p {
                        PolarityArg::Max => Polarity::Max,
                        PolarityArg::Min => Polarity::Min,
                    })
                    .collect()
            };
            commands::contrastive(&ctx, conditions, polarities)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("forage-lens: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
