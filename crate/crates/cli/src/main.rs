//! `wmseg`: generate, attack, test and segment watermarked token sequences.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wmseg::dependence::DEFAULT_GAMMA;
use wmseg::experiment::{DEFAULT_BETA, DEFAULT_VOCAB};
use wmseg::{MeasureKind, Scheme};

#[derive(Parser, Debug, Serialize)]
#[command(name = "wmseg", version, about, args_override_self = true)]
pub struct Cli {
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed; every random draw is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Use 99 replicates instead of 999 unless set explicitly.
    #[arg(long, global = true)]
    pub quick: bool,

    /// Window size from the key length: the largest even B <= 3 n^(1/3).
    #[arg(long, global = true)]
    pub auto_window: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Create a random Markov token model.
    Model(ModelArgs),
    /// Draw a watermark key sequence.
    Keys(KeysArgs),
    /// Generate watermarked text from a model and keys.
    Generate(GenerateArgs),
    /// Edit a text, or build one of the benchmark settings.
    Attack(AttackArgs),
    /// Sliding-window p-values of a text against its keys.
    Pvalues(PvaluesArgs),
    /// Segment a p-value sequence into watermarked and plain runs.
    Segment(SegmentArgs),
    /// Rand index between detected and true change points.
    Evaluate(EvaluateArgs),
    /// Run the benchmark pipeline over many seeds.
    Experiment(ExperimentArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Model(_) => "model",
            Self::Keys(_) => "keys",
            Self::Generate(_) => "generate",
            Self::Attack(_) => "attack",
            Self::Pvalues(_) => "pvalues",
            Self::Segment(_) => "segment",
            Self::Evaluate(_) => "evaluate",
            Self::Experiment(_) => "experiment",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Its,
    Ems,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Its => Scheme::Its,
            SchemeArg::Ems => Scheme::Ems,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureArg {
    Its,
    Itsl,
    Ems,
    Emsl,
}

impl From<MeasureArg> for MeasureKind {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Its => MeasureKind::Its,
            MeasureArg::Itsl => MeasureKind::Itsl,
            MeasureArg::Ems => MeasureKind::Ems,
            MeasureArg::Emsl => MeasureKind::Emsl,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = DEFAULT_VOCAB)]
    pub vocab: usize,
    /// Dirichlet concentration of each transition row.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct KeysArgs {
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Number of keys.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB)]
    pub vocab: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    /// Plain prompt tokens sampled before generation starts.
    #[arg(long, default_value_t = wmseg::attacks::DEFAULT_PROMPT_LEN)]
    pub prompt_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AttackArgs {
    /// Build benchmark setting 1 to 4 instead of editing a text.
    #[arg(long, conflicts_with_all = ["text", "insert", "substitute", "delete"])]
    pub setting: Option<u32>,
    #[arg(long, required = true)]
    pub model: PathBuf,
    /// Watermark scheme of a constructed setting.
    #[arg(long, value_enum, default_value_t = SchemeArg::Ems)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = wmseg::attacks::DEFAULT_PROMPT_LEN)]
    pub prompt_len: usize,
    /// Text to edit.
    #[arg(long, required_unless_present = "setting")]
    pub text: Option<PathBuf>,
    /// Insert plain tokens before this position.
    #[arg(long, value_name = "POS", requires = "count")]
    pub insert: Option<usize>,
    /// Number of tokens to insert.
    #[arg(long)]
    pub count: Option<usize>,
    /// Replace positions LO-HI with plain tokens.
    #[arg(long, value_name = "LO-HI", value_parser = parse_range)]
    pub substitute: Option<(usize, usize)>,
    /// Remove positions LO-HI.
    #[arg(long, value_name = "LO-HI", value_parser = parse_range)]
    pub delete: Option<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where a constructed setting writes its keys.
    #[arg(long, requires = "setting")]
    pub keys_out: Option<PathBuf>,
    /// Where a constructed setting writes its ground truth.
    #[arg(long, requires = "setting")]
    pub truth_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PvaluesArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long, value_enum, default_value_t = MeasureArg::Ems)]
    pub measure: MeasureArg,
    /// Indel penalty of the Levenshtein measures.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentArgs {
    /// CSV with header `index,p`.
    #[arg(long)]
    pub pvalues: PathBuf,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_DECAY)]
    pub decay: f64,
    /// Bootstrap block length.
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_BLOCK)]
    pub block: usize,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_BOOT_REPLICATES)]
    pub boot_replicates: usize,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_MIN_LEN)]
    pub min_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Detected change points as a JSON list.
    #[arg(long, required_unless_present = "segmentation", conflicts_with = "segmentation")]
    pub detected: Option<String>,
    /// Segmentation report written by `segment`.
    #[arg(long)]
    pub segmentation: Option<PathBuf>,
    /// True change points as a JSON list.
    #[arg(long, required_unless_present = "truth_file", conflicts_with = "truth_file")]
    pub truth: Option<String>,
    /// Ground truth written by `attack --setting`.
    #[arg(long)]
    pub truth_file: Option<PathBuf>,
    /// Sequence length; taken from the truth file when omitted.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ExperimentArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
    pub setting: u32,
    #[arg(long, value_enum, default_value_t = MeasureArg::Ems)]
    pub measure: MeasureArg,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Number of seeds, starting from `--seed`.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB)]
    pub vocab: usize,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, default_value_t = wmseg::attacks::DEFAULT_PROMPT_LEN)]
    pub prompt_len: usize,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_DECAY)]
    pub decay: f64,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_BLOCK)]
    pub block: usize,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_BOOT_REPLICATES)]
    pub boot_replicates: usize,
    #[arg(long, default_value_t = wmseg::segmentation::DEFAULT_MIN_LEN)]
    pub min_len: usize,
    /// Distance within which a detection matches a true change point
    /// (defaults to twice the window).
    #[arg(long)]
    pub fp_tolerance: Option<usize>,
    /// Write 0 for every runtime so the CSV is reproducible.
    #[arg(long)]
    pub omit_timing: bool,
    /// Per-seed CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full report including quartiles and detected change points.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once('-').ok_or_else(|| format!("expected LO-HI, got `{s}`"))?;
    let lo = lo.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect()) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("201-300"), Ok((201, 300)));
        assert!(parse_range("201").is_err());
        assert!(parse_range("a-3").is_err());
    }
}
