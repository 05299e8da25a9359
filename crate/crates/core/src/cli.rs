//! Command-line surface.
//!
//! Exit status: 0 on success, [`EXIT_RUNTIME`] when a command fails while
//! running, [`EXIT_USAGE`] for unknown flags, bad flag values and missing
//! input files.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    classify_mask, eval_perplexity, model_stats, render_report, DEFAULT_BYTES_PER_PARAM,
};
use crate::calib::{read_tokens, CalibrationSet};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::{LayerMask, Model, ModelConfig};
use crate::search::{
    brute_force_oracle, greedy_prune, mask_from_json, threads_from_env, PruneConfig, PruneTrace,
    DEFAULT_ENUMERATION_CAP, DEFAULT_WINDOW_FRACTION, DEFAULT_WINDOW_RATIO_CUTOFF,
};
use crate::toy::{gen_toy_model, gen_toy_tokens, ZeroSublayers};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "finercut",
    version,
    about = "Sublayer pruning for decoder-only transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded random toy checkpoint.
    GenToy(GenToyArgs),
    /// Generate random token sequences in the calibration text format.
    GenTokens(GenTokensArgs),
    /// Greedy sublayer pruning; writes a trace.
    Prune(PruneArgs),
    /// Exhaustive search over all masks with k sublayers dropped.
    Oracle(OracleArgs),
    /// Perplexity of a (masked) model on a token corpus.
    EvalPpl(EvalPplArgs),
    /// Parameter, MAC and memory accounting.
    Stats(StatsArgs),
    /// Render a trace as text (or its mask classification as JSON).
    Report(ReportArgs),
    /// Write a checkpoint with the masked sublayers physically removed.
    ApplyMask(ApplyMaskArgs),
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 10000.0)]
    rope_theta: f64,
    #[arg(long, default_value_t = 1e-5)]
    norm_eps: f64,
    #[arg(long)]
    tied: bool,
    /// Blocks whose attention output projection is zeroed.
    #[arg(long, value_delimiter = ',')]
    zero_attn_out: Vec<usize>,
    /// Blocks whose FFN down projection is zeroed.
    #[arg(long, value_delimiter = ',')]
    zero_ffn_down: Vec<usize>,
}

#[derive(Debug, Args)]
struct GenTokensArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    len: usize,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, value_parser = parse_metric)]
    metric: MetricKind,
    #[arg(long, default_value_t = DEFAULT_WINDOW_FRACTION)]
    window_frac: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW_RATIO_CUTOFF)]
    window_cutoff: f64,
    #[arg(long)]
    out: PathBuf,
    /// Omit per-candidate scores from the trace.
    #[arg(long)]
    no_scores: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_parser = parse_metric)]
    metric: MetricKind,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u128,
}

#[derive(Debug, Args)]
struct EvalPplArgs {
    #[arg(long)]
    model: PathBuf,
    /// Trace or mask JSON.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    context_len: usize,
    #[arg(long, default_value_t = DEFAULT_BYTES_PER_PARAM)]
    bytes_per_param: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Emit the mask classification as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ApplyMaskArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(s: &str) -> std::result::Result<MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_mask(path: Option<&Path>, n_blocks: usize) -> Result<LayerMask> {
    let Some(path) = path else {
        return Ok(LayerMask::empty(n_blocks));
    };
    let mask = mask_from_json(&read_text(path)?)?;
    if mask.n_blocks() != n_blocks {
        return Err(Error::Input(format!(
            "{}: mask covers {} blocks, model has {n_blocks}",
            path.display(),
            mask.n_blocks()
        )));
    }
    Ok(mask)
}

fn load_calib(path: &Path, model: &Model) -> Result<CalibrationSet> {
    read_tokens(path, Some(model.config().vocab_size))
}

fn to_json_line<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn execute(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    let emit = |out: &mut dyn Write, s: &str| -> CliResult<()> {
        out.write_all(s.as_bytes())
            .map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))
    };
    match cmd {
        Command::GenToy(a) => {
            if a.heads == 0 || a.d_model % a.heads != 0 {
                return Err(Failure::Usage(format!(
                    "--d-model {} is not divisible by --heads {}",
                    a.d_model, a.heads
                )));
            }
            let config = ModelConfig {
                vocab_size: a.vocab,
                d_model: a.d_model,
                n_blocks: a.blocks,
                n_heads: a.heads,
                n_kv_heads: a.kv_heads,
                head_dim: a.d_model / a.heads,
                d_ff: a.d_ff,
                rope_theta: a.rope_theta,
                norm_eps: a.norm_eps,
                tied_head: a.tied,
                removed_sublayers: Vec::new(),
            };
            let special = ZeroSublayers {
                zero_attn_out_blocks: a.zero_attn_out,
                zero_ffn_down_blocks: a.zero_ffn_down,
            };
            let model = gen_toy_model(a.seed, &config, &special)?;
            write_checkpoint(&model, &a.out)?;
            emit(out, &format!("wrote {}\n", a.out.display()))
        }
        Command::GenTokens(a) => {
            if a.vocab == 0 || a.count == 0 || a.len < 2 {
                return Err(Failure::Usage(
                    "--vocab and --count must be positive and --len at least 2".into(),
                ));
            }
            let calib = CalibrationSet::new(gen_toy_tokens(a.seed, a.vocab, a.count, a.len))?;
            write_text(&a.out, &calib.to_text())?;
            emit(out, &format!("wrote {}\n", a.out.display()))
        }
        Command::Prune(a) => {
            require_file(&a.model)?;
            require_file(&a.calib)?;
            let model = read_checkpoint(&a.model)?;
            let calib = load_calib(&a.calib, &model)?;
            let config = PruneConfig {
                target_ratio: a.ratio,
                metric: a.metric,
                window_fraction: a.window_frac,
                window_ratio_cutoff: a.window_cutoff,
                threads: threads_from_env()?,
            };
            let mut trace = greedy_prune(&model, &calib, &config)?;
            if a.no_scores {
                trace
                    .steps
                    .iter_mut()
                    .for_each(|s| s.candidate_scores = None);
            }
            write_text(&a.out, &trace.to_json()?)?;
            let last = trace.steps.last().map_or(0.0, |s| s.q_min);
            emit(
                out,
                &format!(
                    "pruned {}/{} sublayers ({}), objective {:.9e}; trace written to {}\n",
                    trace.final_mask.popcount(),
                    trace.final_mask.len(),
                    classify_mask(&trace.final_mask).notation(),
                    last,
                    a.out.display()
                ),
            )
        }
        Command::Oracle(a) => {
            require_file(&a.model)?;
            require_file(&a.calib)?;
            let model = read_checkpoint(&a.model)?;
            let calib = load_calib(&a.calib, &model)?;
            let result =
                brute_force_oracle(&model, &calib, a.k, a.metric, a.cap, threads_from_env()?)?;
            emit(out, &to_json_line(&result)?)
        }
        Command::EvalPpl(a) => {
            require_file(&a.model)?;
            require_file(&a.corpus)?;
            if let Some(m) = &a.mask {
                require_file(m)?;
            }
            let model = read_checkpoint(&a.model)?;
            let mask = load_mask(a.mask.as_deref(), model.config().n_blocks)?;
            let corpus = load_calib(&a.corpus, &model)?;
            let ppl = eval_perplexity(&model, &mask, &corpus)?;
            emit(out, &to_json_line(&ppl)?)
        }
        Command::Stats(a) => {
            require_file(&a.model)?;
            if let Some(m) = &a.mask {
                require_file(m)?;
            }
            if a.context_len == 0 {
                return Err(Failure::Usage("--context-len must be at least 1".into()));
            }
            let model = read_checkpoint(&a.model)?;
            let mask = load_mask(a.mask.as_deref(), model.config().n_blocks)?;
            let stats = model_stats(model.config(), &mask, a.context_len, a.bytes_per_param)?;
            emit(out, &to_json_line(&stats)?)
        }
        Command::Report(a) => {
            require_file(&a.trace)?;
            let trace = PruneTrace::from_json(&read_text(&a.trace)?)?;
            let report = classify_mask(&trace.final_mask);
            let text = if a.json {
                to_json_line(&report)?
            } else {
                render_report(&trace, &report)?
            };
            emit(out, &text)
        }
        Command::ApplyMask(a) => {
            require_file(&a.model)?;
            require_file(&a.mask)?;
            let model = read_checkpoint(&a.model)?;
            let mask = load_mask(Some(&a.mask), model.config().n_blocks)?;
            let reduced = model.reduce(&mask)?;
            write_checkpoint(&reduced, &a.out)?;
            emit(
                out,
                &format!(
                    "wrote {} with {} sublayers removed\n",
                    a.out.display(),
                    reduced.config().removed_sublayers.len()
                ),
            )
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("usage error");
            let _ = writeln!(err, "{line}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
