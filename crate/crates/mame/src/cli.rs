//! Argument parsing and dispatch for the `mame` binary.
//!
//! Exit status: 0 on success, 2 on usage errors (reported before any file is
//! touched), 1 on data or state errors. Every subcommand prints a one-line
//! summary to standard error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use mame_core::merge::{CountMode, MetricSource};
use mame_core::transformer::{BlockConfig, BlockMode, Stack};
use mame_core::{
    gen_synthetic, make_plan, FusionRule, PartitionStyle, Pattern, SimilarityConfig,
    SimilarityFunction,
};

use crate::tokenio::{
    read_fusion_state, read_tokens_with_dtype, write_fusion_state, write_tokens, DType,
};
use crate::{analyze, bench, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mame",
    version,
    about = "Matrix-based token merging and restoration"
)]
pub struct Cli {
    /// Seed for generators, random partitions and block weights.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Storage precision of written token files [default: the input's, f64 for gen].
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<DType>,
    /// Numerical stabilizer [default: 1e-12 for f64 output, 1e-6 for f32].
    #[arg(long, global = true, value_parser = positive_f64)]
    pub epsilon: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic token file.
    Gen(GenArgs),
    /// Merge a token file and write the reduced tokens plus the fusion state.
    Merge(MergeArgs),
    /// Restore a merged token file to full length.
    Restore(RestoreArgs),
    /// Run a toy transformer stack with merging at selected layers.
    Block(BlockArgs),
    /// Sweep the analytic cost model and check its constants.
    Analyze(AnalyzeArgs),
    /// Time merging against the attention it saves.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long = "B", value_name = "B", value_parser = positive_usize)]
    pub batch: usize,
    #[arg(long = "L", value_name = "L", value_parser = positive_usize)]
    pub length: usize,
    #[arg(long = "d", value_name = "D", value_parser = positive_usize)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub l_spec: usize,
    /// `gaussian` or `clustered:K:NOISE`.
    #[arg(long, default_value = "gaussian", value_parser = parse_pattern)]
    pub pattern: Pattern,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimArg {
    Cosine,
    Euclidean,
    Dot,
    Softmax,
}

impl From<SimArg> for SimilarityFunction {
    fn from(s: SimArg) -> Self {
        match s {
            SimArg::Cosine => SimilarityFunction::Cosine,
            SimArg::Euclidean => SimilarityFunction::Euclidean,
            SimArg::Dot => SimilarityFunction::Dot,
            SimArg::Softmax => SimilarityFunction::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Alternating,
    Sequential,
    Random,
    Causal,
}

impl From<PartitionArg> for PartitionStyle {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Alternating => PartitionStyle::Alternating,
            PartitionArg::Sequential => PartitionStyle::Sequential,
            PartitionArg::Random => PartitionStyle::Random,
            PartitionArg::Causal => PartitionStyle::Causal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CountArg {
    Indicator,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Renormalized,
    Unpruned,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.8, value_parser = finite_f64)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = SimArg::Cosine)]
    pub sim: SimArg,
    #[arg(long, value_enum, default_value_t = PartitionArg::Alternating)]
    pub partition: PartitionArg,
    /// Source fraction for the sequential and random partitions.
    #[arg(long, default_value_t = 0.5, value_parser = finite_f64)]
    pub ratio_src: f64,
    /// Skip adaptive refining; use column-normalized weights directly.
    #[arg(long)]
    pub no_refine: bool,
    /// Forbid sources from merging into earlier destinations (needs `--partition causal`).
    #[arg(long)]
    pub causal: bool,
    #[arg(long, value_enum, default_value_t = CountArg::Indicator, hide = true)]
    pub count: CountArg,
    #[arg(long, value_enum, default_value_t = FusionArg::Renormalized, hide = true)]
    pub fusion: FusionArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub state: PathBuf,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Perception,
    Synthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Hidden,
    Keys,
    KeysHeadMean,
}

#[derive(Debug, Args)]
pub struct BlockArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Perception)]
    pub mode: ModeArg,
    /// 1-based block numbers that merge.
    #[arg(long, value_delimiter = ',', default_value = "3,6,9", value_parser = positive_usize)]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 12, value_parser = positive_usize)]
    pub depth: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.5, value_parser = finite_f64)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Keys)]
    pub metric: MetricArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Monte Carlo samples for the condition probability.
    #[arg(long, default_value_t = 1_000_000, value_parser = positive_usize)]
    pub samples: usize,
    /// Simpson grid intervals for the condition integral.
    #[arg(long, default_value_t = 10_000, value_parser = parse_grid)]
    pub grid: usize,
    /// Grid steps per axis of the (alpha, beta) sweep.
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    pub steps: usize,
    /// Sequence length used for the FLOP columns.
    #[arg(long = "L", value_name = "L", default_value_t = 197, value_parser = positive_usize)]
    pub length: usize,
    /// Embedding dimension used for the FLOP columns.
    #[arg(long = "d", value_name = "D", default_value_t = 768, value_parser = positive_usize)]
    pub dim: usize,
    /// CSV destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "L-list", value_name = "L,...", value_delimiter = ',', default_value = "256,1024,4096", value_parser = positive_usize)]
    pub lengths: Vec<usize>,
    #[arg(long = "d", value_name = "D", default_value_t = 64, value_parser = positive_usize)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.8", value_parser = finite_f64)]
    pub tau_list: Vec<f64>,
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub repeat: usize,
    #[arg(long, default_value = "clustered:5:0.05", value_parser = parse_pattern)]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 1)]
    pub l_spec: usize,
    /// CSV destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_grid(s: &str) -> std::result::Result<usize, String> {
    let v = s.parse::<usize>().map_err(|e| e.to_string())?;
    if v < 2 {
        return Err("must be at least 2".into());
    }
    Ok(v)
}

fn finite_f64(s: &str) -> std::result::Result<f64, String> {
    let v = s.parse::<f64>().map_err(|e| e.to_string())?;
    if !v.is_finite() {
        return Err("must be finite".into());
    }
    Ok(v)
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v = finite_f64(s)?;
    if v <= 0.0 {
        return Err("must be > 0".into());
    }
    Ok(v)
}

/// Parses `gaussian` or `clustered:K:NOISE`.
pub fn parse_pattern(s: &str) -> std::result::Result<Pattern, String> {
    if s == "gaussian" {
        return Ok(Pattern::Gaussian);
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["clustered", k, noise] => {
            let k = positive_usize(k).map_err(|e| format!("cluster count: {e}"))?;
            let noise_scale = finite_f64(noise).map_err(|e| format!("noise: {e}"))?;
            if noise_scale < 0.0 {
                return Err("noise must be >= 0".into());
            }
            Ok(Pattern::Clustered { k, noise_scale })
        }
        _ => Err(format!("expected gaussian or clustered:K:NOISE, got {s:?}")),
    }
}

/// Usage errors clap cannot express on its own; checked before any I/O.
fn check_usage(cli: &Cli) -> std::result::Result<(), clap::Error> {
    let mut cmd = Cli::command();
    match &cli.command {
        Command::Gen(g) => {
            if g.l_spec >= g.length {
                return Err(cmd.error(
                    ErrorKind::ValueValidation,
                    "--l-spec must be smaller than --L",
                ));
            }
            if let Pattern::Clustered { k, .. } = g.pattern {
                if k > g.length {
                    return Err(cmd.error(
                        ErrorKind::ValueValidation,
                        "--pattern cluster count exceeds --L",
                    ));
                }
            }
        }
        Command::Merge(m) => {
            if m.causal && m.partition != PartitionArg::Causal {
                return Err(cmd.error(
                    ErrorKind::ArgumentConflict,
                    "--causal requires --partition causal",
                ));
            }
            if matches!(m.partition, PartitionArg::Sequential | PartitionArg::Random)
                && !(m.ratio_src > 0.0 && m.ratio_src < 1.0)
            {
                return Err(cmd.error(ErrorKind::ValueValidation, "--ratio-src must lie in (0, 1)"));
            }
        }
        Command::Block(b) => {
            if let Some(bad) = b.layers.iter().find(|&&l| l > b.depth) {
                return Err(cmd.error(
                    ErrorKind::ValueValidation,
                    format!("--layers entry {bad} exceeds --depth {}", b.depth),
                ));
            }
        }
        Command::Bench(b) => {
            if let Some(&l) = b.lengths.iter().find(|&&l| l < b.l_spec + 2) {
                return Err(cmd.error(
                    ErrorKind::ValueValidation,
                    format!("--L-list entry {l} leaves nothing to merge"),
                ));
            }
            if let Pattern::Clustered { k, .. } = b.pattern {
                if b.lengths.iter().any(|&l| k > l) {
                    return Err(cmd.error(
                        ErrorKind::ValueValidation,
                        "--pattern cluster count exceeds an --L-list entry",
                    ));
                }
            }
        }
        Command::Restore(_) | Command::Analyze(_) => {}
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = check_usage(&cli) {
        let _ = e.print();
        return e.exit_code();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mame: error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let summary = match &cli.command {
        Command::Gen(a) => gen(cli, a)?,
        Command::Merge(a) => merge(cli, a)?,
        Command::Restore(a) => restore(cli, a)?,
        Command::Block(a) => block(cli, a)?,
        Command::Analyze(a) => run_analyze(cli, a)?,
        Command::Bench(a) => run_bench(cli, a)?,
    };
    eprintln!("{summary} in {:.3} ms", start.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

fn epsilon(cli: &Cli, dtype: DType) -> f64 {
    cli.epsilon.unwrap_or_else(|| dtype.default_epsilon())
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<String> {
    let t = gen_synthetic(a.batch, a.length, a.dim, a.l_spec, cli.seed, a.pattern)?;
    write_tokens(&t, &a.out, cli.dtype.unwrap_or(DType::F64))?;
    Ok(format!(
        "gen: B={} L {} -> {} (preserved {}), d={}",
        a.batch, a.length, a.length, a.length, a.dim
    ))
}

fn merge(cli: &Cli, a: &MergeArgs) -> Result<String> {
    let (t, file_dtype) = read_tokens_with_dtype(&a.input)?;
    let dtype = cli.dtype.unwrap_or(file_dtype);
    let cfg = SimilarityConfig {
        function: a.sim.into(),
        tau: a.tau,
        epsilon: epsilon(cli, dtype),
        refine: !a.no_refine,
        causal: a.causal,
        metric_source: MetricSource::Hidden,
        count_mode: match a.count {
            CountArg::Indicator => CountMode::Indicator,
            CountArg::Soft => CountMode::Soft,
        },
        fusion_rule: match a.fusion {
            FusionArg::Renormalized => FusionRule::Renormalized,
            FusionArg::Unpruned => FusionRule::UnprunedOverPrunedSum,
        },
    };
    let plan = make_plan(
        t.length(),
        t.l_spec(),
        a.partition.into(),
        a.ratio_src,
        cli.seed,
    )
    .map_err(|e| in_file(&a.input, e))?;
    let merged = mame_core::mame(&t, &plan, &cfg)?;
    write_tokens(&merged.tokens, &a.out, dtype)?;
    write_fusion_state(&merged.state, &a.state)?;
    Ok(format!(
        "merge: L {} -> {} (preserved {})",
        t.length(),
        merged.reduced_length(),
        merged.state.preserved_count()
    ))
}

fn restore(cli: &Cli, a: &RestoreArgs) -> Result<String> {
    let (t, file_dtype) = read_tokens_with_dtype(&a.input)?;
    let state = read_fusion_state(&a.state)?;
    let full = mame_core::restore(&t, &state).map_err(|e| in_file(&a.state, e))?;
    write_tokens(&full, &a.out, cli.dtype.unwrap_or(file_dtype))?;
    Ok(format!(
        "restore: L {} -> {} (preserved {})",
        t.length(),
        full.length(),
        state.preserved_count()
    ))
}

fn block(cli: &Cli, a: &BlockArgs) -> Result<String> {
    let (t, file_dtype) = read_tokens_with_dtype(&a.input)?;
    let dtype = cli.dtype.unwrap_or(file_dtype);
    if t.dim() % a.heads != 0 {
        return Err(in_file(
            &a.input,
            mame_core::Error::Parameter(format!(
                "--heads {} does not divide d={}",
                a.heads,
                t.dim()
            )),
        ));
    }
    let mut cfg = BlockConfig::new(t.dim(), a.heads);
    cfg.seed = cli.seed;
    cfg.plan_seed = cli.seed;
    cfg.mode = match a.mode {
        ModeArg::Perception => BlockMode::Perception,
        ModeArg::Synthesis => BlockMode::Synthesis,
    };
    cfg.merge.tau = a.tau;
    cfg.merge.epsilon = epsilon(cli, dtype);
    cfg.merge.metric_source = match a.metric {
        MetricArg::Hidden => MetricSource::Hidden,
        MetricArg::Keys => MetricSource::Keys,
        MetricArg::KeysHeadMean => MetricSource::KeysHeadMean,
    };
    let out = Stack::new(a.depth, cfg)?.run(&t, &a.layers)?;
    write_tokens(&out.tokens, &a.out, dtype)?;
    let lengths: Vec<String> = out.lengths.iter().map(|l| l.to_string()).collect();
    Ok(format!(
        "block: L {} -> {} (preserved n/a), lengths per block [{}]",
        t.length(),
        out.tokens.length(),
        lengths.join(",")
    ))
}

fn csv_sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| {
            Error::Write {
                path: p.clone(),
                source,
            }
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<String> {
    let rows = analyze::sweep(a.steps, a.length, a.dim)?;
    analyze::write_csv(&rows, csv_sink(&a.out)?)?;
    let c = analyze::constants(a.samples, a.grid, cli.seed)?;
    eprintln!(
        "condition integral {:.9} (closed form {:.9}, |diff| {:.2e})",
        c.integral,
        c.integral_closed_form,
        (c.integral - c.integral_closed_form).abs()
    );
    eprintln!(
        "condition probability {:.6} over {} samples (closed form {:.6})",
        c.probability, a.samples, c.probability_closed_form
    );
    let efficient = rows.iter().filter(|r| r.efficient).count();
    Ok(format!(
        "analyze: L {} -> sweep of {} points ({} efficient)",
        a.length,
        rows.len(),
        efficient
    ))
}

fn run_bench(cli: &Cli, a: &BenchArgs) -> Result<String> {
    let cfg = bench::BenchConfig {
        lengths: a.lengths.clone(),
        dim: a.dim,
        taus: a.tau_list.clone(),
        repeat: a.repeat,
        pattern: a.pattern,
        l_spec: a.l_spec,
        seed: cli.seed,
        epsilon: epsilon(cli, cli.dtype.unwrap_or(DType::F64)),
    };
    let cells = bench::run_bench(&cfg)?;
    for cell in &cells {
        eprintln!("{}", bench::describe_model(cell));
    }
    bench::write_csv(&cells, csv_sink(&a.out)?)?;
    let parts: Vec<String> = cells
        .iter()
        .map(|c| {
            format!(
                "{} -> {} @tau={}",
                c.model.length, c.rows[0].reduced, c.rows[0].tau
            )
        })
        .collect();
    Ok(format!("bench: L {} (preserved n/a)", parts.join(", ")))
}

fn in_file(path: &Path, source: mame_core::Error) -> Error {
    Error::State {
        path: path.into(),
        source,
    }
}
