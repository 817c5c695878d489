mod commands;
mod dataset;
mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use fieldcodec::field::{Dims, Order, Precision};
use fieldcodec::net::train::Optimizer;
use fieldcodec::outlier::BoundMode;

use dataset::FieldSource;

/// Error-bounded compression of 3D fields with learned enhancement.
#[derive(Debug, Parser)]
#[command(name = "fieldcodec", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the coupled synthetic dataset as raw files plus a dataset.json.
    GenSynth(GenSynthArgs),
    /// Compress a set of fields into a .nlz container.
    Compress(CompressArgs),
    /// Decode a container into raw fields.
    Reconstruct(ReconstructArgs),
    /// Compare reconstructed fields with the originals.
    Eval(EvalArgs),
    /// Rate-distortion sweep over relative bounds (CSV).
    Rdcurve(RdcurveArgs),
    /// Attribution and conflict diagnostics of a stored enhancer.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Render one slice of a raw field as a PGM image.
    SlicePgm(SlicePgmArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 3, value_names = ["D0", "D1", "D2"], default_values_t = [64, 64, 64])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    aux: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    /// Box filter half-width.
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long, default_value_t = 3)]
    passes: usize,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Where input fields come from: a dataset.json, or NAME=PATH pairs with
/// explicit dims and precision.
#[derive(Debug, Args, Clone)]
struct InputArgs {
    #[arg(long, conflicts_with = "field")]
    dataset: Option<PathBuf>,
    /// NAME=PATH of a headerless little-endian raw file (repeatable).
    #[arg(long)]
    field: Vec<String>,
    #[arg(long, num_args = 3, value_names = ["D0", "D1", "D2"])]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "row")]
    order: Order,
}

impl InputArgs {
    fn is_given(&self) -> bool {
        self.dataset.is_some() || !self.field.is_empty()
    }

    fn source(&self) -> Result<FieldSource> {
        if let Some(ds) = &self.dataset {
            return FieldSource::from_dataset(ds);
        }
        if self.field.is_empty() {
            bail!("no input: pass --dataset or at least one --field NAME=PATH");
        }
        let Some(d) = &self.dims else {
            bail!("--dims D0 D1 D2 is required with --field");
        };
        FieldSource::from_pairs(&self.field, Dims::new(d[0], d[1], d[2]), self.precision, self.order)
    }
}

#[derive(Debug, Args, Clone)]
struct PipelineArgs {
    #[arg(long = "mode", default_value = "strict")]
    mode: BoundMode,
    /// TARGET=AUX1,AUX2 (repeatable). Unlisted targets use all other fields.
    #[arg(long = "aux")]
    aux: Vec<String>,
    /// Comma-separated fields to enhance (default: all).
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long)]
    single_field: bool,
    #[arg(long)]
    no_skip: bool,
    #[arg(long)]
    direct_targets: bool,
    /// Seeds both weight initialization and batch shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value = "adam")]
    optimizer: Optimizer,
    /// Slicing axis for the 2D enhancer.
    #[arg(long, default_value_t = 0)]
    axis: usize,
    /// Split fields into slabs of this many planes along axis 0.
    #[arg(long)]
    block_size: Option<usize>,
    /// Outlier threshold in units of the absolute bound.
    #[arg(long, default_value_t = 1.0)]
    outlier_multiplier: f64,
    /// Drop enhancers whose overhead outweighs their gain.
    #[arg(long)]
    rate_fallback: bool,
    /// Record per-epoch PSNR and OLR in the reports.
    #[arg(long)]
    monitor: bool,
    /// Quantization radius of the baseline codec.
    #[arg(long, default_value_t = fieldcodec::codec::DEFAULT_RADIUS)]
    radius: u32,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long = "rel-eb", default_value_t = 1e-2)]
    rel_eb: f64,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Rerun with the configuration and inputs recorded in a manifest.
    #[arg(long, conflicts_with_all = ["dataset", "field"])]
    from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    container: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Originals, to add PSNR and maximum error to the report.
    #[command(flatten)]
    reference: InputArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    original: InputArgs,
    /// NAME=PATH of a reconstructed field (repeatable).
    #[arg(long, required = true)]
    reconstructed: Vec<String>,
    /// Container, for bounds, outlier rate and bit rate.
    #[arg(long)]
    container: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RdcurveArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    target: String,
    /// Relative bounds, strictly descending.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 5e-3, 1e-3])]
    bounds: Vec<f64>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Add rows for the external compressor named by FIELDCODEC_EXT_COMPRESS
    /// and FIELDCODEC_EXT_DECOMPRESS.
    #[arg(long)]
    external: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Integrated-gradients attribution of one output pixel.
    Ig(IgArgs),
    /// Sample and gradient conflict matrices over the slices of a block.
    Conflicts(ConflictArgs),
}

#[derive(Debug, Args)]
struct IgArgs {
    container: PathBuf,
    /// Enhanced field to analyze.
    #[arg(long)]
    target: String,
    /// Slice of the enhanced block to attribute.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    #[arg(long)]
    y: usize,
    #[arg(long)]
    x: usize,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    /// Constant baseline in normalized units. 0.5 is the net's neutral input.
    #[arg(long, default_value_t = fieldcodec::net::INPUT_CENTER)]
    baseline: f64,
    /// Output files are PREFIX.csv and PREFIX_c{k}.pgm.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Args)]
struct ConflictArgs {
    container: PathBuf,
    /// Originals, needed for residuals and gradients.
    #[command(flatten)]
    original: InputArgs,
    /// Enhanced field to analyze.
    #[arg(long)]
    target: String,
    /// Use only the first N slices.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = fieldcodec::analysis::SAMPLE_HI)]
    hi: f64,
    #[arg(long, default_value_t = fieldcodec::analysis::SAMPLE_LO)]
    lo: f64,
    /// Gradient pairs with cosine below this conflict.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    threshold: f64,
    /// Outputs PREFIX_samples.{csv,pgm} and PREFIX_gradients.{csv,pgm}.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Args)]
struct SlicePgmArgs {
    input: PathBuf,
    #[arg(long, num_args = 3, value_names = ["D0", "D1", "D2"], required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "row")]
    order: Order,
    #[arg(long, default_value_t = 0)]
    axis: usize,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Log-scale the intensities.
    #[arg(long)]
    log: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let jobs = if cli.deterministic { 1 } else { cli.jobs.unwrap_or(0) };
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let ctx = commands::RunContext { deterministic: cli.deterministic, jobs: rayon::current_num_threads() };
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Compress(a) => commands::compress(a, &ctx),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rdcurve(a) => commands::rdcurve(a, &ctx),
        Command::Analyze(AnalyzeCommand::Ig(a)) => commands::analyze_ig(a),
        Command::Analyze(AnalyzeCommand::Conflicts(a)) => commands::analyze_conflicts(a),
        Command::SlicePgm(a) => commands::slice_pgm(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
