//! `fws`: synthetic data, sparse label simulation, meta-training,
//! evaluation, profiling and reports from one TOML run configuration.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fws_core::harness::{output_root, run_pipeline, sparsify_file, RunConfig, Stage, OUTPUT_ROOT_ENV};
use fws_core::sparsify::{SizeParams, SparsifyParams, Technique};

#[derive(Parser)]
#[command(name = "fws", version, about = "Few-shot weakly-supervised optic disc/cup segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for relative output paths [env: FWS_OUTPUT_ROOT].
    #[arg(long)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic fundus datasets.
    Synth(RunArgs),
    /// Sparsify one dense mask PNG.
    Sparsify(SparsifyArgs),
    /// Write the Omni schedule, the evaluation grid and sparse-label previews.
    Transform(RunArgs),
    /// Train the configured learner and save a checkpoint.
    Train(RunArgs),
    /// Evaluate the checkpoint on the test grid.
    Eval(RunArgs),
    /// Time inference and per-image prediction.
    Profile(RunArgs),
    /// Write CSV summaries and plots.
    Report(RunArgs),
    /// Run several stages in order (all by default).
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated stages.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
    },
    /// Print the resolved configuration and its fingerprint.
    Config(RunArgs),
}

#[derive(Args)]
struct SparsifyArgs {
    /// Dense mask PNG (0 background, 1 rim, 2 cup).
    #[arg(long)]
    input: PathBuf,
    /// Output sparse mask PNG (255 marks unannotated pixels).
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    technique: Technique,
    /// Point count for `points`, otherwise a fraction in (0, 1].
    #[arg(long)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with size parameters (point_size, grid_spacing, ...).
    #[arg(long)]
    sizes: Option<PathBuf>,
}

fn run_stages(args: &RunArgs, stages: &[Stage]) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides).context("loading run configuration")?;
    let root = args.output_root.clone().unwrap_or_else(output_root);
    log::info!("config fingerprint {}", cfg.fingerprint());
    let paths = run_pipeline(&cfg, stages, &root)?;
    println!("{}", paths.out.display());
    Ok(())
}

fn sparsify_cmd(a: &SparsifyArgs) -> Result<()> {
    let sizes = match &a.sizes {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SizeParams>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SizeParams::default(),
    };
    let params = SparsifyParams { technique: a.technique, density: a.density, sizes, seed: a.seed };
    if let Some(w) = sparsify_file(&a.input, &a.output, &params)? {
        log::warn!("{w}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => run_stages(a, &[Stage::Synth]),
        Command::Sparsify(a) => sparsify_cmd(a),
        Command::Transform(a) => run_stages(a, &[Stage::Transform]),
        Command::Train(a) => run_stages(a, &[Stage::Train]),
        Command::Eval(a) => run_stages(a, &[Stage::Eval]),
        Command::Profile(a) => run_stages(a, &[Stage::Profile]),
        Command::Report(a) => run_stages(a, &[Stage::Report]),
        Command::Run { args, stages } => run_stages(args, if stages.is_empty() { &Stage::ALL } else { stages }),
        Command::Config(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            println!("# config_fingerprint={}\n# {OUTPUT_ROOT_ENV}={}", cfg.fingerprint(), output_root().display());
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
