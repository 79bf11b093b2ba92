//! `catpose`: stage-by-stage driver for the category pose pipeline.
//!
//! Stages share one output directory:
//!
//! ```text
//! generate  -> manifest.json, meshes/*.off, skeletons/*.json
//! ssc       -> ssc.json
//! render    -> renders/views.json, renders/{train,test}/<instance>/vNNN.depth
//! extract   -> dataset.isas
//! train     -> forest-<mask>.isaf, growth-<mask>.csv
//! infer     -> infer-<mask>/<view>.json (or one image with --depth)
//! eval      -> eval-<mask>.json, eval-<mask>.csv
//! ```
//!
//! Exit codes: 0 ok, 1 input error, 2 internal error.

mod files;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use catpose::procgen::CategoryKind;
use catpose::{PipelineConfig, QualityMask};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "catpose", version, about = "Category-level 6D pose estimation from depth images")]
pub struct Cli {
    /// Pipeline config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed used for generation, test views and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes procedural instances and a manifest.
    Generate {
        #[arg(long, default_value = "table")]
        category: CategoryKind,
        #[arg(long, default_value_t = 6)]
        count: usize,
        /// Leading instances marked for training; the rest are unseen test instances.
        #[arg(long, default_value_t = 4)]
        train: usize,
    },
    /// Selects the semantically consistent centre from the train instances.
    Ssc {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Renders training views of train instances and test views of test instances.
    Render {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write 16-bit millimetre PNGs next to the depth files.
        #[arg(long)]
        png: bool,
    },
    /// Cuts annotated parts from the training renders.
    Extract {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Trains a forest on the extracted dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Quality terms, e.g. `q1` or `q1,q2,q3`; overrides the config.
        #[arg(long)]
        quality: Option<QualityMask>,
    },
    /// Estimates poses on one depth image or on every test render.
    Infer {
        #[arg(long)]
        forest: PathBuf,
        /// A `.depth` file; without it every test render is processed.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Hypotheses JSON for a single image; defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overlay PNG for a single image.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Scores top-1 hypotheses on the test renders.
    Eval {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Bad or missing input; reported with exit code 1.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub struct Context {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn context(cli: &Cli) -> Result<Context> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
            PipelineConfig::from_json(&text).map_err(|e| InputError::new(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.forest.seed);
    cfg.forest.seed = seed;
    Ok(Context { cfg, seed, out: cli.out_dir.clone() })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(InputError::new("--jobs must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let ctx = context(&cli)?;
    match cli.command {
        Command::Generate { category, count, train } => stages::generate(&ctx, category, count, train),
        Command::Ssc { manifest } => stages::ssc(&ctx, manifest),
        Command::Render { manifest, png } => stages::render(&ctx, manifest, png),
        Command::Extract { manifest } => stages::extract(&ctx, manifest),
        Command::Train { dataset, quality } => stages::train(&ctx, dataset, quality),
        Command::Infer { forest, depth, output, overlay } => stages::infer(&ctx, &forest, depth, output, overlay),
        Command::Eval { forest, manifest } => stages::eval(&ctx, &forest, manifest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.is::<InputError>()) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
