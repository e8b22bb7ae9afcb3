//! `lipsplat`: speech-driven 3D facial animation with splat-rendered lip
//! supervision. One binary, five subcommands: synthesize, train, infer,
//! evaluate, confusion.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lipsplat_core::config::{DatasetDomain, RunConfig};
use lipsplat_core::data::Part;
use lipsplat_core::error::Error;
use lipsplat_core::lipreader::diagonal_contrast;
use lipsplat_core::losses::StageId;
use lipsplat_core::pipeline::{ConfusionSet, InferInput, Workspace};

#[derive(Parser)]
#[command(
    name = "lipsplat",
    version,
    about = "Speech-driven 3D facial animation with a perceptual lip-reading loss on Gaussian-splat renders"
)]
struct Cli {
    /// Run config (TOML); omit to use a built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in preset when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force deterministic mode (fixed seeds, ordered reductions).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the run output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Clean,
    Noisy,
}

impl From<DomainArg> for DatasetDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Clean => DatasetDomain::Clean,
            DomainArg::Noisy => DatasetDomain::Noisy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Val,
    Test,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Train => Part::Train,
            PartArg::Val => Part::Val,
            PartArg::Test => Part::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    /// Ground-truth renders.
    Gt,
    /// Ground-truth meshes with added vertex noise, re-rendered.
    GtNoisy,
    /// Checkpoint predictions, rendered.
    Pred,
}

impl From<SetArg> for ConfusionSet {
    fn from(s: SetArg) -> Self {
        match s {
            SetArg::Gt => ConfusionSet::GtRenders,
            SetArg::GtNoisy => ConfusionSet::NoisyGtRenders,
            SetArg::Pred => ConfusionSet::Predictions,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets, model, avatar, and splits.
    Synthesize,
    /// Train one curriculum stage (1: clean pretrain, 2: noisy adaptation,
    /// 3: + lip-reading loss).
    Train {
        #[arg(long)]
        stage: u8,
    },
    /// Animate from an audio file or text through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "text")]
        audio: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        /// Subject whose neutral face drives the animation.
        #[arg(long)]
        subject: Option<String>,
    },
    /// Evaluate a checkpoint (LVE, PSNR, SSIM, feature cosine) on a split.
    Evaluate {
        #[arg(long, required_unless_present = "gt_as_pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DomainArg::Noisy)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value_t = PartArg::Test)]
        split: PartArg,
        /// Score the ground truth against itself (pipeline ceiling).
        #[arg(long)]
        gt_as_pred: bool,
    },
    /// Cosine-similarity confusion matrix between two render sets.
    Confusion {
        #[arg(long, value_enum, default_value_t = SetArg::Gt)]
        set_a: SetArg,
        #[arg(long, value_enum, default_value_t = SetArg::GtNoisy)]
        set_b: SetArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vertex noise (meters) for the gt-noisy set.
        #[arg(long, default_value_t = 1e-3)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = DomainArg::Noisy)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value_t = PartArg::Test)]
        split: PartArg,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk_preset(),
            Preset::Paper => RunConfig::paper_preset(),
        },
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli)?;
    let out_dir = config.output_dir.clone();
    let ws = Workspace::new(config)?;
    match cli.command {
        Command::Synthesize => {
            let summary = ws.synthesize()?;
            println!(
                "synthesized {} clean + {} noisy samples under `{}`",
                summary.clean.samples.len(),
                summary.noisy.samples.len(),
                ws.config.dataset.root.display()
            );
        }
        Command::Train { stage } => {
            let stage = StageId::from_number(stage)?;
            let path = ws.train_stage(stage)?;
            println!(
                "stage {} complete; checkpoint `{}`; metrics `{}`",
                stage.number(),
                path.display(),
                out_dir
                    .join("logs")
                    .join(format!("stage{}_metrics.tsv", stage.number()))
                    .display()
            );
        }
        Command::Infer {
            checkpoint,
            audio,
            text,
            subject,
        } => {
            let input = match (audio, text) {
                (Some(path), None) => InferInput::Audio(path),
                (None, Some(t)) => InferInput::Text(t),
                _ => return Err(Error::config("provide exactly one of --audio or --text")),
            };
            let dest = out_dir.join("inference");
            let summary = ws.infer(&checkpoint, &input, &dest, subject.as_deref())?;
            println!(
                "wrote {} frames for subject {} to `{}`",
                summary.frames,
                summary.subject,
                dest.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            domain,
            split,
            gt_as_pred,
        } => {
            let ckpt = if gt_as_pred { None } else { checkpoint };
            let report_dir = out_dir.join("evaluation");
            let report = ws.evaluate(
                ckpt.as_deref(),
                domain.into(),
                split.into(),
                Some(&report_dir),
            )?;
            print!("{}", report.to_tsv());
            println!("report written to `{}`", report_dir.display());
        }
        Command::Confusion {
            set_a,
            set_b,
            checkpoint,
            noise,
            domain,
            split,
        } => {
            let dir = out_dir.join("confusion");
            let m = ws.confusion(
                domain.into(),
                split.into(),
                set_a.into(),
                set_b.into(),
                checkpoint.as_deref(),
                noise,
                Some(&dir),
            )?;
            let (diag, off) = diagonal_contrast(&m);
            println!(
                "confusion {}x{}: diagonal mean {diag:.4}, off-diagonal mean {off:.4}; heatmap in `{}`",
                m.shape()[0],
                m.shape()[1],
                dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
