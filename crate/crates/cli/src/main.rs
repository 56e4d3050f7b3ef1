mod commands;
mod config;
mod manifest;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glagan::evaluation::Protocol;
use glagan::{Error, Result};

use config::ExperimentConfig;
use render::Plane;

#[derive(Debug, Parser)]
#[command(name = "glagan", version, about = "MRI to PET synthesis experiments on 3D volumes")]
struct Cli {
    /// Experiment config (JSON); omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every command writes only below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    PairedCv,
    Complete,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default config.
    DefaultConfig,
    /// Generate a phantom cohort from the `data` section.
    MakePhantoms,
    /// Train a generator (or every variant of the config's sweep lists).
    Train {
        #[arg(long, env = "GLAGAN_DATA_ROOT")]
        data: PathBuf,
    },
    /// Predict PET volumes from MRI files or a dataset directory.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// MRI volume, directory of volumes, or dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// With a dataset input, also write the dataset with missing PETs filled in.
        #[arg(long)]
        complete: bool,
    },
    /// Synthesis metrics on the held-out subjects.
    Evaluate {
        /// Checkpoint file, or a training output directory.
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Output directory of `synthesize` run on the dataset.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, env = "GLAGAN_DATA_ROOT")]
        data: PathBuf,
    },
    /// Cross-validated AD / CN classification from regional features.
    Classify {
        #[arg(long, env = "GLAGAN_DATA_ROOT")]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        folds: Option<usize>,
        /// Region label volume replacing the dataset's atlas.
        #[arg(long)]
        atlas: Option<PathBuf>,
        #[arg(long, requires = "wm_mask")]
        gm_mask: Option<PathBuf>,
        #[arg(long, requires = "gm_mask")]
        wm_mask: Option<PathBuf>,
    },
    /// Walk from a CN to an AD subject in MRI space and track the classifier.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `classifier.json` written by `classify`.
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, env = "GLAGAN_DATA_ROOT")]
        data: PathBuf,
        /// Defaults to the first CN subject.
        #[arg(long)]
        cn: Option<String>,
        /// Defaults to the first AD subject.
        #[arg(long)]
        ad: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dump per-channel activations of a global-path layer.
    InspectUnits {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// conv1..conv4, res1..res4, or `all`.
        #[arg(long, default_value = "res4")]
        layer: String,
    },
    /// PNG slices, with signed error maps against a reference.
    RenderSlices {
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
        /// Defaults to the first volume when several are given.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_values_t = [Plane::Axial, Plane::Coronal, Plane::Sagittal])]
        plane: Vec<Plane>,
        /// Slice index along the fixed axis; defaults to the middle.
        #[arg(long)]
        slice: Option<usize>,
        /// Pixels per voxel.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=64))]
        scale: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::DefaultConfig => "default-config",
            Command::MakePhantoms => "make-phantoms",
            Command::Train { .. } => "train",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
            Command::Classify { .. } => "classify",
            Command::Interpolate { .. } => "interpolate",
            Command::InspectUnits { .. } => "inspect-units",
            Command::RenderSlices { .. } => "render-slices",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::WindowTooLarge { .. } | Error::InsufficientResolution { .. } => 2,
        Error::MissingFile(_) => 3,
        Error::ResolutionMismatch { .. } | Error::ShapeMismatch { .. } => 4,
        _ => 1,
    }
}

fn run(cmd: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    match cmd {
        Command::DefaultConfig => write_config(cfg, out),
        Command::MakePhantoms => commands::make_phantoms(cfg, out),
        Command::Train { data } => commands::train_cmd(cfg, data, out),
        Command::Synthesize { checkpoint, input, complete } => commands::synthesize(checkpoint, input, *complete, out),
        Command::Evaluate { checkpoint, predictions, data } => {
            commands::evaluate(cfg, checkpoint.as_deref(), predictions.as_deref(), data, out)
        }
        Command::Classify { data, mode, folds, atlas, gm_mask, wm_mask } => {
            let args = commands::ClassifyArgs {
                data,
                atlas: atlas.as_deref(),
                gm_mask: gm_mask.as_deref(),
                wm_mask: wm_mask.as_deref(),
                protocol: mode.map(|m| match m {
                    Mode::PairedCv => Protocol::PairedCv,
                    Mode::Complete => Protocol::Complete,
                }),
                folds: *folds,
            };
            commands::classify(cfg, &args, out)
        }
        Command::Interpolate { checkpoint, classifier, data, cn, ad, steps } => {
            let args = commands::InterpolateArgs {
                checkpoint,
                classifier,
                data,
                cn: cn.as_deref(),
                ad: ad.as_deref(),
                steps: *steps,
            };
            commands::interpolate(cfg, &args, out)
        }
        Command::InspectUnits { checkpoint, volume, layer } => commands::inspect_units(checkpoint, volume, layer, out),
        Command::RenderSlices { volumes, reference, plane, slice, scale } => {
            let args = commands::RenderArgs { volumes, reference: reference.as_deref(), planes: plane, slice: *slice, scale: *scale };
            commands::render_slices(&args, out)
        }
    }
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::Unwritable { path, reason: e.to_string() })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let Some(out) = cli.out.as_deref() else {
        if let Command::DefaultConfig = cli.command {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return ExitCode::SUCCESS;
        }
        log::error!("--out is required for {}", cli.command.name());
        return ExitCode::from(2);
    };
    let clock = manifest::Clock::start();
    let result = run(&cli.command, &cfg, out);
    if let Err(e) = manifest::write(out, cli.command.name(), &cfg, &clock, result.as_ref().map(|_| ())) {
        log::warn!("could not write the run manifest: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
