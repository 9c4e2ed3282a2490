use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use longct_core::io::read_labels;
use longct_core::study::Split;
use longct_seg::evaluation::ModelSegmenter;
use longct_seg::model::Variant;

use longct::config::{device_from_env, Preset};
use longct::error::{CliError, CliResult};
use longct::layout::{index_path, load_registered, load_training_pairs};
use longct::pipeline::run_pipeline;
use longct::stages;
use longct::PipelineConfig;

#[derive(Parser)]
#[command(name = "longct", version, about = "Longitudinal chest CT registration, segmentation and progression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overlaid on the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory (the run root for `run`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Static,
    Longitudinal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic longitudinal studies.
    Phantom,
    /// Crop, normalise and resample every pair of a study manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Register one preprocessed pair (`REF_DIR,FUP_DIR`) or a whole index.
    Register {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        pair: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a network on the train/val splits of a registered index.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Segment one registered pair directory or every pair of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        pair: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write fused per-class probabilities.
        #[arg(long)]
        probabilities: bool,
    },
    /// Consolidation progression between two label maps.
    Progress {
        #[arg(long)]
        seg0: PathBuf,
        #[arg(long)]
        seg1: PathBuf,
    },
    /// Dice and progression error of a checkpoint on a registered index.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run every stage, reusing up-to-date outputs.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let device = device_from_env()?;
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), cli.preset, cli.seed, cli.out.as_deref())?;
    let out_for = |stage: &str| cli.out.clone().unwrap_or_else(|| cfg.out.join(stage));
    match cli.command {
        Command::Phantom => {
            stages::phantom(&cfg.phantom, &out_for("phantom"))?;
        }
        Command::Preprocess { manifest } => {
            stages::preprocess(&manifest, &cfg.preprocess, &out_for("preprocess"))?;
        }
        Command::Register { pair: Some(pair), .. } => {
            let (r, f) = pair
                .split_once(',')
                .ok_or_else(|| CliError::Config(format!("--pair expects REF_DIR,FUP_DIR, got `{pair}`")))?;
            cfg.registration.validate().map_err(|e| CliError::Config(e.to_string()))?;
            stages::register_one(Path::new(r), Path::new(f), &cfg.registration, &out_for("register"))?;
        }
        Command::Register { manifest, .. } => {
            let manifest = manifest.expect("clap requires --pair or --manifest");
            stages::register(&index_path(&manifest), &cfg.registration, &out_for("register"))?;
        }
        Command::Train { manifest, variant } => {
            let variant = match variant {
                Some(VariantArg::Static) => Variant::Static,
                Some(VariantArg::Longitudinal) => Variant::Longitudinal,
                None => cfg.model.variant,
            };
            let out = out_for("train");
            stages::train(&index_path(&manifest), &cfg.model_for(variant), cfg.init_seed(), &cfg.train, &cfg.preprocess, &out)?;
        }
        Command::Infer { checkpoint, pair, manifest, split, probabilities } => {
            let model = stages::load_model(&checkpoint)?;
            let out = out_for("infer");
            match (pair, manifest) {
                (Some(dir), _) => {
                    let pair = load_registered(&dir).map_err(|e| CliError::from_core("infer", e))?;
                    stages::infer_pair(&model, &pair, &cfg.preprocess, &out, probabilities)?;
                }
                (None, Some(m)) => {
                    stages::infer(&model, &index_path(&m), split.into(), &cfg.preprocess, &out, probabilities)?;
                }
                (None, None) => unreachable!("clap requires --pair or --manifest"),
            }
        }
        Command::Progress { seg0, seg1 } => {
            let read = |p: &Path| read_labels(p).map_err(|e| CliError::from_core("progress", e));
            let report = stages::progress(&read(&seg0)?, &read(&seg1)?, None, &out_for("progress"))?;
            println!("{}", report.to_table());
        }
        Command::Evaluate { checkpoint, manifest, split } => {
            let model = stages::load_model(&checkpoint)?;
            let (_, pairs) = load_training_pairs(&index_path(&manifest), Some(split.into()))
                .map_err(|e| CliError::from_core("evaluate", e))?;
            let result = stages::evaluate_with(&ModelSegmenter { model: &model, preprocess: &cfg.preprocess }, &pairs)?;
            let out = out_for("evaluate");
            stages::write_eval(&out, "eval", &result)?;
            println!("{}", result.to_table());
        }
        Command::Run => {
            let summary = run_pipeline(&cfg, device)?;
            for s in &summary.stages {
                println!("{:<20} {}", s.stage, if s.ran { "ran" } else { "cached" });
            }
            let c = &summary.comparison;
            println!(
                "mean CONS Dice: static {:.4}, longitudinal {:.4} ({} of {} volumes not worse)",
                c.static_mean_cons,
                c.longitudinal_mean_cons,
                c.longitudinal_not_worse,
                c.paired.len()
            );
            println!("artifact manifest: {}", cfg.out.join(longct::pipeline::ARTIFACT_MANIFEST).display());
        }
    }
    Ok(())
}
