use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use davel_core::commands::{
    cmd_dump_attn, cmd_eval, cmd_generate, cmd_infer, cmd_train, config_init, read_config, split_inputs, FeatureInput,
};
use davel_core::config::RunConfig;
use davel_core::data::Split;

#[derive(Parser)]
#[command(name = "davel", version, about = "Dense audio-visual event localization on snippet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command (synthetic data or training).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic feature corpus.
    Generate(Common),
    /// Train a model on a generated corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to the config's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect events in feature files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Audio feature file of a single video.
        #[arg(long, requires = "visual")]
        audio: Option<PathBuf>,
        /// Visual feature file of a single video.
        #[arg(long, requires = "audio")]
        visual: Option<PathBuf>,
        /// Video id used in the output for single-video inference.
        #[arg(long, default_value = "video")]
        id: String,
        /// Run on every video of this split instead.
        #[arg(long, conflicts_with = "audio")]
        split: Option<Split>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export the stage attention maps of one video as CSV.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print (or write with --out) the default configuration.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => read_config(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }

    /// Model section to check checkpoints against, only when a config file
    /// was given explicitly.
    fn expected_model(&self) -> Result<Option<davel_core::config::ModelConfig>> {
        Ok(match &self.config {
            Some(_) => Some(self.load()?.model),
            None => None,
        })
    }
}

fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            let out = common.out.unwrap_or_else(|| cfg.data_dir.clone());
            let n = cmd_generate(&cfg, &out)?;
            println!("wrote {n} videos to {}", out.display());
        }
        Command::Train { common, data, checkpoint } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = cmd_train(&cfg, &data, &out, checkpoint.as_deref(), |s| {
                let val = s.val_avg_map.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>3}  step {:>6}  lr {:.2e}  tau {:.3}  loss {:.4}  val avg mAP {val}",
                    s.epoch + 1,
                    s.step,
                    s.lr,
                    s.tau,
                    s.train_loss
                );
            })?;
            println!(
                "best checkpoint {}  last checkpoint {}",
                outcome.best_checkpoint.display(),
                outcome.last_checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint, split, data } => {
            let expected = common.expected_model()?;
            let cfg = common.load()?;
            let data = data.unwrap_or(cfg.data_dir);
            let out = common.out.unwrap_or_else(|| default_eval_dir(&checkpoint));
            let res = cmd_eval(&checkpoint, expected.as_ref(), &data, split, &out)?;
            print!("{}", res.report.table("ours"));
            println!("report written to {}", res.report_json.display());
        }
        Command::Infer { common, checkpoint, audio, visual, id, split, data } => {
            let expected = common.expected_model()?;
            let cfg = common.load()?;
            let inputs = match (audio, visual, split) {
                (Some(audio), Some(visual), None) => vec![FeatureInput { id, audio, visual }],
                (None, None, Some(split)) => split_inputs(&data.unwrap_or(cfg.data_dir), split)?,
                _ => bail!("give either --audio and --visual, or --split"),
            };
            let out = common.out.unwrap_or_else(|| default_eval_dir(&checkpoint));
            let dets = cmd_infer(&checkpoint, expected.as_ref(), &inputs, &out)?;
            let total: usize = dets.iter().map(|d| d.detections.len()).sum();
            println!("{} detections over {} videos written to {}", total, dets.len(), out.display());
        }
        Command::DumpAttn { common, checkpoint, id, split, data } => {
            let expected = common.expected_model()?;
            let cfg = common.load()?;
            let data = data.unwrap_or(cfg.data_dir);
            let out = common.out.unwrap_or_else(|| default_eval_dir(&checkpoint).join("attention"));
            for p in cmd_dump_attn(&checkpoint, expected.as_ref(), &data, split, &id, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Config { action: ConfigAction::Init { out } } => {
            let text = config_init(out.as_deref())?;
            if out.is_none() {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
