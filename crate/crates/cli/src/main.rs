use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deocc_core::harness::commands::{self, InferRequest, STAGE1_CHECKPOINT, STAGE2_CHECKPOINT};
use deocc_core::harness::{Stage, TrainConfig};
use deocc_core::Error;

#[derive(Parser)]
#[command(name = "deocc", version, about = "Two-stage human de-occlusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory for checkpoints, logs and reports.
    #[arg(long, env = "DEOCC_RUN_DIR", global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Checkpoints {
    /// Stage-one checkpoint (default: <run_dir>/stage1.ckpt).
    #[arg(long)]
    stage1: Option<PathBuf>,
    /// Stage-two checkpoint (default: <run_dir>/stage2.ckpt).
    #[arg(long)]
    stage2: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize training and validation splits.
    Synth,
    /// Train the mask completion stage.
    TrainMask,
    /// Train the appearance recovery stage.
    TrainRecover {
        /// Stage-one checkpoint, used when recover_parsing = predicted.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Evaluate the cascade on the validation split.
    Eval {
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Run the cascade on one image.
    Infer {
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        image: PathBuf,
        /// Initial instance mask (8-bit gray PNG, 0/255).
        #[arg(long)]
        mask: PathBuf,
        /// Corrupt the mask with this severity first.
        #[arg(long)]
        corrupt: Option<f64>,
        #[arg(long, default_value = "infer")]
        out: PathBuf,
    },
    /// Sweep background proportion and attention variants for stage two.
    Ablate,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(common: &Common) -> deocc_core::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &common.overrides {
        cfg.set_pair(kv)?;
    }
    if let Some(dir) = &common.run_dir {
        cfg.run_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> deocc_core::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let ckpts = |c: &Checkpoints, cfg: &TrainConfig| {
        (
            c.stage1.clone().unwrap_or_else(|| cfg.run_dir.join(STAGE1_CHECKPOINT)),
            c.stage2.clone().unwrap_or_else(|| cfg.run_dir.join(STAGE2_CHECKPOINT)),
        )
    };
    match cli.command {
        Command::Synth => {
            for s in commands::cmd_synth(&cfg)? {
                println!("{}: {} samples", s.split, s.count);
                for b in s.histogram {
                    println!(
                        "  [{:.2}, {:.2})  target {:.3}  got {:.3}",
                        b.low, b.high, b.target_probability, b.fraction
                    );
                }
            }
        }
        Command::TrainMask => {
            cfg.stage = Stage::Mask;
            println!("{}", commands::cmd_train_mask(&cfg)?.display());
        }
        Command::TrainRecover { stage1 } => {
            cfg.stage = Stage::Recover;
            println!("{}", commands::cmd_train_recover(&cfg, stage1.as_deref())?.display());
        }
        Command::Eval { ckpt } => {
            let (s1, s2) = ckpts(&ckpt, &cfg);
            let report = commands::cmd_eval(&cfg, &s1, &s2)?;
            let a = &report.aggregate;
            println!(
                "n={} iou modal/amodal/invisible {:.4}/{:.4}/{:.4}  l1 mask {:.4}  l1 image {:.4}  frechet {}",
                report.count,
                a.iou_modal,
                a.iou_amodal,
                a.iou_invisible,
                a.l1_amodal_mask,
                a.l1_image,
                a.frechet.map_or("-".into(), |f| format!("{f:.4}"))
            );
        }
        Command::Infer {
            ckpt,
            image,
            mask,
            corrupt,
            out,
        } => {
            let (s1, s2) = ckpts(&ckpt, &cfg);
            let req = InferRequest {
                image,
                mask,
                corrupt,
                out_dir: out,
            };
            let o = commands::cmd_infer(&cfg, &s1, &s2, &req)?;
            println!(
                "amodal {} px, invisible {} px, modal/amodal violations {}",
                o.amodal.area(),
                o.invisible.area(),
                o.violations
            );
        }
        Command::Ablate => {
            cfg.stage = Stage::Recover;
            let rows = commands::cmd_ablate(&cfg)?;
            print!("{}", commands::ablation_table(&rows));
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Shape(_)
        | Error::Sizing { .. }
        | Error::Distribution(_)
        | Error::Dataset { .. }
        | Error::Checkpoint(_) => 1,
        Error::Placement { .. } | Error::Numerical(_) | Error::Io { .. } | Error::Image { .. } => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
