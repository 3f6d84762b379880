use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unisep::pipeline::{cmd_eval, cmd_mix, cmd_stream, cmd_train_sep, cmd_train_sod, EvalOptions, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "unisep", version, about = "Joint speech enhancement / separation with overlap detection")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed; model, training and SOD seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding the dataset and run artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the train/valid/test scene corpus.
    Mix,
    /// Train the separator.
    TrainSep {
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Cache separator masks and train the overlap detector.
    TrainSod,
    /// Score the test split.
    Eval {
        /// Zero second-channel frames the detector marks as single-talker.
        #[arg(long)]
        sod_masking: bool,
        /// Use ground-truth talker counts instead of detector decisions.
        #[arg(long)]
        oracle_sod: bool,
    },
    /// Frame-by-frame processing of one 16 kHz mono WAV file.
    Stream { input: PathBuf },
}

fn run(cli: Cli) -> unisep::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = &cli.out;
    match cli.command {
        Command::Mix => println!("{}", cmd_mix(&cfg, out)?),
        Command::TrainSep { resume } => {
            let r = cmd_train_sep(&cfg, out, resume)?;
            for (i, l) in r.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.4}", r.epochs_completed - r.epoch_losses.len() + i);
            }
            println!("checkpoint: {}", r.checkpoint.display());
        }
        Command::TrainSod => {
            let r = cmd_train_sod(&cfg, out)?;
            println!("cached {} mask sequences", r.cached_masks);
            for (i, l) in r.epoch_losses.iter().enumerate() {
                println!("epoch {i:>3}  BCE {l:.4}");
            }
            println!("checkpoint: {}", r.checkpoint.display());
        }
        Command::Eval { sod_masking, oracle_sod } => {
            let r = cmd_eval(&cfg, out, EvalOptions { sod_masking, oracle_sod })?;
            print!("{}", r.report.to_text());
            println!("report: {}", r.report_path.display());
        }
        Command::Stream { input } => {
            let r = cmd_stream(&cfg, out, &input)?;
            println!("{} frames, real-time factor {:.1}", r.frames, r.real_time_factor);
            println!("outputs: {}", r.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("{}: {}", class.prefix(), e.to_string().replace('\n', " "));
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
