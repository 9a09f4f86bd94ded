//! `nbsep`: simulate data, train, separate, evaluate and inspect models.

mod commands;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nbsep::Error;

#[derive(Parser, Debug)]
#[command(name = "nbsep", version, about = "Narrow-band multichannel speech separation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets both `train.seed` and `data.seed`; wins over file and --set.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic mixtures, targets and a manifest.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// train, val, test or all (one subdirectory per split).
        #[arg(long, default_value = "all")]
        split: String,
        /// Number of mixtures (defaults to the configured split size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes checkpoints and logs to --out.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset root with train/ and val/ subdirectories; falls back to
        /// `data.dir`, then NBSEP_DATA_DIR, then on-the-fly simulation.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from last.ckpt in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Separate one multichannel WAV into one mono WAV per speaker.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export attention maps of every block and head.
        #[arg(long)]
        record_attention: bool,
    },
    /// Score separated estimates (or a checkpoint) against targets.
    Evaluate {
        /// Dataset directory with a manifest; the synthetic test split of the
        /// configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `<id>_est<n>.wav` files.
        #[arg(long, conflicts_with = "checkpoint")]
        estimates: Option<PathBuf>,
        /// Separate with this model instead of reading estimates.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics table path (printed to stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write query-key and frequency-key attention maps of one head.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer and the training loss.
    Gradcheck,
    /// Print exact parameter counts of the presets and the configured model.
    Params,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.global.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_env("NBSEP_LOG")
        .format_timestamp_secs()
        .init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Simulate { out, split, count } => commands::simulate(g, &out, &split, count),
        Command::Train { out, data, resume } => commands::train(g, &out, data, resume),
        Command::Separate { checkpoint, input, out, record_attention } => {
            commands::separate(&checkpoint, &input, &out, record_attention)
        }
        Command::Evaluate { data, estimates, checkpoint, out } => {
            commands::evaluate(g, data, estimates, checkpoint, out.as_deref())
        }
        Command::ExportAttention { checkpoint, input, block, head, out } => {
            commands::export_attention(&checkpoint, &input, block, head, &out)
        }
        Command::Gradcheck => commands::gradcheck(g),
        Command::Params => commands::params(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
