//! `dptrack`: generate synthetic sequences, train, track, evaluate and verify.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dptrack", version, about = "Prompt-guided tracker on synthetic low-light sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug)]
struct Common {
    /// RunConfig JSON; omitted keys take their defaults [default: built-in defaults]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces both the tracker and the scene seed [default: from config]
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic sequences as seq_<k>/frame_<nnnn>.ppm plus gt.jsonl
    Gen {
        /// Dataset root [default: paths.data from config]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of sequences
        #[arg(long, default_value_t = 8)]
        seqs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a tracker; writes the checkpoint, its config and a loss CSV
    Train {
        /// Dataset root [default: paths.data from config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path [default: paths.checkpoint from config]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the loss every this many steps, 0 for never
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Track one sequence and write predicted boxes as JSON lines
    Track {
        /// Checkpoint path [default: paths.checkpoint from config]
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Sequence directory
        #[arg(long)]
        seq: PathBuf,
        /// Output JSONL
        #[arg(long, default_value = "pred.jsonl")]
        out: PathBuf,
        /// Initial box as x,y,w,h [default: first line of the sequence's gt.jsonl]
        #[arg(long, value_parser = parse_box)]
        init: Option<[f64; 4]>,
        #[arg(long, value_enum, default_value_t = VariantArg::Prompted)]
        variant: VariantArg,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions (--pred with --gt) or a checkpoint on a dataset (--ckpt with --data)
    Eval {
        /// Predicted JSONL, or a directory of seq_<k>.jsonl files
        #[arg(long, requires = "gt", conflicts_with_all = ["ckpt", "data"])]
        pred: Option<PathBuf>,
        /// Ground-truth JSONL or sequence directory, or a dataset root when --pred is a directory
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Checkpoint to run over --data [default: none]
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        /// Dataset root tracked with --ckpt [default: none]
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        /// Directory for report.json and curves.csv [default: paths.output from config]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sequences tracked in parallel
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::Prompted)]
        variant: VariantArg,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks in double precision; exit 0 iff all pass
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the illumination prompter's Gaussian and Laplacian levels as PPM
    Pyramid {
        /// Take prompter weights from this checkpoint [default: none]
        #[arg(long, conflicts_with = "init", required_unless_present = "init")]
        ckpt: Option<PathBuf>,
        /// Use freshly initialized weights from the config and seed
        #[arg(long)]
        init: bool,
        /// Input PPM; sides must be divisible by 2^levels
        #[arg(long)]
        image: PathBuf,
        /// Output directory
        #[arg(long, default_value = "pyramid")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    /// With both prompters and the fusion units
    Prompted,
    /// Plain transformer path with the prompt branches removed
    Plain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Ops,
    Prompters,
    Block,
    Model,
    All,
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 4]>::try_from(v).map_err(|v| format!("expected x,y,w,h, got {} numbers", v.len()))
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DPT_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DPT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen { out, seqs, common } => commands::gen(&common.load()?, out, seqs),
        Command::Train { data, out, log_every, common } => commands::train(&common.load()?, data, out, log_every),
        Command::Track { ckpt, seq, out, init, variant, common } => {
            commands::track(&common.load()?, ckpt, &seq, &out, init, variant.into())
        }
        Command::Eval { pred, gt, ckpt, data, out, workers, variant, common } => {
            let source = match (pred, gt, ckpt, data) {
                (Some(pred), Some(gt), None, None) => commands::EvalSource::Files { pred, gt },
                (None, None, Some(ckpt), Some(data)) => commands::EvalSource::Model { ckpt, data },
                _ => return Err(CliError::Usage("eval needs --pred with --gt, or --ckpt with --data".into())),
            };
            commands::eval(&common.load()?, source, out, workers, variant.into())
        }
        Command::Gradcheck { scope, common } => commands::gradcheck(&common.load()?, scope.into()),
        Command::Pyramid { ckpt, init: _, image, out, common } => commands::pyramid(&common.load()?, ckpt, &image, &out),
    }
}

impl Common {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        config::RunConfig::resolve(self.config.as_deref(), self.seed)
    }
}

impl From<VariantArg> for dptrack::tracker::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Prompted => Self::Prompted,
            VariantArg::Plain => Self::Plain,
        }
    }
}

impl From<ScopeArg> for Vec<dptrack::gradcheck::Scope> {
    fn from(s: ScopeArg) -> Self {
        use dptrack::gradcheck::Scope;
        match s {
            ScopeArg::Ops => vec![Scope::Ops],
            ScopeArg::Prompters => vec![Scope::Prompters],
            ScopeArg::Block => vec![Scope::Block],
            ScopeArg::Model => vec![Scope::Model],
            ScopeArg::All => Scope::ALL.to_vec(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
