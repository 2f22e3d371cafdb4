//! Command-line driver: synthesize data, train the guided flow, evaluate
//! coverage/size on the test split, and export 2-D region boundaries.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowcp::data::{save_csv, synth_var, DataError, NoiseSpec};
use flowcp::pipeline::{
    eval_run, load_checkpoint, region_for_index, save_checkpoint, train_run, write_loss_log,
    write_report, NPolicy, PipelineError,
};
use flowcp::RunConfig;

#[derive(Parser)]
#[command(
    name = "flowcp",
    about = "Flow-based conformal prediction for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic VAR(1) dataset as CSV
    Synth(SynthArgs),
    /// Fit the base predictor and train the guided flow
    Train(RunArgs),
    /// Evaluate coverage and set sizes on the test split
    Eval(RunArgs),
    /// Export the 2-D prediction-set boundary at one test index
    Region(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// series dimension (features and outcomes)
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// series length
    #[arg(long = "T", default_value_t = 2000)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// VAR(1) spectral radius, must be < 1
    #[arg(long, default_value_t = 0.7)]
    coupling: f64,
    /// constant outcome-noise level (isotropic unless --noise-amp > 0)
    #[arg(long, default_value_t = 0.3)]
    noise_base: f64,
    /// state-dependent noise amplitude for heteroscedastic data
    #[arg(long, default_value_t = 0.0)]
    noise_amp: f64,
    /// output CSV path
    #[arg(long, default_value = "synth.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<String>,
    /// training epoch budget
    #[arg(long)]
    epochs: Option<usize>,
    /// context window length (encoder and predictor)
    #[arg(long)]
    w: Option<usize>,
    /// fixed QMC sample count for set sizes
    #[arg(long = "N")]
    n: Option<usize>,
    /// choose N by the relative-standard-error gate instead of a fixed value
    #[arg(long)]
    auto_n: bool,
    /// checkpoint path (defaults to <out>/model.fcp)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// test index for `region`
    #[arg(long)]
    index: Option<usize>,
    /// boundary point count for `region`
    #[arg(long, default_value_t = 360)]
    k_points: usize,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(DataError::UnstableSystem(_)) => 2,
            CliError::Data(_) => 1,
            CliError::Pipeline(p) => match p {
                PipelineError::Config(_) | PipelineError::BadCheckpoint(_) => 1,
                PipelineError::Io(_) | PipelineError::Data(_) => 1,
                PipelineError::IndexOutOfRange { .. } => 1,
                _ => 2,
            },
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = args.epochs {
        cfg.flow.max_epochs = e;
    }
    if let Some(w) = args.w {
        cfg.window = w;
        cfg.k = w;
    }
    if args.auto_n {
        cfg.n_policy = NPolicy::AutoGate {
            start: 64,
            gate: 0.01,
            max: 1 << 17,
        };
    } else if let Some(n) = args.n {
        cfg.n_policy = NPolicy::Fixed { n };
    }
    if cfg.dataset.is_empty() {
        return Err(CliError::Usage(
            "no dataset given (config `dataset` or --dataset)".into(),
        ));
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<flowcp::SeriesDataset, CliError> {
    if !std::path::Path::new(&cfg.dataset).exists() {
        return Err(CliError::Usage(format!(
            "dataset not found: {}",
            cfg.dataset
        )));
    }
    flowcp::data::load_csv(&cfg.dataset, cfg.d_x, cfg.d_y).map_err(CliError::Data)
}

fn checkpoint_path(cfg: &RunConfig, args: &RunArgs) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("model.fcp"))
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let noise = if args.noise_amp > 0.0 {
        NoiseSpec::StateScaled {
            base: args.noise_base,
            amp: args.noise_amp,
        }
    } else {
        NoiseSpec::Isotropic {
            sigma: args.noise_base,
        }
    };
    let ds = synth_var::<f64>(args.seed, args.t, args.d, args.coupling, noise)?;
    save_csv(&ds, &args.out)?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg)?;
    let mut progress = |log: &flowcp::pipeline::EpochLog| {
        eprintln!(
            "epoch {:3}  train_loss {:.6}  val_loss {:.6}",
            log.epoch, log.train_loss, log.val_loss
        );
    };
    let art = train_run(&cfg, &ds, Some(&mut progress))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(PipelineError::Io)?;
    let ckpt = checkpoint_path(&cfg, args);
    save_checkpoint(&ckpt, &art)?;
    write_loss_log(&cfg.out_dir, &art.epoch_log)?;
    println!(
        "checkpoint (best epoch {}) written to {}",
        art.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg)?;
    let ckpt = checkpoint_path(&cfg, args);
    if !ckpt.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint not found: {}",
            ckpt.display()
        )));
    }
    let art = load_checkpoint::<f64>(&ckpt)?;
    let report = eval_run(&cfg, &ds, &art)?;
    write_report(&cfg.out_dir, &report)?;
    println!(
        "n_test {}  coverage {:.4}  avg_size {:.4}  (alpha {}, N {})",
        report.n_test,
        report.empirical_coverage,
        report.average_size,
        report.alpha,
        report.n_samples
    );
    Ok(())
}

fn cmd_region(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let index = args
        .index
        .ok_or_else(|| CliError::Usage("region requires --index".into()))?;
    let ds = load_dataset(&cfg)?;
    let ckpt = checkpoint_path(&cfg, args);
    if !ckpt.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint not found: {}",
            ckpt.display()
        )));
    }
    let art = load_checkpoint::<f64>(&ckpt)?;
    let pts = region_for_index(&cfg, &ds, &art, index, args.k_points)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(PipelineError::Io)?;
    let path = PathBuf::from(&cfg.out_dir).join(format!("region_{index}.csv"));
    let mut csv = String::from("x,y\n");
    for p in &pts {
        csv.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    std::fs::write(&path, csv).map_err(PipelineError::Io)?;
    println!("wrote {} boundary points to {}", pts.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Region(args) => cmd_region(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
