use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qdiff::metrics::ExtractorKind;
use qdiff::quantum::Ansatz;
use qdiff::unet::BottleneckKind;
use qdiff_cli::config::DATA_DIR_ENV;
use qdiff_cli::{CliError, Dataset, RunConfig};

/// Hybrid quantum-classical denoising diffusion: train, sample, evaluate, compare.
#[derive(Parser)]
#[command(name = "qdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a single class.
    Train(RunArgs),
    /// Draw samples from a checkpoint's EMA weights.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'n', default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score a sample dump against the images of one class.
    Evaluate {
        /// Dump written by `sample`.
        #[arg(long)]
        generated: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train, sample and evaluate the classical and quantum variants side by side.
    Compare(RunArgs),
}

/// Run settings. Flags override values from `--config`, which override the defaults.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML file with any of the run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<Dataset>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    npz: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long = "class")]
    class_label: Option<i64>,
    #[arg(long, value_parser = parse_model)]
    model: Option<BottleneckKind>,
    #[arg(long, value_parser = parse_ansatz)]
    ansatz: Option<Ansatz>,
    #[arg(long)]
    skip_connections: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Cosine-schedule offset s.
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    normalize_alpha_bar: Option<bool>,
    #[arg(long)]
    ema_beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_train_images: Option<usize>,
    #[arg(long)]
    grid_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long, value_parser = parse_extractor)]
    extractor: Option<ExtractorKind>,
    /// Threads for parameter-shift evaluation; outputs are bit-reproducible only at 1.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

fn parse_dataset(s: &str) -> Result<Dataset, String> {
    match s {
        "mnist" => Ok(Dataset::Mnist),
        "medmnist" => Ok(Dataset::Medmnist),
        other => Err(format!("unknown dataset {other:?} (mnist | medmnist)")),
    }
}

fn parse_model(s: &str) -> Result<BottleneckKind, String> {
    s.parse().map_err(|e: qdiff::Error| e.to_string())
}

fn parse_ansatz(s: &str) -> Result<Ansatz, String> {
    s.parse().map_err(|e: qdiff::Error| e.to_string())
}

fn parse_extractor(s: &str) -> Result<ExtractorKind, String> {
    s.parse().map_err(|e: qdiff::Error| e.to_string())
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { c.$field = v; }
            )*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { c.$field = Some(v); }
            )*};
        }
        set!(
            dataset,
            split,
            class_label,
            model,
            ansatz,
            skip_connections,
            epochs,
            batch_size,
            lr
        );
        set!(
            steps,
            offset,
            normalize_alpha_bar,
            ema_beta,
            seed,
            grid_samples,
            eval_samples
        );
        set!(extractor, workers, output_dir);
        set_opt!(data_dir, images, labels, npz, max_train_images, run_id);
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let out = qdiff_cli::train(&args.resolve()?)?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("best epoch: {}", out.best_epoch);
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
            workers,
        } => {
            let out = qdiff_cli::sample(&checkpoint, n, seed, out.as_deref(), workers)?;
            println!("grid: {}", out.png.display());
            println!("dump: {}", out.dump.display());
        }
        Command::Evaluate { generated, run } => {
            let cfg = run.resolve()?;
            cfg.validate()?;
            let records = qdiff_cli::evaluate(&generated, &cfg, cfg.extractor, cfg.seed)?;
            for r in records {
                println!("{}", r.to_json_line());
            }
            eprintln!("note: {}", qdiff::metrics::EXTRACTOR_NOTE);
        }
        Command::Compare(args) => {
            let report = qdiff_cli::compare(&args.resolve()?)?;
            print!("{}", report.table);
        }
    }
    Ok(())
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
            eprintln!("qdiff: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
