//! `caai`: train, run and evaluate the RGB-D saliency network.
//!
//! Exit status is 0 on success, 1 for bad input (flags, config, missing or
//! undecodable files) and 2 when a computation fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caai_core::checkpoint::{Checkpoint, MAGIC};
use caai_core::data::{self, DatasetLayout, SyntheticSpec};
use caai_core::metrics::evaluate_dataset;
use caai_core::model::CaaiNet;
use caai_core::nn::resample_value;
use caai_core::train::{self, TrainState};
use caai_core::{gradcheck, parallel, Config, Error, Float, Precision};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caai", version, about = "RGB-D salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root with RGB/, depth/ and GT/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write 8-bit saliency maps for every RGB/depth pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Generate a synthetic RGB-D dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences, per module.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A command failure with the exit status it maps to.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let threads = parallel::init_threads_from_env();
    log::debug!("using {threads} worker threads");
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = Config::load(&config)?;
            match cfg.train.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, &data, &out, resume.as_deref()),
                Precision::F64 => train_cmd::<f64>(&cfg, &data, &out, resume.as_deref()),
            }
        }
        Command::Infer { ckpt, data, out } => {
            let bytes = fs::read(&ckpt).map_err(|e| Failure::Invalid(format!("{}: {e}", ckpt.display())))?;
            match checkpoint_width(&bytes) {
                Some(4) => infer_cmd(Checkpoint::<f32>::from_bytes(&bytes)?, &data, &out),
                Some(8) => infer_cmd(Checkpoint::<f64>::from_bytes(&bytes)?, &data, &out),
                _ => Err(Failure::Invalid(format!("{}: not a checkpoint", ckpt.display()))),
            }
        }
        Command::Eval { pred, gt, csv } => {
            let report = evaluate_dataset(&pred, &gt)?;
            print!("{}", report.to_table());
            if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
            }
            fs::write(&csv, report.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", csv.display())))?;
            Ok(())
        }
        Command::GenData { spec, n, seed, out } => {
            let spec = SyntheticSpec::load(&spec)?;
            let stems = data::generate_synthetic(&spec, n, seed, &out)?;
            log::info!("wrote {} samples to {}", stems.len(), out.display());
            Ok(())
        }
        Command::GradCheck { seed } => {
            let reports = gradcheck::run_suite(seed)?;
            println!(
                "{:<12}  {:>10}  {:>8}  {:>6}  worst",
                "module", "max_rel", "compared", "kinks"
            );
            for r in &reports {
                println!(
                    "{:<12}  {:>10.3e}  {:>8}  {:>6}  {}",
                    r.module,
                    r.max_rel_error,
                    r.coords - r.kinks,
                    r.kinks,
                    r.worst
                );
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.module).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

/// Float width recorded in a checkpoint header.
fn checkpoint_width(bytes: &[u8]) -> Option<u8> {
    (bytes.len() > MAGIC.len() && bytes.starts_with(MAGIC)).then(|| bytes[MAGIC.len()])
}

fn train_cmd<T: Float>(cfg: &Config, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path)?;
            if ckpt.config.model != cfg.model {
                return Err(Failure::Invalid(format!(
                    "{}: model configuration differs from --config",
                    path.display()
                )));
            }
            ckpt.resume()?
        }
        None => {
            let model = CaaiNet::<T>::new(&cfg.model, cfg.train.seed)?;
            let state = TrainState::new(&cfg.train, &model.params);
            (model, state)
        }
    };
    let samples = data::load_dataset::<T>(&DatasetLayout::new(data_dir), model.input_size(), true)?;
    log::info!(
        "training on {} samples, {} parameters, epochs {}..{}",
        samples.len(),
        model.params.numel(),
        state.epochs_done + 1,
        cfg.train.epochs
    );
    train::train(&mut model, &samples, &cfg.train, &mut state, |epoch, loss| {
        log::info!("epoch {epoch}: loss {loss:.6}");
    })?;
    Checkpoint::capture(cfg, &model, Some(&state)).save(out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn infer_cmd<T: Float>(ckpt: Checkpoint<T>, data_dir: &Path, out: &Path) -> Result<(), Failure> {
    let model = ckpt.model()?;
    let layout = DatasetLayout::new(data_dir);
    let size = model.input_size();
    for stem in layout.stems(false)? {
        let rgb = data::read_rgb::<T>(&data::find_image(&layout.rgb_dir(), &stem)?)?;
        let depth = data::read_depth::<T>(&data::find_image(&layout.depth_dir(), &stem)?)?;
        let (_, _, h, w) = rgb.dims4()?;
        let pred = model.predict(&resample_value(&rgb, size, size)?, &resample_value(&depth, size, size)?)?;
        let path = out.join(format!("{stem}.png"));
        data::write_gray(&path, &resample_value(&pred, h, w)?)?;
        log::debug!("wrote {}", path.display());
    }
    Ok(())
}
