use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saltseg::checkpoint::{load_checkpoint, Checkpoint};
use saltseg::data::{load_dataset, save_dataset, synth_generate, Dataset, NATIVE_HW};
use saltseg::error::{Result, SaltError};
use saltseg::image_io::{read_gray, write_gray, GrayImage};
use saltseg::loss::Reduction;
use saltseg::tensor::Tensor;
use saltseg::train::{
    cross_validate, evaluate, predict_probs, threshold_probs, train, write_loss_log, TrainConfig,
};

#[derive(Parser)]
#[command(name = "saltseg", about = "Seismic salt segmentation auto-encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct HyperArgs {
    /// Mini-batch size
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// ADADELTA update scale
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// ADADELTA decay
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    /// ADADELTA epsilon
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Seed for initialization, splitting and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the final-layer ReLU exactly as stated in the source table
    /// (forces every predicted pixel to 1)
    #[arg(long)]
    faithful_table1: bool,
    /// Average the loss over batch samples only instead of all pixels
    #[arg(long)]
    mean_over_batch: bool,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            lr_scale: self.lr,
            rho: self.rho,
            eps: self.eps,
            seed: self.seed,
            faithful_table1: self.faithful_table1,
            reduction: if self.mean_over_batch {
                Reduction::MeanBatch
            } else {
                Reduction::MeanAll
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory (images/ and masks/ subdirectories)
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// CSV loss log output path
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epochs between loss-log rows
        #[arg(long, default_value_t = 1)]
        log_every: u64,
        /// Epochs between checkpoint saves (0 = final only)
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict a mask for one 101x101 image
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask output (0/255 grayscale)
        #[arg(long)]
        out: PathBuf,
        /// Optional probability map output (8-bit grayscale)
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// k-fold cross-validation
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Warm-start checkpoint applied to every fold
        #[arg(long)]
        warm: Option<PathBuf>,
        #[arg(long)]
        epochs_per_fold: u64,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Generate a synthetic dataset
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure
    Gradcheck,
}

fn read_data_dir(root: &PathBuf) -> Result<Dataset> {
    load_dataset(&root.join("images"), &root.join("masks"))
}

fn tensor_to_gray(t: &Tensor, scale: f64) -> GrayImage {
    GrayImage {
        width: NATIVE_HW,
        height: NATIVE_HW,
        pixels: t
            .data()
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            epochs,
            train_fraction,
            hyper,
            out,
            log,
            log_every,
            checkpoint_every,
            resume,
        } => {
            let dataset = read_data_dir(&data)?;
            let cfg = TrainConfig {
                epochs,
                train_fraction,
                log_every,
                checkpoint_every,
                ..hyper.config()
            };
            let resumed: Option<Checkpoint> = match resume {
                Some(path) => {
                    let mut ckpt = load_checkpoint(&path)?;
                    ckpt.config = cfg.clone();
                    Some(ckpt)
                }
                None => None,
            };
            let (_, rows) = train(&dataset, &cfg, resumed.as_ref(), Some(&out))?;
            if let Some(log_path) = log {
                write_loss_log(&log_path, &rows)?;
            }
            if let Some(last) = rows.last() {
                println!(
                    "epoch {}: train_loss {:.6} test_loss {:.6}",
                    last.epoch, last.train_loss, last.test_loss
                );
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Predict {
            ckpt,
            image,
            out,
            prob,
        } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let (mut model, _) = checkpoint.restore()?;
            let img = read_gray(&image)?;
            if img.width != NATIVE_HW || img.height != NATIVE_HW {
                return Err(SaltError::Data(format!(
                    "{}: expected {NATIVE_HW}x{NATIVE_HW}, got {}x{}",
                    image.display(),
                    img.width,
                    img.height
                )));
            }
            let tensor = Tensor::new(
                vec![1, NATIVE_HW, NATIVE_HW],
                img.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            )?;
            let probs = predict_probs(&mut model, &tensor)?;
            let mask = threshold_probs(&probs);
            write_gray(&out, &tensor_to_gray(&mask, 255.0))?;
            if let Some(prob_path) = prob {
                write_gray(&prob_path, &tensor_to_gray(&probs, 255.0))?;
            }
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let dataset = read_data_dir(&data)?;
            let metrics = evaluate(&checkpoint, &dataset)?;
            println!(
                "mean_loss {:.6}\npixel_accuracy {:.6}\niou {:.6}",
                metrics.mean_loss, metrics.pixel_accuracy, metrics.iou
            );
            Ok(())
        }
        Command::Cv {
            data,
            k,
            warm,
            epochs_per_fold,
            hyper,
        } => {
            let dataset = read_data_dir(&data)?;
            let cfg = hyper.config();
            let warm_ckpt = warm.map(|p| load_checkpoint(&p)).transpose()?;
            let (losses, mean) =
                cross_validate(&dataset, k, warm_ckpt.as_ref(), epochs_per_fold, &cfg)?;
            for (i, l) in losses.iter().enumerate() {
                println!("fold {i}: {l:.6}");
            }
            println!("mean: {mean:.6}");
            Ok(())
        }
        Command::Synth { n, seed, out } => {
            let dataset = synth_generate(n, seed);
            save_dataset(&dataset, &out)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::Gradcheck => {
            let mut failed = false;
            for report in saltseg::gradcheck::run_all() {
                let status = if report.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<28} cases {:>4}  max rel err {:.3e} (tol {:.0e})",
                    report.name, report.cases, report.max_rel_err, report.tol
                );
                failed |= !report.passed();
            }
            if failed {
                return Err(SaltError::Numeric("gradient check failed".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; keep exit code 1 for usage errors
            // unless it is help/version output.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
