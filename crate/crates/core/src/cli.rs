//! Command-line front end: `generate`, `train`, `retrain`, `evaluate`.
//!
//! Exit codes: 0 on success, 1 for runtime or data errors, 2 for usage
//! errors (including out-of-range parameters).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dataset::{generate_dataset, load_dataset, save_dataset, split, Dataset, DatasetSpec, Interval};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{input_sigma, Checkpoint, ChannelEstimator};
use crate::nn::{Architecture, TrainConfig, TrainReport};
use crate::report::{emit_eval_report, emit_iteration_report, evaluate};
use crate::retrain::{retrain_loop, validation_mse, AugmentationMode, RetrainConfig};
use crate::seed;
use crate::uncertainty::McConfig;

pub const MODEL_FILE: &str = "model.nnck";
pub const TRAIN_REPORT_CSV: &str = "train_report.csv";
pub const TRAIN_FRACTION: f64 = 0.8;

/// Table 1 bounds enforced on the command line.
pub const DELAY_SPREAD_BOUNDS_NS: Interval = Interval::new(1.0, 300.0);
pub const DOPPLER_BOUNDS_HZ: Interval = Interval::new(5.0, 400.0);

/// Salt mixed into the dataset seed to draw the held-out test set.
const HELD_OUT_SALT: u64 = 0x7E57;

#[derive(Debug, Parser)]
#[command(name = "chanest", version, about = "CNN channel estimation with MC-dropout uncertainty and adversarial retraining")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of pilot estimates and perfect channel grids.
    Generate(GenerateArgs),
    /// Train the estimator on an 80/20 split of a dataset.
    Train(TrainArgs),
    /// Uncertainty-aware adversarial retraining of a trained model.
    Retrain(RetrainArgs),
    /// Compare the model against the pilot baseline on a fresh test set.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range(pub Interval);

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        let (lo, hi) = match s.split_once(':') {
            Some((lo, hi)) => (parse(lo)?, parse(hi)?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(format!("`{s}` is not a finite LO:HI range with LO <= HI"));
        }
        Ok(Range(Interval::new(lo, hi)))
    }
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Master seed.
    #[arg(long, env = "CHANEST_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 256)]
    pub num_examples: usize,
    /// SNR range in dB, LO:HI.
    #[arg(long, default_value = "0:10")]
    pub snr_range: Range,
    /// Delay spread range in ns, LO:HI, within 1:300.
    #[arg(long, default_value = "1:300")]
    pub delay_spread: Range,
    /// Maximum Doppler range in Hz, LO:HI, within 5:400.
    #[arg(long, default_value = "5:400")]
    pub doppler: Range,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
}

impl TrainOpts {
    fn config(&self, seed: u64, default_epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs.unwrap_or(default_epochs),
            early_stop_patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.nnck and train_report.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Network layers: `compact`, `wide`, or a list such as
    /// `conv5x5:16,relu,dropout:0.1,conv5x5:2`.
    #[arg(long, default_value = "compact")]
    pub arch: String,
}

#[derive(Debug, Args)]
pub struct McOpts {
    /// Monte-Carlo dropout passes per example.
    #[arg(long, default_value_t = 32)]
    pub mc_passes: usize,
    /// Confidence-interval significance level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

impl McOpts {
    fn config(&self, base_seed: u64) -> McConfig {
        McConfig { num_passes: self.mc_passes, base_seed, alpha: self.alpha }
    }
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for the retrained model.nnck and iterations.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub mc: McOpts,
    #[arg(long, default_value_t = 5)]
    pub max_iterations: usize,
    /// Stop once validation MSE falls below this.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Fraction of the validation set treated as highly uncertain.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    /// FGSM step in grid units (default 0.05 x input std).
    #[arg(long)]
    pub fgsm_epsilon: Option<f64>,
    /// `adversarial` (train + FGSM examples) or `literal` (train + validation).
    #[arg(long, default_value = "adversarial")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory; its spec is reused for the held-out set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for eval.csv and the scatter plot.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub mc: McOpts,
    /// Size of the freshly generated held-out set.
    #[arg(long, default_value_t = 64)]
    pub num_examples: usize,
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Validation errors in user-supplied settings are usage errors.
fn check(r: Result<()>) -> std::result::Result<(), Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Retrain(a) => cmd_retrain(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn within(r: Range, bounds: Interval, flag: &str, unit: &str) -> std::result::Result<Interval, Failure> {
    if !(bounds.contains(r.0.lo) && bounds.contains(r.0.hi)) {
        return usage(format!(
            "--{flag} {}:{} outside the supported range {}:{} {unit}",
            r.0.lo, r.0.hi, bounds.lo, bounds.hi
        ));
    }
    Ok(r.0)
}

pub fn cmd_generate(a: &GenerateArgs) -> std::result::Result<(), Failure> {
    let spec = DatasetSpec {
        num_examples: a.num_examples,
        delay_spread_ns: within(a.delay_spread, DELAY_SPREAD_BOUNDS_NS, "delay-spread", "ns")?,
        max_doppler_hz: within(a.doppler, DOPPLER_BOUNDS_HZ, "doppler", "Hz")?,
        snr_db: a.snr_range.0,
        master_seed: a.seed.seed,
        ..DatasetSpec::default()
    };
    check(spec.validate())?;
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} examples ({}x{} grids) to {}",
        ds.len(),
        spec.ofdm.num_subcarriers,
        spec.ofdm.symbols_per_slot,
        a.out.display()
    );
    println!(
        "delay spread {}:{} ns, Doppler {}:{} Hz, SNR {}:{} dB, seed {}",
        spec.delay_spread_ns.lo,
        spec.delay_spread_ns.hi,
        spec.max_doppler_hz.lo,
        spec.max_doppler_hz.hi,
        spec.snr_db.lo,
        spec.snr_db.hi,
        spec.master_seed
    );
    Ok(())
}

fn load_split(data: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    let ds = load_dataset(data)?;
    split(&ds, TRAIN_FRACTION, seed)
}

fn train_report_csv(r: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    s.push_str(&format!("0,,{}\n", r.initial_val_loss));
    for (i, (t, v)) in r.train_loss.iter().zip(&r.val_loss).enumerate() {
        s.push_str(&format!("{},{},{}\n", i + 1, t, v));
    }
    s
}

pub fn cmd_train(a: &TrainArgs) -> std::result::Result<(), Failure> {
    let arch = Architecture::resolve(&a.arch).map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = a.train.config(a.seed.seed, TrainConfig::default().max_epochs);
    check(cfg.validate())?;
    println!(
        "learning rate {}, batch size {}, max epochs {}, patience {}",
        cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.early_stop_patience
    );
    let (train, val) = load_split(&a.data, a.seed.seed)?;
    let (rows, cols) = train.examples[0].input.shape();
    let mut est = ChannelEstimator::new(&arch, rows, cols, a.seed.seed)?;
    est.sigma = input_sigma(&train.examples)?;
    println!("architecture {arch}, {} parameters, {} train / {} validation", est.net.num_params(), train.len(), val.len());
    let (mut est, report) = est.train(&train.examples, &val.examples, &cfg)?;
    est.net.quantize_f32();
    println!(
        "stopped after epoch {}, best epoch {}, validation loss {:.6} -> {:.6} ({:.1} s)",
        report.stopped_epoch,
        report.best_epoch,
        report.initial_val_loss,
        report.best_val_loss(),
        report.wall_time_s
    );
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    Checkpoint { estimator: est, train_config: cfg, seed: a.seed.seed }.save(&a.out.join(MODEL_FILE))?;
    write_atomic(&a.out.join(TRAIN_REPORT_CSV), train_report_csv(&report).as_bytes())?;
    println!("wrote {}", a.out.join(MODEL_FILE).display());
    Ok(())
}

pub fn cmd_retrain(a: &RetrainArgs) -> std::result::Result<(), Failure> {
    let mode: AugmentationMode = a.mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let cfg = RetrainConfig {
        max_iterations: a.max_iterations,
        tolerance: a.tolerance,
        uncertain_fraction: a.fraction,
        fgsm_epsilon: a.fgsm_epsilon,
        mode,
        train: a.train.config(a.seed.seed, RetrainConfig::default().train.max_epochs),
    };
    check(cfg.validate())?;
    let mc = a.mc.config(seed::substream(a.seed.seed, seed::Stream::Dropout));
    check(mc.validate())?;
    if mc.num_passes < 2 {
        return usage("--mc-passes must be at least 2 for uncertainty scoring");
    }
    let ck = Checkpoint::load(&a.model)?;
    let (train, val) = load_split(&a.data, a.seed.seed)?;
    println!(
        "mode {mode}, {} iterations max, fraction {}, tolerance {}, {} MC passes",
        cfg.max_iterations, cfg.uncertain_fraction, cfg.tolerance, mc.num_passes
    );
    let (mut est, records) = retrain_loop(&ck.estimator, &train.examples, &val.examples, &cfg, &mc)?;
    for r in &records {
        println!(
            "iteration {}: validation MSE {:.6} -> {:.6}, mean uncertainty {:.4} -> {:.4}, {} selected",
            r.iteration,
            r.val_mse_before,
            r.val_mse_after,
            r.mean_uncertainty_before,
            r.mean_uncertainty_after,
            r.selected.len()
        );
    }
    est.net.quantize_f32();
    println!("final validation MSE {:.6}", validation_mse(&est, &val.examples)?);
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    Checkpoint { estimator: est, train_config: cfg.train.clone(), seed: a.seed.seed }.save(&a.out.join(MODEL_FILE))?;
    emit_iteration_report(&records, &a.out)?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> std::result::Result<(), Failure> {
    let mc = a.mc.config(seed::substream(a.seed.seed, seed::Stream::Dropout));
    check(mc.validate())?;
    if a.num_examples == 0 {
        return usage("--num-examples must be at least 1");
    }
    let ck = Checkpoint::load(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let spec = DatasetSpec {
        num_examples: a.num_examples,
        master_seed: seed::derive(ds.spec.master_seed ^ a.seed.seed, HELD_OUT_SALT),
        ..ds.spec
    };
    let test = generate_dataset(&spec)?;
    if mc.num_passes < 2 {
        eprintln!("warning: one MC pass gives no variance; uncertainty column is all zeros");
    }
    let result = evaluate(&ck.estimator, &test.examples, &mc)?;
    emit_eval_report(&result, &a.out)?;
    println!(
        "held-out set of {}: baseline MSE {:.6}, NN MSE {:.6} ({:+.1}%)",
        result.rows.len(),
        result.mean_baseline_mse,
        result.mean_nn_mse,
        -100.0 * result.improvement()
    );
    match result.uncertainty_error_r {
        Some(r) => println!("Pearson r(uncertainty, NN error) = {r:.4}"),
        None => println!("Pearson r(uncertainty, NN error) undefined"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
