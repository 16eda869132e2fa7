//! Command-line front end. Exit status: 0 success, 1 usage, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vseg_core::data::{generate_phantom, split, Sample, SplitSpec, SynthConfig};
use vseg_core::loss::{argmax_labels, FocalConfig};
use vseg_core::model::{predict_logits, Variant};
use vseg_core::optim::AdamConfig;
use vseg_core::train::{evaluate, fit, StopReason, TrainConfig};
use vseg_core::ModelSpec;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::compare::{run_comparison, CompareConfig, WallClock};
use crate::csvlog::write_log;
use crate::dataset::{load_dataset, resize_samples, write_dataset};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::pgm;
use crate::report::{comparison_table, eval_table};

#[derive(Debug, Parser)]
#[command(name = "vseg", version, about = "Cardiac MRI segmentation with U-Net derivatives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic short-axis phantom dataset.
    Synth(SynthArgs),
    /// Train one variant and write a checkpoint plus a CSV epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one P5 image and write the label mask as P5.
    Predict(PredictArgs),
    /// Serve checkpoints over HTTP.
    Serve(ServeArgs),
    /// Train several variants over several seeds and print the comparison table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub extent: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Fraction of the dataset held out for testing.
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    /// Fraction of the remainder used for early stopping.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        SplitSpec {
            test_fraction: self.test_fraction,
            val_fraction: self.val_fraction,
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    /// Images are resized to this square extent.
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    /// Dropout rate of the deepest encoder block and the bottleneck.
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
}

impl ModelArgs {
    fn spec(&self, variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            depth: self.depth,
            base_width: self.base_width,
            input_size: self.input_size,
            dropout: self.dropout,
            ..ModelSpec::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            seed,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            focal: FocalConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the epoch log goes next to it with a `.csv` extension.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[command(flatten)]
    pub split_args: SplitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant,
          default_value = "unet,conv_unet,mnet,attention_unet,attention_mnet")]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: vseg_core::Error| e.to_string())
}

/// Parse `args` (program name first) and run; returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out, err),
        Command::Eval(a) => eval(&a, out),
        Command::Predict(a) => predict(&a, out),
        Command::Serve(a) => serve(&a),
        Command::Compare(a) => compare(&a, out, err),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let samples = generate_phantom(&SynthConfig {
        count: a.count,
        extent: a.extent,
        seed: a.seed,
        ..SynthConfig::default()
    })
    .map_err(|e| Error::Usage(e.to_string()))?;
    let ids = write_dataset(&a.out, &samples)?;
    writeln!(out, "wrote {} samples to {}", ids.len(), a.out.display()).map_err(io_out)
}

fn load_splits(data: &Path, input_size: usize, s: &SplitArgs) -> Result<vseg_core::data::Splits<Sample>> {
    let ds = load_dataset(data)?;
    let samples = resize_samples(&ds.samples, input_size)?;
    split(&samples, &s.spec()).map_err(|e| Error::Usage(e.to_string()))
}

fn nonempty<'a>(name: &str, s: &'a [Sample]) -> Result<&'a [Sample]> {
    if s.is_empty() {
        return Err(Error::Data(format!("the {name} split is empty; use a larger dataset or other fractions")));
    }
    Ok(s)
}

fn usage(e: vseg_core::Error) -> Error {
    Error::Usage(e.to_string())
}

fn train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let spec = a.model.spec(a.variant);
    spec.validate().map_err(usage)?;
    let cfg = a.optim.config(a.seed);
    cfg.validate(&spec).map_err(usage)?;
    let splits = load_splits(&a.data, spec.input_size, &a.split)?;
    let (tr, va) = (nonempty("train", &splits.train)?, nonempty("validation", &splits.val)?);
    writeln!(
        err,
        "training {} on {} samples, validating on {}",
        spec.variant,
        tr.len(),
        va.len()
    )
    .map_err(io_out)?;
    let outcome = fit::<f32>(&spec, tr, va, &cfg, &mut WallClock::new(), &mut |log| {
        let _ = writeln!(
            err,
            "epoch {:>4}  train loss {:.5} dsc {:.4}  val loss {:.5} acc {:.4} dsc {:.4}  ({:.1}s)",
            log.epoch, log.train_loss, log.train_dsc, log.val_loss, log.val_acc, log.val_dsc, log.seconds
        );
    })?;
    let log_path = a.out.with_extension("csv");
    write_log(&outcome.logs, &log_path)?;
    if let StopReason::Diverged(e) = outcome.stop {
        if outcome.best_epoch.is_some() {
            save_checkpoint(&spec, &outcome.params, &a.out)?;
            writeln!(err, "kept the epoch {} parameters in {}", outcome.best_epoch.unwrap_or(0), a.out.display())
                .map_err(io_out)?;
        }
        return Err(e.into());
    }
    save_checkpoint(&spec, &outcome.params, &a.out)?;
    writeln!(
        out,
        "best epoch {} (val DSC {:.4}); checkpoint {}, log {}",
        outcome.best_epoch.unwrap_or(0),
        outcome.best_val_dsc,
        a.out.display(),
        log_path.display()
    )
    .map_err(io_out)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, params) = load_checkpoint(&a.ckpt)?;
    let samples = match a.split {
        SplitName::All => resize_samples(&load_dataset(&a.data)?.samples, spec.input_size)?,
        other => {
            let s = load_splits(&a.data, spec.input_size, &a.split_args)?;
            match other {
                SplitName::Train => s.train,
                SplitName::Val => s.val,
                _ => s.test,
            }
        }
    };
    let samples = nonempty("evaluation", &samples)?;
    let m = evaluate(&spec, &params, samples, &FocalConfig {
        gamma: 2.0,
        alpha: vec![0.25; spec.num_classes],
    })?;
    write!(out, "{}", eval_table(spec.variant.display_name(), &m)).map_err(io_out)
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, params) = load_checkpoint(&a.ckpt)?;
    let img = pgm::load_image(&a.input)?;
    let x = vseg_core::data::resize_image(&img, spec.input_size)?.to_tensor::<f32>();
    let logits = predict_logits(&spec, &params, &x)?;
    let mask = argmax_labels(&logits, 0)?;
    write_atomic(&a.out, &pgm::Graymap::from_mask(&mask).encode())?;
    writeln!(
        out,
        "{}x{} mask ({}x{} input) written to {}",
        mask.width(),
        mask.height(),
        img.width(),
        img.height(),
        a.out.display()
    )
    .map_err(io_out)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(&a.models, e))?;
    rt.block_on(crate::service::serve(a.bind, &a.models))
}

fn compare(a: &CompareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if a.variants.is_empty() || a.seeds.is_empty() {
        return Err(Error::Usage("compare needs at least one variant and one seed".into()));
    }
    let spec = a.model.spec(Variant::Unet);
    for &v in &a.variants {
        ModelSpec { variant: v, ..spec }.validate().map_err(usage)?;
    }
    let train = a.optim.config(0);
    train.validate(&spec).map_err(usage)?;
    let splits = load_splits(&a.data, spec.input_size, &a.split)?;
    let cfg = CompareConfig {
        variants: a.variants.clone(),
        seeds: a.seeds.clone(),
        spec,
        train,
    };
    let c = run_comparison(
        nonempty("train", &splits.train)?,
        nonempty("validation", &splits.val)?,
        nonempty("test", &splits.test)?,
        &cfg,
        &mut |r| {
            let _ = writeln!(
                err,
                "{} seed {}: {} epochs, best {:?}, val DSC {:.4}, test DSC {:.4} ({:.0}s)",
                r.variant,
                r.seed,
                r.logs.len(),
                r.best_epoch,
                r.val.soft_dsc,
                r.test.soft_dsc,
                r.seconds
            );
        },
    )?;
    let table = comparison_table(&c.rows());
    if let Some(p) = &a.out {
        write_atomic(p, table.as_bytes())?;
    }
    write!(out, "{table}").map_err(io_out)
}
