//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    canonical_split, default_test_starts, generate_synthetic_city, read_dayfile, read_frames_file,
    write_dayfile, write_frames_file, CityEntry, DatasetManifest, DirectionTable, FrameStack,
    TestEntry,
};
use crate::error::{Error, Result};
use crate::eval::{
    predict_file, split_windows, truth_windows, zero_baseline, CityReport, EvaluationReport,
    Predictor,
};
use crate::model::{shape_trace, ModelConfig, TrainedModel, Variant};
use crate::train::{train_base, train_ensemble, TrainConfig, TrainOptions, TrainingOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "traffic-unet",
    version,
    about = "Dense-block UNet traffic map forecaster"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic city and add it to the directory's manifest.
    Synth(SynthArgs),
    /// Train one base variant.
    Train(TrainArgs),
    /// Train the stacked ensemble on four frozen base checkpoints.
    EnsembleTrain(EnsembleArgs),
    /// Write predictions for window starts of a day file.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Score of the all-zero prediction.
    Baseline(BaselineArgs),
    /// Print the per-stage output shapes of the model.
    Shapes(ShapesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub days: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 14)]
    pub width: usize,
    #[arg(long, default_value = "synth")]
    pub city: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCommon {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON training config; desk defaults sized to the data otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// City to train on (single-city variants); first manifest city by default.
    #[arg(long)]
    pub city: Option<String>,
    /// JSON-lines log; `<out>.log.jsonl` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Variant,
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// base1..base4 checkpoints, comma separated, in order.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub bases: Vec<PathBuf>,
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Day file to predict from.
    #[arg(long)]
    pub input: PathBuf,
    /// Window starts, comma separated; every 48 frames by default.
    #[arg(long, value_delimiter = ',')]
    pub starts: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// base1..base4 checkpoints when `--model` is an ensemble.
    #[arg(long, value_delimiter = ',')]
    pub bases: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth day file.
    #[arg(long)]
    pub truth: PathBuf,
    /// Window starts the predictions were made for. Without starts, a
    /// prediction with as many frames as the truth is compared frame by
    /// frame; otherwise every 48 frames is assumed.
    #[arg(long, value_delimiter = ',')]
    pub starts: Vec<usize>,
    /// Report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// City label; the truth file stem by default.
    #[arg(long)]
    pub city: Option<String>,
    /// Model label.
    #[arg(long, default_value = "prediction")]
    pub model: String,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub truth: PathBuf,
    /// Window starts; all frames are scored when omitted.
    #[arg(long, value_delimiter = ',')]
    pub starts: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    #[arg(long, default_value_t = 495)]
    pub height: usize,
    #[arg(long, default_value_t = 436)]
    pub width: usize,
    /// Pooling steps (the model has one more dense block than this).
    #[arg(long, default_value_t = 7)]
    pub stages: usize,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::EnsembleTrain(a) => ensemble_train(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Baseline(a) => baseline(a, out),
        Command::Shapes(a) => shapes(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let days = generate_synthetic_city(&a.city, a.seed, a.days, a.height, a.width)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut paths = Vec::with_capacity(days.len());
    for (i, day) in days.iter().enumerate() {
        let name = PathBuf::from(format!("{}_day{i:03}.t4c", a.city));
        write_dayfile(day, a.out.join(&name))?;
        paths.push(name);
    }
    let manifest_path = a.out.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        DatasetManifest::load(&manifest_path)?
    } else {
        DatasetManifest::new(&a.out)
    };
    let (n_train, n_val, _) = canonical_split(paths.len());
    let test = paths[n_train + n_val..]
        .iter()
        .zip(&days[n_train + n_val..])
        .map(|(p, d)| TestEntry {
            path: p.clone(),
            starts: default_test_starts(d.num_frames()),
        })
        .collect();
    manifest.upsert(CityEntry {
        name: a.city.clone(),
        validation: paths[n_train..n_train + n_val].to_vec(),
        train: paths[..n_train].to_vec(),
        test,
    });
    manifest.validate()?;
    manifest.save(&manifest_path)?;
    emit(
        out,
        format_args!(
            "wrote {} day files for {} ({}x{}) to {}",
            days.len(),
            a.city,
            a.height,
            a.width,
            a.out.display()
        ),
    )
}

fn train_config(common: &TrainCommon, manifest: &DatasetManifest) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let city = match &common.city {
                Some(name) => manifest.city(name),
                None => manifest.cities.first(),
            }
            .ok_or_else(|| Error::Invalid("manifest has no matching city".into()))?;
            let first = city.train.first().ok_or_else(|| {
                Error::Invalid(format!("city {} has no training files", city.name))
            })?;
            let day = read_frames_file(manifest.resolve(first))?;
            TrainConfig::desk(day.height(), day.width())
        }
    };
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
    Ok(cfg)
}

fn default_log(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

fn options(common: &TrainCommon) -> TrainOptions {
    TrainOptions {
        city: common.city.clone(),
        checkpoint: Some(common.out.clone()),
        log: Some(
            common
                .log
                .clone()
                .unwrap_or_else(|| default_log(&common.out)),
        ),
    }
}

fn report_training(out: &mut dyn Write, outcome: &TrainingOutcome, path: &Path) -> Result<()> {
    let last = outcome.log.entries.last();
    emit(
        out,
        format_args!(
            "{}: {} steps, final train loss {:.6e}, best validation loss {:.6e}, phase {}; checkpoint {}",
            outcome.model.variant(),
            outcome.log.entries.len(),
            last.map_or(f64::NAN, |e| e.train_loss),
            outcome.schedule.best,
            outcome.schedule.phase,
            path.display()
        ),
    )
}

fn fresh_log(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    if a.variant == Variant::Ensemble {
        return Err(Error::Config("use ensemble-train for the ensemble".into()));
    }
    let manifest = DatasetManifest::load(&a.common.manifest)?;
    let cfg = train_config(&a.common, &manifest)?;
    let opts = options(&a.common);
    fresh_log(opts.log.as_deref().expect("set above"))?;
    let outcome = train_base(a.variant, &manifest, &cfg, a.common.seed, &opts)?;
    outcome.model.save(&a.common.out)?;
    report_training(out, &outcome, &a.common.out)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<TrainedModel>> {
    paths.iter().map(TrainedModel::load).collect()
}

fn ensemble_train(a: EnsembleArgs, out: &mut dyn Write) -> Result<()> {
    let bases = load_models(&a.bases)?;
    let manifest = DatasetManifest::load(&a.common.manifest)?;
    let cfg = train_config(&a.common, &manifest)?;
    let opts = options(&a.common);
    fresh_log(opts.log.as_deref().expect("set above"))?;
    let outcome = train_ensemble(&bases, &manifest, &cfg, a.common.seed, &opts)?;
    outcome.model.save(&a.common.out)?;
    report_training(out, &outcome, &a.common.out)
}

fn predictor(model: &Path, bases: &[PathBuf]) -> Result<Predictor> {
    let model = TrainedModel::load(model)?;
    if model.variant() == Variant::Ensemble {
        Predictor::ensemble(load_models(bases)?, model)
    } else {
        if !bases.is_empty() {
            return Err(Error::Config(
                "--bases only applies to ensemble checkpoints".into(),
            ));
        }
        Predictor::single(model)
    }
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let p = predictor(&a.model, &a.bases)?;
    let day = read_dayfile(&a.input)?;
    let starts = if a.starts.is_empty() {
        default_test_starts(day.num_frames())
    } else {
        a.starts
    };
    let frames = predict_file(&p, &day.frames, &starts, &DirectionTable::default())?;
    write_frames_file(&frames, &a.out)?;
    emit(
        out,
        format_args!(
            "{}: {} windows -> {}",
            p.name(),
            starts.len(),
            a.out.display()
        ),
    )
}

fn windows_for(
    truth: &FrameStack,
    pred_frames: Option<usize>,
    starts: &[usize],
) -> Result<Vec<FrameStack>> {
    if !starts.is_empty() {
        return truth_windows(truth, starts);
    }
    match pred_frames {
        Some(n) if n == truth.count() => split_windows(truth),
        Some(_) => truth_windows(truth, &default_test_starts(truth.count())),
        None => split_windows(truth),
    }
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let pred = read_frames_file(&a.pred)?;
    let truth = read_frames_file(&a.truth)?;
    let truth_w = windows_for(&truth, Some(pred.count()), &a.starts)?;
    let pred_w = split_windows(&pred)?;
    let city = a.city.unwrap_or_else(|| file_label(&a.truth));
    let report =
        EvaluationReport::new(vec![CityReport::compute(city, a.model, &pred_w, &truth_w)?])?;
    if let Some(path) = &a.out {
        report.save(path)?;
    }
    emit(out, &report)
}

fn baseline(a: BaselineArgs, out: &mut dyn Write) -> Result<()> {
    let truth = read_frames_file(&a.truth)?;
    let windows = if a.starts.is_empty() {
        vec![truth]
    } else {
        truth_windows(&truth, &a.starts)?
    };
    emit(out, format_args!("{:.9e}", zero_baseline(&windows)?))
}

fn shapes(a: ShapesArgs, out: &mut dyn Write) -> Result<()> {
    let config = if (a.height, a.width, a.stages) == (495, 436, 7) {
        ModelConfig::default()
    } else {
        ModelConfig {
            height: a.height,
            width: a.width,
            depth: a.stages,
            stage_widths: ModelConfig::default_stage_widths(a.stages),
            ..ModelConfig::default()
        }
    };
    emit(out, shape_trace(&config)?)
}
