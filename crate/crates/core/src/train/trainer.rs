//! Training loops for the base variants and the stacked ensemble.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::loss::LossSpec;
use super::schedule::{Phase, ScheduleConfig, ScheduleState};
use crate::autodiff::Graph;
use crate::data::{
    encode_input, read_dayfile_with, window_at, AugmentConfig, CityEntry, DatasetManifest, DayFile,
    DirectionTable, WindowSample, WINDOW_FRAMES,
};
use crate::error::{Error, Result};
use crate::model::{build_model, ensemble_input, ModelConfig, TrainedModel, Variant};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Architecture; the variant field is overridden by the variant trained.
    pub model: ModelConfig,
    pub steps: usize,
    /// Windows per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Upper bound on validation windows per evaluation.
    pub val_windows: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub directions: DirectionTable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            steps: 1000,
            batch_size: 1,
            eval_every: 100,
            val_windows: 16,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            directions: DirectionTable::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for `height` x `width` data: the deepest UNet whose
    /// bottleneck is still at least 2 pixels on the short side (at most 7
    /// pools).
    pub fn desk(height: usize, width: usize) -> Self {
        let mut short = height.min(width);
        let mut depth = 0;
        while depth < 7 && short.div_ceil(2) >= 2 {
            short = short.div_ceil(2);
            depth += 1;
        }
        TrainConfig {
            model: ModelConfig::desk(height, width, depth),
            ..TrainConfig::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// City for single-city variants; defaults to the first manifest city.
    pub city: Option<String>,
    /// Written whenever validation improves.
    pub checkpoint: Option<PathBuf>,
    /// Append-only JSON-lines training log.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub phase: Phase,
    pub city: String,
    pub day: String,
    pub start: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn cities_seen(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.city.as_str()).collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.train_loss)
    }

    pub fn validation_losses(&self) -> Vec<f64> {
        self.entries.iter().filter_map(|e| e.val_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters at the best validation loss (final parameters if no
    /// evaluation ran).
    pub model: TrainedModel,
    pub log: TrainingLog,
    pub schedule: ScheduleState,
}

struct LabeledDay {
    label: String,
    day: DayFile,
}

/// Day files grouped by city, sampled city-first so every city gets an
/// equal share of windows.
struct DayPool {
    cities: Vec<Vec<LabeledDay>>,
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_days(
    manifest: &DatasetManifest,
    city: &CityEntry,
    paths: &[PathBuf],
    table: &DirectionTable,
) -> Result<Vec<LabeledDay>> {
    paths
        .iter()
        .map(|p| {
            let mut day = read_dayfile_with(manifest.resolve(p), table)?;
            day.city = city.name.clone();
            if day.num_frames() < WINDOW_FRAMES {
                return Err(Error::TooFewFrames {
                    needed: WINDOW_FRAMES,
                    available: day.num_frames(),
                });
            }
            Ok(LabeledDay {
                label: label_of(p),
                day,
            })
        })
        .collect()
}

impl DayPool {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<WindowSample> {
        let city = &self.cities[rng.gen_range(0..self.cities.len())];
        let entry = &city[rng.gen_range(0..city.len())];
        let start = rng.gen_range(0..=entry.day.num_frames() - WINDOW_FRAMES);
        window_at(&entry.day, &entry.label, start)
    }

    fn dims(&self) -> (usize, usize) {
        self.cities[0][0].day.frames.dims()
    }

    /// Up to `limit` windows with starts spread evenly over each day.
    fn spread(&self, limit: usize) -> Result<Vec<WindowSample>> {
        let days: Vec<&LabeledDay> = self.cities.iter().flatten().collect();
        let per_day = limit.div_ceil(days.len().max(1)).max(1);
        let mut out = Vec::new();
        for d in days {
            let last = d.day.num_frames() - WINDOW_FRAMES;
            let k = per_day.min(last + 1);
            for i in 0..k {
                let start = if k == 1 { last / 2 } else { i * last / (k - 1) };
                out.push(window_at(&d.day, &d.label, start)?);
                if out.len() == limit {
                    return Ok(out);
                }
            }
        }
        Ok(out)
    }
}

struct Pools {
    train: DayPool,
    validation: DayPool,
}

fn select_cities<'a>(
    manifest: &'a DatasetManifest,
    all: bool,
    city: Option<&str>,
) -> Result<Vec<&'a CityEntry>> {
    if manifest.cities.is_empty() {
        return Err(Error::Invalid("manifest lists no cities".into()));
    }
    if all {
        return Ok(manifest.cities.iter().collect());
    }
    match city {
        Some(name) => manifest
            .city(name)
            .map(|c| vec![c])
            .ok_or_else(|| Error::Invalid(format!("city {name} is not in the manifest"))),
        None => Ok(vec![&manifest.cities[0]]),
    }
}

fn load_pools(
    manifest: &DatasetManifest,
    cities: &[&CityEntry],
    table: &DirectionTable,
) -> Result<Pools> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for city in cities {
        let t = load_days(manifest, city, &city.train, table)?;
        if t.is_empty() {
            return Err(Error::Invalid(format!(
                "city {} has no training files",
                city.name
            )));
        }
        let v = load_days(manifest, city, &city.validation, table)?;
        train.push(t);
        if !v.is_empty() {
            validation.push(v);
        }
    }
    // Without validation files, validate on the training days.
    if validation.is_empty() {
        for city in cities {
            validation.push(load_days(manifest, city, &city.train, table)?);
        }
    }
    Ok(Pools {
        train: DayPool { cities: train },
        validation: DayPool { cities: validation },
    })
}

struct LogSink {
    file: Option<File>,
    log: TrainingLog,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = path
            .map(|p| {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))
            })
            .transpose()?;
        Ok(LogSink {
            file,
            log: TrainingLog::default(),
        })
    }

    fn push(&mut self, entry: LogEntry, path: Option<&Path>) -> Result<()> {
        if let (Some(f), Some(p)) = (self.file.as_mut(), path) {
            let line = serde_json::to_string(&entry).map_err(|e| Error::json(p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.log.entries.push(entry);
        Ok(())
    }
}

type InputFn<'a> = dyn FnMut(&WindowSample) -> Result<Tensor<f32>> + 'a;

struct Fit<'a> {
    cfg: &'a TrainConfig,
    loss: LossSpec,
    augment: bool,
    options: &'a TrainOptions,
}

fn mean_loss(
    model: &TrainedModel,
    loss: LossSpec,
    windows: &[WindowSample],
    input: &mut InputFn,
) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let y = model.forward(&input(w)?)?;
        total += loss.evaluate(&y, &w.target)? as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

impl Fit<'_> {
    fn run(
        &self,
        mut model: TrainedModel,
        pools: &Pools,
        seed: u64,
        input: &mut InputFn,
    ) -> Result<TrainingOutcome> {
        let cfg = self.cfg;
        if cfg.batch_size == 0 || cfg.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        let unet = model.unet()?;
        let validation = pools.validation.spread(cfg.val_windows.max(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fda_7a00);
        let mut schedule = ScheduleState::new(cfg.schedule);
        let mut optimizer = OptimizerState::<f32>::new(cfg.adam, schedule.lr());
        let log_path = self.options.log.as_deref();
        let mut sink = LogSink::open(log_path)?;
        let mut best: Option<TrainedModel> = None;

        for step in 0..cfg.steps {
            if schedule.phase == Phase::Stopped {
                break;
            }
            optimizer.lr = schedule.lr();
            let mut grad_sum: Option<ParamStore<f32>> = None;
            let mut loss_sum = 0.0;
            let mut last_source = None;
            for _ in 0..cfg.batch_size {
                let mut sample = pools.train.sample(&mut rng)?;
                if self.augment && cfg.augment.is_active() {
                    sample = cfg.augment.apply(sample, &cfg.directions, &mut rng)?;
                }
                let x = input(&sample)?;
                let mut g = Graph::new();
                let bound = model.params.bind(&mut g, true);
                let xv = g.constant(x);
                let y = unet.forward(&mut g, &bound, xv)?;
                let l = self.loss.build(&mut g, y, &sample.target)?;
                loss_sum += g.value(l).item()? as f64;
                let grads = g.backward(l)?;
                let mut store = ParamStore::new();
                for (name, var) in bound.iter() {
                    let grad = grads
                        .get(var)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(var).shape().to_vec()));
                    store.insert(name, grad)?;
                }
                grad_sum = Some(match grad_sum {
                    None => store,
                    Some(acc) => {
                        let mut merged = ParamStore::new();
                        for (name, a) in acc.iter() {
                            let b = store.get(name).expect("same parameter set");
                            merged.insert(
                                name,
                                crate::autodiff::kernels::zip_map(a, b, |x, y| x + y),
                            )?;
                        }
                        merged
                    }
                });
                last_source = Some(sample.source);
            }
            let mut grads = grad_sum.expect("batch_size > 0");
            if cfg.batch_size > 1 {
                let inv = 1.0 / cfg.batch_size as f32;
                grads = grads.map(|t| t.map(|v| v * inv));
            }
            let lr = optimizer.lr;
            adam_step(&mut model.params, &grads, &mut optimizer)?;

            let mut val_loss = None;
            if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
                let v = mean_loss(&model, self.loss, &validation, input)?;
                if schedule.update(v)? {
                    if let Some(path) = &self.options.checkpoint {
                        model.save(path)?;
                    }
                    best = Some(model.clone());
                }
                val_loss = Some(v);
            }
            let source = last_source.unwrap_or_default();
            sink.push(
                LogEntry {
                    step,
                    lr,
                    train_loss: loss_sum / cfg.batch_size as f64,
                    val_loss,
                    phase: schedule.phase,
                    city: source.city,
                    day: source.day,
                    start: source.start,
                },
                log_path,
            )?;
        }

        if best.is_none() {
            if let Some(path) = &self.options.checkpoint {
                model.save(path)?;
            }
        }
        Ok(TrainingOutcome {
            model: best.unwrap_or(model),
            log: sink.log,
            schedule,
        })
    }
}

fn check_dims(config: &ModelConfig, dims: (usize, usize)) -> Result<()> {
    if (config.height, config.width) != dims {
        return Err(Error::Config(format!(
            "model expects {}x{} frames, data is {}x{}",
            config.height, config.width, dims.0, dims.1
        )));
    }
    Ok(())
}

/// Train one base variant. `base3` samples windows from every manifest city;
/// the others use `options.city` (or the first city).
pub fn train_base(
    variant: Variant,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainingOutcome> {
    if variant == Variant::Ensemble {
        return Err(Error::Config("use train_ensemble for the ensemble".into()));
    }
    let cities = select_cities(manifest, variant == Variant::Base3, options.city.as_deref())?;
    let pools = load_pools(manifest, &cities, &cfg.directions)?;
    let config = cfg.model.with_variant(variant);
    check_dims(&config, pools.train.dims())?;
    let model = build_model(&config, seed)?;
    let table = cfg.directions.clone();
    let mut input = |w: &WindowSample| encode_input::<f32>(&w.input, &table);
    Fit {
        cfg,
        loss: LossSpec::for_variant(variant),
        augment: true,
        options,
    }
    .run(model, &pools, seed, &mut input)
}

pub fn validate_bases(bases: &[TrainedModel]) -> Result<ModelConfig> {
    if bases.len() != Variant::BASES.len() {
        return Err(Error::Config(format!(
            "ensemble needs 4 base models, got {}",
            bases.len()
        )));
    }
    for (model, expected) in bases.iter().zip(Variant::BASES) {
        if model.variant() != expected {
            return Err(Error::Config(format!(
                "base models must be ordered base1..base4; found {} where {expected} belongs",
                model.variant()
            )));
        }
    }
    let reference = bases[0].config.with_variant(Variant::Ensemble);
    for model in &bases[1..] {
        if model.config.with_variant(Variant::Ensemble) != reference {
            return Err(Error::Config(format!(
                "{} architecture differs from base1",
                model.variant()
            )));
        }
    }
    Ok(reference)
}

/// Frozen base outputs for one window, stacked into the 30-channel
/// ensemble input.
pub fn stacked_input(
    bases: &[TrainedModel],
    window: &WindowSample,
    table: &DirectionTable,
) -> Result<Tensor<f32>> {
    let x = encode_input::<f32>(&window.input, table)?;
    let outputs = bases
        .iter()
        .map(|b| b.forward(&x))
        .collect::<Result<Vec<_>>>()?;
    ensemble_input(&outputs)
}

/// Train the ensemble on top of frozen bases (ordered base1..base4). The
/// ensemble reuses base1's architecture with a 30-channel input and is
/// trained with plain MSE on base1's city.
pub fn train_ensemble(
    bases: &[TrainedModel],
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainingOutcome> {
    let config = validate_bases(bases)?;
    let cities = select_cities(manifest, false, options.city.as_deref())?;
    let pools = load_pools(manifest, &cities, &cfg.directions)?;
    check_dims(&config, pools.train.dims())?;
    let model = build_model(&config, seed)?;
    let table = cfg.directions.clone();
    let mut cache: HashMap<crate::data::WindowSource, Tensor<f32>> = HashMap::new();
    let mut input = |w: &WindowSample| -> Result<Tensor<f32>> {
        if let Some(t) = cache.get(&w.source) {
            return Ok(t.clone());
        }
        let t = stacked_input(bases, w, &table)?;
        cache.insert(w.source.clone(), t.clone());
        Ok(t)
    };
    Fit {
        cfg,
        loss: LossSpec::for_variant(Variant::Ensemble),
        augment: false,
        options,
    }
    .run(model, &pools, seed, &mut input)
}
