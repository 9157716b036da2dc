//! Normalized MSE scoring, the all-zero baseline, prediction files and
//! evaluation reports.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    decode_output, encode_input, DirectionTable, FrameStack, CHANNELS, INPUT_FRAMES, TARGET_FRAMES,
    WINDOW_FRAMES,
};
use crate::error::{Error, Result};
use crate::model::{ensemble_input, TrainedModel, Variant};
use crate::train::validate_bases;

/// Published real-data scores, carried in reports for reference only.
pub const REFERENCE_ZERO_BASELINE: f64 = 2.16957e-2;
pub const REFERENCE_BASE1: f64 = 9.02919e-3;
pub const REFERENCE_ENSEMBLE: f64 = 9.00773e-3;

const BYTE_SCALE_SQ: f64 = 255.0 * 255.0;

fn check_pairs(pred: &[FrameStack], truth: &[FrameStack]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "prediction has {} windows, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no windows to evaluate".into()));
    }
    let mut elements = 0;
    for (p, t) in pred.iter().zip(truth) {
        let (ps, ts) = (
            [p.count(), p.height(), p.width()],
            [t.count(), t.height(), t.width()],
        );
        if ps != ts {
            return Err(Error::shape("evaluate", &ps, &ts));
        }
        elements += t.data().len();
    }
    Ok(elements)
}

fn squared_error_sums(pred: &[FrameStack], truth: &[FrameStack]) -> [u64; CHANNELS] {
    let mut sums = [0u64; CHANNELS];
    for (p, t) in pred.iter().zip(truth) {
        for (i, (&a, &b)) in p.data().iter().zip(t.data()).enumerate() {
            let d = a.abs_diff(b) as u64;
            sums[i % CHANNELS] += d * d;
        }
    }
    sums
}

/// Mean of `((pred - truth) / 255)^2` over every byte of every window.
/// Squared byte differences are summed exactly in integers, so the result is
/// independent of window order and symmetric in its arguments.
pub fn evaluate(pred: &[FrameStack], truth: &[FrameStack]) -> Result<f64> {
    let elements = check_pairs(pred, truth)?;
    let total: u64 = squared_error_sums(pred, truth).iter().sum();
    Ok(total as f64 / (BYTE_SCALE_SQ * elements as f64))
}

/// Per-channel (volume, speed, direction) normalized MSE.
pub fn channel_breakdown(pred: &[FrameStack], truth: &[FrameStack]) -> Result<[f64; CHANNELS]> {
    let elements = check_pairs(pred, truth)?;
    let per_channel = (elements / CHANNELS) as f64;
    Ok(squared_error_sums(pred, truth).map(|s| s as f64 / (BYTE_SCALE_SQ * per_channel)))
}

/// Score of predicting zero everywhere.
pub fn zero_baseline(truth: &[FrameStack]) -> Result<f64> {
    let zeros: Vec<FrameStack> = truth
        .iter()
        .map(|t| FrameStack::zeros(t.count(), t.height(), t.width()))
        .collect();
    evaluate(&zeros, truth)
}

/// Ground-truth target frames for each window start.
pub fn truth_windows(day: &FrameStack, starts: &[usize]) -> Result<Vec<FrameStack>> {
    starts
        .iter()
        .map(|&s| {
            if s + WINDOW_FRAMES > day.count() {
                return Err(Error::TooFewFrames {
                    needed: s + WINDOW_FRAMES,
                    available: day.count(),
                });
            }
            day.slice(s + INPUT_FRAMES, TARGET_FRAMES)
        })
        .collect()
}

/// Split a prediction file into its 3-frame windows.
pub fn split_windows(frames: &FrameStack) -> Result<Vec<FrameStack>> {
    if !frames.count().is_multiple_of(TARGET_FRAMES) {
        return Err(Error::Format {
            what: "prediction file",
            detail: format!(
                "{} frames is not a multiple of {TARGET_FRAMES}",
                frames.count()
            ),
        });
    }
    (0..frames.count() / TARGET_FRAMES)
        .map(|k| frames.slice(k * TARGET_FRAMES, TARGET_FRAMES))
        .collect()
}

/// A frame-predicting model: a single base model or a stacked ensemble.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(TrainedModel),
    Ensemble {
        bases: Vec<TrainedModel>,
        ensemble: TrainedModel,
    },
}

impl Predictor {
    pub fn single(model: TrainedModel) -> Result<Self> {
        match model.variant() {
            Variant::Base4 => Err(Error::Config(
                "base4 predicts have-data logits, not frames".into(),
            )),
            Variant::Ensemble => Err(Error::Config(
                "an ensemble checkpoint needs its four base models".into(),
            )),
            _ => Ok(Predictor::Single(model)),
        }
    }

    pub fn ensemble(bases: Vec<TrainedModel>, ensemble: TrainedModel) -> Result<Self> {
        if ensemble.variant() != Variant::Ensemble {
            return Err(Error::Config(format!(
                "{} is not an ensemble checkpoint",
                ensemble.variant()
            )));
        }
        let config = validate_bases(&bases)?;
        if (config.height, config.width) != (ensemble.config.height, ensemble.config.width) {
            return Err(Error::Config("ensemble and base frame dims differ".into()));
        }
        Ok(Predictor::Ensemble { bases, ensemble })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Single(m) => m.variant().name(),
            Predictor::Ensemble { .. } => Variant::Ensemble.name(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let config = match self {
            Predictor::Single(m) => &m.config,
            Predictor::Ensemble { ensemble, .. } => &ensemble.config,
        };
        (config.height, config.width)
    }

    /// Predict the next 3 frames from 12 input frames.
    pub fn predict_window(&self, input: &FrameStack, table: &DirectionTable) -> Result<FrameStack> {
        if input.dims() != self.dims() {
            let (h, w) = self.dims();
            return Err(Error::shape(
                "predict",
                &[input.height(), input.width()],
                &[h, w],
            ));
        }
        let x = encode_input::<f32>(input, table)?;
        let y = match self {
            Predictor::Single(m) => m.forward(&x)?,
            Predictor::Ensemble { bases, ensemble } => {
                let outs = bases
                    .iter()
                    .map(|b| b.forward(&x))
                    .collect::<Result<Vec<_>>>()?;
                ensemble.forward(&ensemble_input(&outs)?)?
            }
        };
        decode_output(&y)
    }
}

/// Predictions for each window start, concatenated (3 frames per start).
pub fn predict_file(
    predictor: &Predictor,
    day: &FrameStack,
    starts: &[usize],
    table: &DirectionTable,
) -> Result<FrameStack> {
    if starts.is_empty() {
        return Err(Error::Invalid("no window starts given".into()));
    }
    let mut windows = Vec::with_capacity(starts.len());
    for &s in starts {
        if s + WINDOW_FRAMES > day.count() {
            return Err(Error::TooFewFrames {
                needed: s + WINDOW_FRAMES,
                available: day.count(),
            });
        }
        windows.push(predictor.predict_window(&day.slice(s, INPUT_FRAMES)?, table)?);
    }
    FrameStack::concat(&windows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityReport {
    pub city: String,
    pub model: String,
    pub mse: f64,
    pub baseline: f64,
    /// `mse / baseline`; absent when the baseline is zero.
    pub ratio: Option<f64>,
    pub windows: usize,
    pub height: usize,
    pub width: usize,
    /// Volume, speed and direction components of `mse`.
    pub channel_mse: [f64; CHANNELS],
}

fn ratio(mse: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| mse / baseline)
}

impl CityReport {
    pub fn compute(
        city: impl Into<String>,
        model: impl Into<String>,
        pred: &[FrameStack],
        truth: &[FrameStack],
    ) -> Result<Self> {
        let mse = evaluate(pred, truth)?;
        let baseline = zero_baseline(truth)?;
        let first = &truth[0];
        if truth.iter().any(|t| t.dims() != first.dims()) {
            return Err(Error::Invalid(
                "windows of one city must share frame dims".into(),
            ));
        }
        Ok(CityReport {
            city: city.into(),
            model: model.into(),
            mse,
            baseline,
            ratio: ratio(mse, baseline),
            windows: truth.len(),
            height: first.height(),
            width: first.width(),
            channel_mse: channel_breakdown(pred, truth)?,
        })
    }

    fn elements(&self) -> f64 {
        (self.windows * TARGET_FRAMES * self.height * self.width * CHANNELS) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub mse: f64,
    pub baseline: f64,
    pub ratio: Option<f64>,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub zero_baseline: f64,
    pub base1: f64,
    pub ensemble: f64,
}

impl Default for ReferenceScores {
    fn default() -> Self {
        ReferenceScores {
            zero_baseline: REFERENCE_ZERO_BASELINE,
            base1: REFERENCE_BASE1,
            ensemble: REFERENCE_ENSEMBLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cities: Vec<CityReport>,
    /// Element-weighted over all cities.
    pub pooled: PooledScore,
    pub reference: ReferenceScores,
}

impl EvaluationReport {
    pub fn new(cities: Vec<CityReport>) -> Result<Self> {
        if cities.is_empty() {
            return Err(Error::Invalid("report needs at least one city".into()));
        }
        let total: f64 = cities.iter().map(CityReport::elements).sum();
        let mse = cities.iter().map(|c| c.mse * c.elements()).sum::<f64>() / total;
        let baseline = cities
            .iter()
            .map(|c| c.baseline * c.elements())
            .sum::<f64>()
            / total;
        Ok(EvaluationReport {
            pooled: PooledScore {
                mse,
                baseline,
                ratio: ratio(mse, baseline),
                windows: cities.iter().map(|c| c.windows).sum(),
            },
            cities,
            reference: ReferenceScores::default(),
        })
    }

    /// Pretty JSON with a trailing newline; byte-stable for equal reports.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "evaluation report",
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".into(), |r| format!("{r:.4}"))
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cities {
            writeln!(
                f,
                "{} [{}] {} windows {}x{}: mse {:.6e}  baseline {:.6e}  ratio {}",
                c.city,
                c.model,
                c.windows,
                c.height,
                c.width,
                c.mse,
                c.baseline,
                fmt_ratio(c.ratio)
            )?;
        }
        write!(
            f,
            "pooled {} windows: mse {:.6e}  baseline {:.6e}  ratio {}",
            self.pooled.windows,
            self.pooled.mse,
            self.pooled.baseline,
            fmt_ratio(self.pooled.ratio)
        )
    }
}
