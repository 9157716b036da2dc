use super::{DayFile, FrameStack, INPUT_FRAMES, TARGET_FRAMES, WINDOW_FRAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct WindowSource {
    pub city: String,
    /// Day index or file label within the city.
    pub day: String,
    pub start: usize,
}

/// Twelve input frames and the three frames that follow them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSample {
    pub input: FrameStack,
    pub target: FrameStack,
    pub source: WindowSource,
}

impl WindowSample {
    /// All fifteen frames in time order.
    pub fn frames(&self) -> FrameStack {
        FrameStack::concat(&[self.input.clone(), self.target.clone()]).expect("same dims")
    }

    pub fn from_frames(frames: &FrameStack, source: WindowSource) -> Result<Self> {
        if frames.count() != WINDOW_FRAMES {
            return Err(Error::invalid_shape(
                "window",
                format!("expected {WINDOW_FRAMES} frames, got {}", frames.count()),
            ));
        }
        Ok(WindowSample {
            input: frames.slice(0, INPUT_FRAMES)?,
            target: frames.slice(INPUT_FRAMES, TARGET_FRAMES)?,
            source,
        })
    }
}

pub fn window_at(day: &DayFile, label: &str, start: usize) -> Result<WindowSample> {
    if start + WINDOW_FRAMES > day.num_frames() {
        return Err(Error::TooFewFrames {
            needed: start + WINDOW_FRAMES,
            available: day.num_frames(),
        });
    }
    Ok(WindowSample {
        input: day.frames.slice(start, INPUT_FRAMES)?,
        target: day.frames.slice(start + INPUT_FRAMES, TARGET_FRAMES)?,
        source: WindowSource {
            city: day.city.clone(),
            day: label.to_string(),
            start,
        },
    })
}

/// Stride-1 windows over a day: `num_frames - 14` of them.
pub fn sliding_windows<'a>(
    day: &'a DayFile,
    label: &'a str,
) -> Result<impl Iterator<Item = WindowSample> + 'a> {
    if day.num_frames() < WINDOW_FRAMES {
        return Err(Error::TooFewFrames {
            needed: WINDOW_FRAMES,
            available: day.num_frames(),
        });
    }
    let last = day.num_frames() - WINDOW_FRAMES;
    Ok((0..=last).map(move |s| window_at(day, label, s).expect("start within range")))
}
