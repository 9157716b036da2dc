//! Flip and translation augmentation. Both act on all fifteen frames of a
//! window so inputs and targets stay aligned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DirectionTable, FlipAxis, FrameStack, WindowSample, CHANNELS};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SHIFT: usize = 16;

fn flip_frames(frames: &FrameStack, axis: FlipAxis, remap: &[u8; 256]) -> FrameStack {
    let (h, w) = frames.dims();
    let mut out = FrameStack::zeros(frames.count(), h, w);
    for t in 0..frames.count() {
        for row in 0..h {
            for col in 0..w {
                let (sr, sc) = match axis {
                    FlipAxis::Vertical => (h - 1 - row, col),
                    FlipAxis::Horizontal => (row, w - 1 - col),
                };
                let [v, s, d] = frames.pixel(t, sr, sc);
                let i = out.index(t, row, col);
                out.data_mut()[i..i + CHANNELS].copy_from_slice(&[v, s, remap[d as usize]]);
            }
        }
    }
    out
}

/// Mirror every frame along `axis` and remap direction codes accordingly;
/// the "none" category and unknown codes are left alone.
pub fn flip(sample: &WindowSample, axis: FlipAxis, table: &DirectionTable) -> WindowSample {
    let remap = table.remap_table(axis);
    WindowSample {
        input: flip_frames(&sample.input, axis, &remap),
        target: flip_frames(&sample.target, axis, &remap),
        source: sample.source.clone(),
    }
}

fn shift_frames(frames: &FrameStack, dx: i64, dy: i64) -> FrameStack {
    let (h, w) = frames.dims();
    let mut out = FrameStack::zeros(frames.count(), h, w);
    for t in 0..frames.count() {
        for row in 0..h {
            let sr = row as i64 - dy;
            if sr < 0 || sr >= h as i64 {
                continue;
            }
            for col in 0..w {
                let sc = col as i64 - dx;
                if sc < 0 || sc >= w as i64 {
                    continue;
                }
                let src = frames.index(t, sr as usize, sc as usize);
                let dst = out.index(t, row, col);
                out.data_mut()[dst..dst + CHANNELS]
                    .copy_from_slice(&frames.data()[src..src + CHANNELS]);
            }
        }
    }
    out
}

/// Move pixel `(row, col)` to `(row + dy, col + dx)` in every frame;
/// vacated pixels become zero (missing data).
pub fn translate(
    sample: &WindowSample,
    dx: i64,
    dy: i64,
    max_shift: usize,
) -> Result<WindowSample> {
    if dx.unsigned_abs() as usize > max_shift || dy.unsigned_abs() as usize > max_shift {
        return Err(Error::OffsetTooLarge {
            dx,
            dy,
            max: max_shift,
        });
    }
    Ok(WindowSample {
        input: shift_frames(&sample.input, dx, dy),
        target: shift_frames(&sample.target, dx, dy),
        source: sample.source.clone(),
    })
}

/// Random augmentation policy for training. Off by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub translate_probability: f64,
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.0,
            translate_probability: 0.0,
            max_shift: DEFAULT_MAX_SHIFT,
        }
    }
}

impl AugmentConfig {
    pub fn is_active(&self) -> bool {
        self.flip_probability > 0.0 || self.translate_probability > 0.0
    }

    pub fn apply(
        &self,
        sample: WindowSample,
        table: &DirectionTable,
        rng: &mut impl Rng,
    ) -> Result<WindowSample> {
        let mut sample = sample;
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            if self.flip_probability > 0.0 && rng.gen_bool(self.flip_probability.min(1.0)) {
                sample = flip(&sample, axis, table);
            }
        }
        if self.translate_probability > 0.0 && rng.gen_bool(self.translate_probability.min(1.0)) {
            let m = self.max_shift as i64;
            let (dx, dy) = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            sample = translate(&sample, dx, dy, self.max_shift)?;
        }
        Ok(sample)
    }
}
