//! Traffic movies on disk and in memory, the model input/output encodings,
//! window extraction, augmentation and synthetic data.

mod augment;
mod dayfile;
mod direction;
mod encoding;
mod manifest;
mod synth;
mod window;

pub use augment::{flip, translate, AugmentConfig, DEFAULT_MAX_SHIFT};
pub use dayfile::{
    read_dayfile, read_dayfile_with, read_frames_file, write_dayfile, write_frames_file,
    DAYFILE_MAGIC,
};
pub use direction::{
    direction_to_onehot, one_hot_permutation, Direction, DirectionTable, FlipAxis, PixelLocation,
};
pub use encoding::{decode_output, encode_input, encode_target, quantize};
pub use manifest::{canonical_split, default_test_starts, CityEntry, DatasetManifest, TestEntry};
pub use synth::generate_synthetic_city;
pub use window::{sliding_windows, window_at, WindowSample, WindowSource};

use crate::error::{Error, Result};

/// Frames in one canonical day: 24 h at 5-minute intervals.
pub const FRAMES_PER_DAY: usize = 288;
/// Input frames per window (one hour).
pub const INPUT_FRAMES: usize = 12;
/// Predicted frames per window (15 minutes).
pub const TARGET_FRAMES: usize = 3;
pub const WINDOW_FRAMES: usize = INPUT_FRAMES + TARGET_FRAMES;
/// Volume, speed, direction code.
pub const CHANNELS: usize = 3;

/// A `(count, H, W, 3)` byte movie, frame-major, row-major, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStack {
    count: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FrameStack {
    pub fn new(count: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let expected = count * height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::invalid_shape(
                "frames",
                format!(
                    "({count}, {height}, {width}, 3) needs {expected} bytes, got {}",
                    data.len()
                ),
            ));
        }
        Ok(FrameStack {
            count,
            height,
            width,
            data,
        })
    }

    pub fn zeros(count: usize, height: usize, width: usize) -> Self {
        FrameStack {
            count,
            height,
            width,
            data: vec![0; count * height * width * CHANNELS],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn index(&self, frame: usize, row: usize, col: usize) -> usize {
        ((frame * self.height + row) * self.width + col) * CHANNELS
    }

    pub fn pixel(&self, frame: usize, row: usize, col: usize) -> [u8; 3] {
        let i = self.index(frame, row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn frame(&self, frame: usize) -> &[u8] {
        &self.data[frame * self.frame_len()..][..self.frame_len()]
    }

    /// Copy of frames `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> Result<FrameStack> {
        if start + count > self.count {
            return Err(Error::TooFewFrames {
                needed: start + count,
                available: self.count,
            });
        }
        let fl = self.frame_len();
        FrameStack::new(
            count,
            self.height,
            self.width,
            self.data[start * fl..(start + count) * fl].to_vec(),
        )
    }

    /// Stack several movies of equal spatial size along the frame axis.
    pub fn concat(parts: &[FrameStack]) -> Result<FrameStack> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("no frames to concatenate".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if p.dims() != first.dims() {
                return Err(Error::shape(
                    "frames_concat",
                    &[first.height, first.width],
                    &[p.height, p.width],
                ));
            }
            data.extend_from_slice(&p.data);
        }
        FrameStack::new(
            parts.iter().map(|p| p.count).sum(),
            first.height,
            first.width,
            data,
        )
    }

    /// First pixel whose direction byte is not a legal code.
    pub fn check_directions(&self, table: &DirectionTable) -> Result<()> {
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            if !table.is_legal(px[2]) {
                let col = i % self.width;
                let row = (i / self.width) % self.height;
                let frame = i / (self.width * self.height);
                return Err(Error::IllegalDirectionCode {
                    code: px[2],
                    frame,
                    row,
                    col,
                });
            }
        }
        Ok(())
    }
}

/// One city-day traffic movie.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayFile {
    pub city: String,
    pub frames: FrameStack,
}

impl DayFile {
    pub fn num_frames(&self) -> usize {
        self.frames.count()
    }
}
