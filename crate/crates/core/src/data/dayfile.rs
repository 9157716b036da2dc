//! `.t4c` container: `"T4C1"`, then little-endian u32 `num_frames`,
//! `height`, `width`, `channels` (always 3), then the raw bytes frame-major,
//! row-major, channel-last.

use std::fs;
use std::path::Path;

use super::{DayFile, DirectionTable, FrameStack, CHANNELS};
use crate::error::{Error, Result};

pub const DAYFILE_MAGIC: [u8; 4] = *b"T4C1";
const HEADER_LEN: usize = 20;

pub(crate) fn encode(frames: &FrameStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frames.data().len());
    out.extend_from_slice(&DAYFILE_MAGIC);
    for v in [frames.count(), frames.height(), frames.width(), CHANNELS] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(frames.data());
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<FrameStack> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "day file header",
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DAYFILE_MAGIC {
        return Err(Error::BadMagic {
            what: "day file",
            expected: DAYFILE_MAGIC,
            found: magic,
        });
    }
    let field = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (count, height, width, channels) = (field(0), field(1), field(2), field(3));
    if channels != CHANNELS {
        return Err(Error::Format {
            what: "day file",
            detail: format!("expected 3 channels, header says {channels}"),
        });
    }
    let payload = count
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or_else(|| Error::Format {
            what: "day file",
            detail: "header dimensions overflow".into(),
        })?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::Truncated {
            what: "day file payload",
            expected: payload,
            found: body.len(),
        });
    }
    FrameStack::new(count, height, width, body.to_vec())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read a day file, rejecting any direction byte outside the default table.
pub fn read_dayfile(path: impl AsRef<Path>) -> Result<DayFile> {
    read_dayfile_with(path, &DirectionTable::default())
}

pub fn read_dayfile_with(path: impl AsRef<Path>, table: &DirectionTable) -> Result<DayFile> {
    let path = path.as_ref();
    let frames = decode(&read_bytes(path)?)?;
    frames.check_directions(table)?;
    Ok(DayFile {
        city: String::new(),
        frames,
    })
}

/// Read any `.t4c` container without checking direction bytes (prediction
/// files carry decoded model output there).
pub fn read_frames_file(path: impl AsRef<Path>) -> Result<FrameStack> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn write_dayfile(day: &DayFile, path: impl AsRef<Path>) -> Result<()> {
    write_frames_file(&day.frames, path)
}

pub fn write_frames_file(frames: &FrameStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(frames)).map_err(|e| Error::io(path, e))
}
