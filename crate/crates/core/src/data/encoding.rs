//! Byte movies to model tensors and back.
//!
//! Input layout is time-major: frame `t` occupies channels `6t..6t + 6` as
//! `(volume, speed, NE, NW, SE, SW)`, oldest frame first. Output layout puts
//! frame `k`'s `(volume, speed, direction)` in channels `3k..3k + 3`.

use super::{
    direction_to_onehot, DirectionTable, FrameStack, PixelLocation, CHANNELS, INPUT_FRAMES,
    TARGET_FRAMES,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const FEATURES_PER_FRAME: usize = 6;

fn check_count(frames: &FrameStack, expected: usize, op: &'static str) -> Result<()> {
    if frames.count() != expected {
        return Err(Error::invalid_shape(
            op,
            format!("expected {expected} frames, got {}", frames.count()),
        ));
    }
    Ok(())
}

pub fn encode_input<T: Real>(frames: &FrameStack, table: &DirectionTable) -> Result<Tensor<T>> {
    check_count(frames, INPUT_FRAMES, "encode_input")?;
    let (h, w) = frames.dims();
    let channels = INPUT_FRAMES * FEATURES_PER_FRAME;
    let scale = T::lit(1.0 / 255.0);
    let byte = |b: u8| T::lit(b as f64) * scale;
    let mut out = vec![T::zero(); h * w * channels];
    for row in 0..h {
        for col in 0..w {
            let px_out = &mut out[(row * w + col) * channels..][..channels];
            for t in 0..INPUT_FRAMES {
                let [volume, speed, code] = frames.pixel(t, row, col);
                let hot = direction_to_onehot(code, table, PixelLocation { frame: t, row, col })?;
                let f = &mut px_out[t * FEATURES_PER_FRAME..][..FEATURES_PER_FRAME];
                f[0] = byte(volume);
                f[1] = byte(speed);
                for (slot, &bit) in f[2..].iter_mut().zip(&hot) {
                    *slot = T::lit(bit as f64);
                }
            }
        }
    }
    Tensor::new(vec![h, w, channels], out)
}

/// Ground-truth frames in model output layout, scaled to `[0, 1]`.
pub fn encode_target<T: Real>(frames: &FrameStack) -> Result<Tensor<T>> {
    check_count(frames, TARGET_FRAMES, "encode_target")?;
    let (h, w) = frames.dims();
    let channels = TARGET_FRAMES * CHANNELS;
    let mut out = vec![T::zero(); h * w * channels];
    for row in 0..h {
        for col in 0..w {
            for k in 0..TARGET_FRAMES {
                let px = frames.pixel(k, row, col);
                for c in 0..CHANNELS {
                    out[(row * w + col) * channels + k * CHANNELS + c] =
                        T::lit(px[c] as f64 / 255.0);
                }
            }
        }
    }
    Tensor::new(vec![h, w, channels], out)
}

/// Clamp to `[0, 1]`, scale by 255 and round half up. NaN maps to 0.
pub fn quantize<T: Real>(v: T) -> u8 {
    let v = v.to_f64().unwrap_or(0.0);
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn decode_output<T: Real>(y: &Tensor<T>) -> Result<FrameStack> {
    let (h, w) = match *y.shape() {
        [h, w, c] if c == TARGET_FRAMES * CHANNELS => (h, w),
        _ => {
            return Err(Error::invalid_shape(
                "decode_output",
                format!("expected (H, W, 9), got {:?}", y.shape()),
            ))
        }
    };
    let mut frames = FrameStack::zeros(TARGET_FRAMES, h, w);
    let data = y.data();
    for row in 0..h {
        for col in 0..w {
            for k in 0..TARGET_FRAMES {
                let dst = frames.index(k, row, col);
                let src = (row * w + col) * TARGET_FRAMES * CHANNELS + k * CHANNELS;
                for c in 0..CHANNELS {
                    frames.data_mut()[dst + c] = quantize(data[src + c]);
                }
            }
        }
    }
    Ok(frames)
}
