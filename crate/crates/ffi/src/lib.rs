//! C ABI over `traffic-unet`.
//!
//! Every fallible function returns a [`TuStatus`]; on failure a message is
//! available from [`tu_last_error`] on the calling thread. Handles are opaque
//! and must be released with their `*_free` function. Panics never cross the
//! boundary; they are reported as [`TuStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use traffic_unet::data::{
    decode_output, encode_input, read_dayfile, DayFile, DirectionTable, FrameStack, CHANNELS,
    INPUT_FRAMES, TARGET_FRAMES,
};
use traffic_unet::eval::evaluate;
use traffic_unet::model::{shape_trace, ModelConfig, TrainedModel, Variant};
use traffic_unet::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuVariant {
    Base1 = 1,
    Base2 = 2,
    Base3 = 3,
    Base4 = 4,
    Ensemble = 5,
}

impl From<Variant> for TuVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Base1 => TuVariant::Base1,
            Variant::Base2 => TuVariant::Base2,
            Variant::Base3 => TuVariant::Base3,
            Variant::Base4 => TuVariant::Base4,
            Variant::Ensemble => TuVariant::Ensemble,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TuModelInfo {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub variant: u32,
}

/// Loaded model checkpoint.
pub struct TuModel {
    model: TrainedModel,
}

/// Loaded day file.
pub struct TuDayFile {
    day: DayFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TuStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TuStatus::Io,
            Error::Json { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Format { .. }
            | Error::IllegalDirectionCode { .. } => TuStatus::Format,
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => TuStatus::Shape,
            _ => TuStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: TuStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            TuStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TuStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return fail(TuStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(TuStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(TuStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(TuStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(TuStatus::NullPointer, format!("{what} is null")))
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<(), Failure> {
    if got != expected {
        return fail(
            TuStatus::Shape,
            format!("{what} has {got} elements, expected {expected}"),
        );
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn tu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load a checkpoint into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tu_model_load(path: *const c_char, out: *mut *mut TuModel) -> TuStatus {
    guard(|| {
        if out.is_null() {
            return fail(TuStatus::NullPointer, "out is null");
        }
        let model = TrainedModel::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TuModel { model }));
        Ok(())
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`tu_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tu_model_free(model: *mut TuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tu_model_info(model: *const TuModel, info: *mut TuModelInfo) -> TuStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.model;
        if info.is_null() {
            return fail(TuStatus::NullPointer, "info is null");
        }
        *info = TuModelInfo {
            height: m.config.height,
            width: m.config.width,
            in_channels: m.config.in_channels,
            out_channels: m.config.out_channels,
            variant: TuVariant::from(m.variant()) as u32,
        };
        Ok(())
    })
}

/// Forward pass on a channel-last `(H, W, in_channels)` input, writing the
/// `(H, W, out_channels)` output.
///
/// # Safety
/// `input` and `output` must point to `input_len` and `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn tu_model_forward(
    model: *const TuModel,
    input: *const f32,
    input_len: usize,
    output: *mut f32,
    output_len: usize,
) -> TuStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.model;
        let c = &m.config;
        check_len("input", input_len, c.height * c.width * c.in_channels)?;
        check_len("output", output_len, c.height * c.width * c.out_channels)?;
        let x = Tensor::new(
            vec![c.height, c.width, c.in_channels],
            slice_arg(input, input_len, "input")?.to_vec(),
        )?;
        let out = slice_mut_arg(output, output_len, "output")?;
        out.copy_from_slice(m.forward(&x)?.data());
        Ok(())
    })
}

/// Read a day file into a new handle. Direction bytes are validated.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tu_dayfile_read(
    path: *const c_char,
    out: *mut *mut TuDayFile,
) -> TuStatus {
    guard(|| {
        if out.is_null() {
            return fail(TuStatus::NullPointer, "out is null");
        }
        let day = read_dayfile(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TuDayFile { day }));
        Ok(())
    })
}

/// Release a day-file handle. NULL is ignored.
///
/// # Safety
/// `day` must come from [`tu_dayfile_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tu_dayfile_free(day: *mut TuDayFile) {
    if !day.is_null() {
        drop(Box::from_raw(day));
    }
}

/// Frame count and spatial dims of a day file.
///
/// # Safety
/// `day` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tu_dayfile_dims(
    day: *const TuDayFile,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> TuStatus {
    guard(|| {
        let f = &ref_arg(day, "day")?.day.frames;
        if frames.is_null() || height.is_null() || width.is_null() {
            return fail(TuStatus::NullPointer, "dims output is null");
        }
        *frames = f.count();
        *height = f.height();
        *width = f.width();
        Ok(())
    })
}

/// Borrow the raw `(frames, H, W, 3)` bytes. The pointer stays valid while
/// the handle lives.
///
/// # Safety
/// `day` must be a live handle; `data` and `len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tu_dayfile_data(
    day: *const TuDayFile,
    data: *mut *const u8,
    len: *mut usize,
) -> TuStatus {
    guard(|| {
        let f = &ref_arg(day, "day")?.day.frames;
        if data.is_null() || len.is_null() {
            return fail(TuStatus::NullPointer, "data output is null");
        }
        *data = f.data().as_ptr();
        *len = f.data().len();
        Ok(())
    })
}

/// Encode the 12 frames starting at `start` as a `(H, W, 72)` model input.
///
/// # Safety
/// `day` must be a live handle and `out` point to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn tu_encode_input(
    day: *const TuDayFile,
    start: usize,
    out: *mut f32,
    out_len: usize,
) -> TuStatus {
    guard(|| {
        let f = &ref_arg(day, "day")?.day.frames;
        if start + INPUT_FRAMES > f.count() {
            return fail(
                TuStatus::InvalidArgument,
                format!("start {start} leaves fewer than {INPUT_FRAMES} frames"),
            );
        }
        let x = encode_input::<f32>(&f.slice(start, INPUT_FRAMES)?, &DirectionTable::default())?;
        check_len("out", out_len, x.len())?;
        slice_mut_arg(out, out_len, "out")?.copy_from_slice(x.data());
        Ok(())
    })
}

/// Decode a `(H, W, 9)` model output into `(3, H, W, 3)` bytes.
///
/// # Safety
/// `y` must point to `height * width * 9` floats and `out` to `out_len`
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn tu_decode_output(
    y: *const f32,
    height: usize,
    width: usize,
    out: *mut u8,
    out_len: usize,
) -> TuStatus {
    guard(|| {
        let n = height * width * TARGET_FRAMES * CHANNELS;
        let t = Tensor::new(
            vec![height, width, TARGET_FRAMES * CHANNELS],
            slice_arg(y, n, "y")?.to_vec(),
        )?;
        let frames = decode_output(&t)?;
        check_len("out", out_len, n)?;
        slice_mut_arg(out, out_len, "out")?.copy_from_slice(frames.data());
        Ok(())
    })
}

/// Normalized MSE between two equally sized byte buffers.
///
/// # Safety
/// `pred` and `truth` must point to `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tu_evaluate(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out: *mut f64,
) -> TuStatus {
    guard(|| {
        if out.is_null() {
            return fail(TuStatus::NullPointer, "out is null");
        }
        if len == 0 || !len.is_multiple_of(CHANNELS) {
            return fail(
                TuStatus::Shape,
                format!("length {len} is not a positive multiple of 3"),
            );
        }
        let as_stack = |b: &[u8]| FrameStack::new(1, 1, len / CHANNELS, b.to_vec());
        let p = as_stack(slice_arg(pred, len, "pred")?)?;
        let t = as_stack(slice_arg(truth, len, "truth")?)?;
        *out = evaluate(&[p], &[t])?;
        Ok(())
    })
}

/// Write the shape trace of a full-width model with the given dims and
/// pooling depth as text. `*required` receives the buffer size needed
/// (including the NUL); the text is written only if `buf_len` suffices.
///
/// # Safety
/// `buf` must point to `buf_len` bytes (or be NULL with `buf_len` 0);
/// `required` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tu_shape_trace(
    height: usize,
    width: usize,
    depth: usize,
    buf: *mut c_char,
    buf_len: usize,
    required: *mut usize,
) -> TuStatus {
    guard(|| {
        if required.is_null() {
            return fail(TuStatus::NullPointer, "required is null");
        }
        let config = ModelConfig {
            height,
            width,
            depth,
            stage_widths: ModelConfig::default_stage_widths(depth),
            ..ModelConfig::default()
        };
        let text = shape_trace(&config)?.to_string();
        *required = text.len() + 1;
        if buf_len < text.len() + 1 {
            return if buf_len == 0 {
                Ok(())
            } else {
                fail(TuStatus::InvalidArgument, "buffer too small")
            };
        }
        let out = slice_mut_arg(buf.cast::<u8>(), buf_len, "buf")?;
        out[..text.len()].copy_from_slice(text.as_bytes());
        out[text.len()] = 0;
        Ok(())
    })
}
