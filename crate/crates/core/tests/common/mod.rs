//! Shared test support: finite-difference gradient checks, independent
//! 64-bit oracles, and the per-criterion checks used by both the integration
//! tests and the acceptance runner.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traffic_unet::autodiff::kernels::{self, Padding};
use traffic_unet::autodiff::{Graph, Var};
use traffic_unet::data::{
    direction_to_onehot, encode_input, flip, generate_synthetic_city, quantize, sliding_windows,
    translate, window_at, write_dayfile, CityEntry, DatasetManifest, DayFile, Direction,
    DirectionTable, FlipAxis, FrameStack, PixelLocation,
};
use traffic_unet::eval::{evaluate, zero_baseline};
use traffic_unet::model::{shape_trace, ModelConfig, TrainedModel, Variant};
use traffic_unet::nn::ParamStore;
use traffic_unet::train::{
    adam_step, masked_mse_loss, mse_loss, sigmoid_ce_loss, AdamConfig, LossSpec, OptimizerState,
    Phase, ScheduleConfig, ScheduleState, TrainConfig, TrainOptions,
};
use traffic_unet::{Result, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.1, 1]`, away from the relu kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn with_element(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.to_vec();
    data[i] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Build a scalar from `inputs` (all trainable), differentiate it, and
/// return the worst relative disagreement with central differences over
/// every input element. Non-scalar outputs are reduced by a fixed random
/// projection.
pub fn fd_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let scalarize = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let y = build(g, vars).expect("graph builds");
        if g.value(y).is_scalar() {
            return y;
        }
        let mut r = rng(0xfeed);
        let w = uniform(&mut r, g.value(y).shape(), -1.0, 1.0);
        let wv = g.constant(w);
        let prod = g.mul(y, wv).unwrap();
        g.sum(prod)
    };
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let y = scalarize(&mut g, &vars);
        g.value(y).item().unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = scalarize(&mut g, &vars);
    let grads = g.backward(y).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input reached by loss");
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k] = with_element(input, i, FD_STEP);
            let mut minus = inputs.to_vec();
            minus[k] = with_element(input, i, -FD_STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Worst relative error for each differentiable primitive.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut r = rng(42);
    let mut out = Vec::new();

    let x = uniform(&mut r, &[5, 6, 3], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 3, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    out.push((
        "conv2d same",
        fd_check(&[x.clone(), k.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Padding::Same)
        }),
    ));
    out.push((
        "conv2d valid",
        fd_check(&[x.clone(), k.clone()], |g, v| {
            g.conv2d(v[0], v[1], None, Padding::Valid)
        }),
    ));
    let k1 = uniform(&mut r, &[1, 3, 3, 2], -1.0, 1.0);
    out.push((
        "conv2d 1x3",
        fd_check(&[x.clone(), k1], |g, v| {
            g.conv2d(v[0], v[1], None, Padding::Same)
        }),
    ));

    let xt = uniform(&mut r, &[3, 3, 4], -1.0, 1.0);
    let kt = uniform(&mut r, &[2, 2, 4, 2], -1.0, 1.0);
    let bt = uniform(&mut r, &[2], -1.0, 1.0);
    out.push((
        "conv2d_transpose full",
        fd_check(&[xt.clone(), kt.clone(), bt.clone()], |g, v| {
            g.conv2d_transpose(v[0], v[1], Some(v[2]), 6, 6)
        }),
    ));
    out.push((
        "conv2d_transpose cropped",
        fd_check(&[xt, kt], |g, v| g.conv2d_transpose(v[0], v[1], None, 5, 6)),
    ));

    let xp = uniform(&mut r, &[5, 6, 4], -1.0, 1.0);
    out.push((
        "avg_pool2d_ceil",
        fd_check(&[xp], |g, v| g.avg_pool2d_ceil(v[0])),
    ));
    let xo = uniform(&mut r, &[5, 5, 2], -1.0, 1.0);
    out.push((
        "avg_pool2d_ceil odd",
        fd_check(&[xo], |g, v| g.avg_pool2d_ceil(v[0])),
    ));

    let c1 = uniform(&mut r, &[4, 3, 2], -1.0, 1.0);
    let c2 = uniform(&mut r, &[4, 3, 3], -1.0, 1.0);
    let c3 = uniform(&mut r, &[2, 3, 2], -1.0, 1.0);
    out.push((
        "concat channels",
        fd_check(&[c1.clone(), c2], |g, v| g.concat(&[v[0], v[1]], 2)),
    ));
    out.push((
        "concat rows",
        fd_check(&[c1, c3], |g, v| g.concat(&[v[0], v[1]], 0)),
    ));

    out.push((
        "relu",
        fd_check(&[off_kink(&mut r, &[4, 4, 3])], |g, v| Ok(g.relu(v[0]))),
    ));
    out.push((
        "sigmoid",
        fd_check(&[uniform(&mut r, &[4, 4, 3], -4.0, 4.0)], |g, v| {
            Ok(g.sigmoid(v[0]))
        }),
    ));

    let target = uniform(&mut r, &[3, 4, 9], 0.0, 1.0);
    let pred = uniform(&mut r, &[3, 4, 9], 0.0, 1.0);
    out.push((
        "mse_loss",
        fd_check(std::slice::from_ref(&pred), |g, v| {
            g.mse_loss(v[0], &target)
        }),
    ));
    let weights = Tensor::from_fn(vec![3, 4, 9], |i| ((i / 9) % 3 != 0) as u8 as f64);
    out.push((
        "masked_mse_loss",
        fd_check(&[pred], |g, v| g.masked_mse_loss(v[0], &target, &weights)),
    ));
    let logits = uniform(&mut r, &[4, 4, 3], -5.0, 5.0);
    let labels = Tensor::from_fn(vec![4, 4, 3], |i| (i % 3 == 0) as u8 as f64);
    out.push((
        "sigmoid_ce_loss",
        fd_check(&[logits], |g, v| g.sigmoid_ce_loss(v[0], &labels)),
    ));

    let ca = uniform(&mut r, &[3, 3, 2], -1.0, 1.0);
    let cb = uniform(&mut r, &[3, 3, 2], -1.0, 1.0);
    out.push((
        "add/sub/mul/scale",
        fd_check(&[ca, cb], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            Ok(g.scale(m, 0.7))
        }),
    ));

    let cx = uniform(&mut r, &[6, 6, 4], -1.0, 1.0);
    let ck = uniform(&mut r, &[3, 3, 4, 3], -0.5, 0.5);
    let cbias = uniform(&mut r, &[3], -0.5, 0.5);
    let ctarget = uniform(&mut r, &[3, 3, 3], 0.0, 1.0);
    out.push((
        "conv -> pool -> mse",
        fd_check(&[cx, ck, cbias], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
            let p = g.avg_pool2d_ceil(y)?;
            g.mse_loss(p, &ctarget)
        }),
    ));
    out
}

// ---- independent oracles -------------------------------------------------

pub fn oracle_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    s / p.len() as f64
}

/// `mask` is indexed `[frame][pixel]`; prediction channel `c` of pixel `px`
/// belongs to frame `c / 3`.
pub fn oracle_masked_mse(p: &[f64], t: &[f64], mask: &[f64], pixels: usize) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for px in 0..pixels {
        for c in 0..9 {
            let m = mask[(c / 3) * pixels + px];
            if m != 0.0 {
                let d = p[px * 9 + c] - t[px * 9 + c];
                s += d * d;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        0.0
    } else {
        s / n
    }
}

pub fn oracle_sigmoid_ce(z: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..z.len() {
        let sig = 1.0 / (1.0 + (-z[i]).exp());
        s += -(y[i] * sig.ln() + (1.0 - y[i]) * (1.0 - sig).ln());
    }
    s / z.len() as f64
}

pub fn oracle_adam(mut p: f64, g: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=steps {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

pub fn oracle_avg_pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                let mut n = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let (r, q) = (2 * i + di, 2 * j + dj);
                        if r < h && q < w {
                            s += x[(r * w + q) * c + ch];
                            n += 1.0;
                        }
                    }
                }
                out[(i * ow + j) * c + ch] = s / n;
            }
        }
    }
    out
}

pub fn oracle_normalized_mse(a: &[u8], b: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 / 255.0 - b[i] as f64 / 255.0;
        s += d * d;
    }
    s / a.len() as f64
}

pub fn random_frames(r: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> FrameStack {
    let data = (0..count * h * w * 3).map(|_| r.gen()).collect();
    FrameStack::new(count, h, w, data).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `(name, error, tolerance)` per oracle comparison.
pub fn oracle_suite() -> Vec<(&'static str, f64, f64)> {
    let mut r = rng(7);
    let mut out = Vec::new();

    let p = uniform(&mut r, &[4, 4, 9], 0.0, 1.0);
    let t = uniform(&mut r, &[4, 4, 9], 0.0, 1.0);
    out.push((
        "mse",
        (mse_loss(&p, &t).unwrap() - oracle_mse(p.data(), t.data())).abs(),
        1e-7,
    ));

    let mask = Tensor::from_fn(vec![3, 4, 4], |_| r.gen_bool(0.6) as u8 as f64);
    out.push((
        "masked mse",
        (masked_mse_loss(&p, &t, &mask).unwrap()
            - oracle_masked_mse(p.data(), t.data(), mask.data(), 16))
        .abs(),
        1e-7,
    ));

    let z = uniform(&mut r, &[4, 4, 3], -6.0, 6.0);
    let y = Tensor::from_fn(vec![3, 4, 4], |_| r.gen_bool(0.5) as u8 as f64);
    let y_last = traffic_unet::train::mask_channels_last(&y).unwrap();
    out.push((
        "sigmoid ce",
        (sigmoid_ce_loss(&z, &y).unwrap() - oracle_sigmoid_ce(z.data(), y_last.data())).abs(),
        1e-6,
    ));

    let mut params = ParamStore::<f64>::new();
    params.insert("p", Tensor::scalar(0.8)).unwrap();
    let mut grads = ParamStore::<f64>::new();
    grads.insert("p", Tensor::scalar(0.37)).unwrap();
    let mut state = OptimizerState::new(AdamConfig::default(), 1e-3);
    adam_step(&mut params, &grads, &mut state).unwrap();
    adam_step(&mut params, &grads, &mut state).unwrap();
    out.push((
        "adam two-step",
        (params.get("p").unwrap().item().unwrap() - oracle_adam(0.8, 0.37, 1e-3, 2)).abs(),
        1e-6,
    ));

    let x = uniform(&mut r, &[5, 7, 3], -1.0, 1.0);
    let pooled = kernels::avg_pool2d_ceil(&x).unwrap();
    out.push((
        "avg-pool partial windows",
        max_abs(pooled.data(), &oracle_avg_pool(x.data(), 5, 7, 3)),
        1e-9,
    ));

    let truth: Vec<FrameStack> = (0..3).map(|_| random_frames(&mut r, 3, 5, 4)).collect();
    let pred: Vec<FrameStack> = (0..3).map(|_| random_frames(&mut r, 3, 5, 4)).collect();
    let flat = |v: &[FrameStack]| {
        v.iter()
            .flat_map(|f| f.data().to_vec())
            .collect::<Vec<u8>>()
    };
    let zeros = vec![0u8; flat(&truth).len()];
    out.push((
        "zero baseline",
        (zero_baseline(&truth).unwrap() - oracle_normalized_mse(&zeros, &flat(&truth))).abs(),
        1e-9,
    ));
    out.push((
        "normalized mse",
        (evaluate(&pred, &truth).unwrap() - oracle_normalized_mse(&flat(&pred), &flat(&truth)))
            .abs(),
        1e-9,
    ));
    out
}

// ---- criterion checks ----------------------------------------------------

pub type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

pub const EXPECTED_TRACE: &[(&str, [usize; 3])] = &[
    ("DenseBlock-1", [495, 436, 64]),
    ("AveragePooling", [248, 218, 64]),
    ("DenseBlock-2", [248, 218, 96]),
    ("AveragePooling", [124, 109, 96]),
    ("DenseBlock-3", [124, 109, 128]),
    ("AveragePooling", [62, 55, 128]),
    ("DenseBlock-4", [62, 55, 128]),
    ("AveragePooling", [31, 28, 128]),
    ("DenseBlock-5", [31, 28, 128]),
    ("AveragePooling", [16, 14, 128]),
    ("DenseBlock-6", [16, 14, 128]),
    ("AveragePooling", [8, 7, 128]),
    ("DenseBlock-7", [8, 7, 128]),
    ("AveragePooling", [4, 4, 128]),
    ("DenseBlock-8", [4, 4, 128]),
    ("Convolution Layer", [4, 4, 128]),
    ("DeconvolutionBlock-1", [8, 7, 128]),
    ("DeconvolutionBlock-2", [16, 14, 128]),
    ("DeconvolutionBlock-3", [31, 28, 128]),
    ("DeconvolutionBlock-4", [62, 55, 128]),
    ("DeconvolutionBlock-5", [124, 109, 128]),
    ("DeconvolutionBlock-6", [248, 218, 128]),
    ("DeconvolutionBlock-7", [495, 436, 128]),
    ("Convolution Layer", [495, 436, 9]),
];

pub fn check_shape_trace() -> Check {
    let started = std::time::Instant::now();
    let trace = shape_trace(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let expected = EXPECTED_TRACE;
    ensure(
        trace.rows.len() == expected.len(),
        format!("{} rows, expected {}", trace.rows.len(), expected.len()),
    )?;
    for (row, (name, shape)) in trace.rows.iter().zip(expected) {
        ensure(
            row.stage == *name && row.shape == *shape,
            format!("row {} {:?} != {} {:?}", row.stage, row.shape, name, shape),
        )?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed.as_secs_f64() < 1.0, format!("took {elapsed:?}"))?;
    Ok(format!("{} rows match in {elapsed:?}", trace.rows.len()))
}

pub fn check_gradients() -> Check {
    let started = std::time::Instant::now();
    let suite = gradient_suite();
    let (name, worst) =
        suite.iter().copied().fold(
            ("", 0.0f64),
            |acc, (n, e)| if e > acc.1 { (n, e) } else { acc },
        );
    for (n, e) in &suite {
        ensure(*e < GRAD_TOLERANCE, format!("{n}: relative error {e:.3e}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed.as_secs() < 60, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {worst:.2e} ({name}) in {elapsed:?}",
        suite.len()
    ))
}

pub fn check_encoding() -> Check {
    let table = DirectionTable::default();
    let here = PixelLocation {
        frame: 0,
        row: 0,
        col: 0,
    };
    let expected = [
        (0u8, [1, 0, 0, 0]),
        (1, [0, 1, 0, 0]),
        (85, [0, 0, 1, 0]),
        (170, [0, 0, 0, 1]),
        (255, [0, 0, 0, 0]),
    ];
    for (code, onehot) in expected {
        let got = direction_to_onehot(code, &table, here).map_err(|e| e.to_string())?;
        ensure(got == onehot, format!("code {code} -> {got:?}"))?;
    }
    ensure(
        direction_to_onehot(7, &table, here).is_err(),
        "illegal code 7 accepted",
    )?;
    ensure(
        table.category(0) == Some(Direction::NorthEast),
        "code 0 is not NE",
    )?;

    let mut r = rng(3);
    let sample = legal_window(&mut r, 6, 5);
    for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
        let flipped = flip(&sample, axis, &table);
        ensure(
            flip(&flipped, axis, &table) == sample,
            format!("{axis:?} flip is not an involution"),
        )?;
        let lhs = encode_input::<f64>(&flipped.input, &table).map_err(|e| e.to_string())?;
        let rhs = flip_encoded(
            &encode_input::<f64>(&sample.input, &table).map_err(|e| e.to_string())?,
            axis,
        );
        ensure(lhs == rhs, format!("{axis:?} flip is not equivariant"))?;
    }
    let moved = translate(&sample, 0, 0, 16).map_err(|e| e.to_string())?;
    ensure(moved == sample, "zero translation changed the window")?;

    for b in 0..=255u8 {
        let v = b as f64 / 255.0;
        ensure(quantize(v) == b, format!("byte {b} does not round-trip"))?;
    }

    let day = DayFile {
        city: "c".into(),
        frames: FrameStack::zeros(288, 2, 2),
    };
    let n = sliding_windows(&day, "d")
        .map_err(|e| e.to_string())?
        .count();
    ensure(n == 274, format!("288 frames gave {n} windows"))?;
    Ok("one-hot table, flips, translate identity, 256 bytes, 274 windows".into())
}

/// A window whose direction bytes are all legal.
pub fn legal_window(r: &mut ChaCha8Rng, h: usize, w: usize) -> traffic_unet::data::WindowSample {
    const CODES: [u8; 5] = [0, 1, 85, 170, 255];
    let data = (0..15 * h * w * 3)
        .map(|i| {
            if i % 3 == 2 {
                CODES[r.gen_range(0..5)]
            } else {
                r.gen()
            }
        })
        .collect();
    let day = DayFile {
        city: "c".into(),
        frames: FrameStack::new(15, h, w, data).unwrap(),
    };
    window_at(&day, "d", 0).unwrap()
}

/// Independent flip of an encoded `(H, W, 72)` input: mirror the grid and
/// swap one-hot slots (NE, NW, SE, SW).
pub fn flip_encoded(x: &Tensor<f64>, axis: FlipAxis) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let swap: [usize; 4] = match axis {
        FlipAxis::Vertical => [2, 3, 0, 1],
        FlipAxis::Horizontal => [1, 0, 3, 2],
    };
    Tensor::from_fn(vec![h, w, c], |i| {
        let (row, col, ch) = (i / (w * c), (i / c) % w, i % c);
        let (sr, sc) = match axis {
            FlipAxis::Vertical => (h - 1 - row, col),
            FlipAxis::Horizontal => (row, w - 1 - col),
        };
        let (frame, k) = (ch / 6, ch % 6);
        let src_k = if k >= 2 { 2 + swap[k - 2] } else { k };
        x.data()[(sr * w + sc) * c + frame * 6 + src_k]
    })
}

pub fn check_oracles() -> Check {
    let suite = oracle_suite();
    for (name, err, tol) in &suite {
        ensure(err <= tol, format!("{name}: error {err:.3e} > {tol:.0e}"))?;
    }
    Ok(format!("{} oracles within tolerance", suite.len()))
}

// ---- training fixtures ---------------------------------------------------

/// Writes `days` synthetic day files per city and a manifest whose last
/// `val_days` files per city are validation, the rest training.
pub fn synth_manifest(
    dir: &Path,
    cities: &[(&str, u64)],
    days: usize,
    val_days: usize,
    h: usize,
    w: usize,
) -> DatasetManifest {
    let mut m = DatasetManifest::new(dir);
    for &(name, seed) in cities {
        let files = generate_synthetic_city(name, seed, days, h, w).unwrap();
        let mut paths: Vec<PathBuf> = Vec::new();
        for (i, d) in files.iter().enumerate() {
            let p = PathBuf::from(format!("{name}_day{i:03}.t4c"));
            write_dayfile(d, dir.join(&p)).unwrap();
            paths.push(p);
        }
        let validation = paths.split_off(days - val_days);
        m.upsert(CityEntry {
            name: name.into(),
            train: paths,
            validation,
            test: vec![],
        });
    }
    m.save(dir.join("manifest.json")).unwrap();
    m
}

pub fn toy_config(h: usize, w: usize, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(h, w);
    cfg.steps = steps;
    cfg.eval_every = 50;
    cfg.val_windows = 8;
    cfg
}

/// Mean loss of `model` over evenly spread windows of every manifest day.
pub fn spread_loss(
    model: &TrainedModel,
    manifest: &DatasetManifest,
    city: &str,
    per_day: usize,
) -> (f64, f64) {
    let loss = LossSpec::for_variant(model.variant());
    let table = DirectionTable::default();
    let entry = manifest.city(city).unwrap();
    let (mut total, mut base, mut n) = (0.0, 0.0, 0.0);
    for p in &entry.train {
        let day = traffic_unet::data::read_dayfile(manifest.resolve(p)).unwrap();
        let last = day.num_frames() - 15;
        for i in 0..per_day {
            let w = window_at(&day, "d", i * last / (per_day - 1).max(1)).unwrap();
            let x = encode_input::<f32>(&w.input, &table).unwrap();
            let y = model.forward(&x).unwrap();
            total += loss.evaluate(&y, &w.target).unwrap() as f64;
            base += zero_baseline(std::slice::from_ref(&w.target)).unwrap();
            n += 1.0;
        }
    }
    (total / n, base / n)
}

pub fn check_schedule() -> Check {
    let mut s = ScheduleState::new(ScheduleConfig::default());
    let patience = s.config.patience;
    let mut lrs = vec![s.lr()];
    s.update(0.3).map_err(|e| e.to_string())?;
    lrs.push(s.lr());
    for i in 1..=patience {
        s.update(0.3).map_err(|e| e.to_string())?;
        lrs.push(s.lr());
        let expect = if i < patience {
            Phase::High
        } else {
            Phase::Low
        };
        ensure(
            s.phase == expect,
            format!("after {i} stale evaluations phase is {}", s.phase),
        )?;
    }
    ensure(s.lr() == 3e-5, format!("low-phase lr {}", s.lr()))?;
    for i in 1..=patience {
        s.update(0.3).map_err(|e| e.to_string())?;
        lrs.push(s.lr());
        let expect = if i < patience {
            Phase::Low
        } else {
            Phase::Stopped
        };
        ensure(
            s.phase == expect,
            format!(
                "low phase: after {i} stale evaluations phase is {}",
                s.phase
            ),
        )?;
    }
    ensure(lrs.windows(2).all(|w| w[1] <= w[0]), "lr increased")?;
    ensure(lrs[0] == 3e-4, "initial lr is not 3e-4")?;
    Ok(format!("lr sequence {lrs:?}"))
}

pub fn options_with_log(path: &Path) -> TrainOptions {
    TrainOptions {
        log: Some(path.to_path_buf()),
        ..TrainOptions::default()
    }
}

pub fn base_variants() -> [Variant; 4] {
    Variant::BASES
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn check_overfit() -> Check {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let m = synth_manifest(dir.path(), &[("toy", 11)], 2, 0, 16, 14);
    let cfg = toy_config(16, 14, 500);
    let out =
        traffic_unet::train::train_base(Variant::Base1, &m, &cfg, 1, &TrainOptions::default())
            .map_err(err)?;
    let (mse, baseline) = spread_loss(&out.model, &m, "toy", 40);
    let elapsed = started.elapsed();
    ensure(
        mse < 0.1 * baseline,
        format!("train mse {mse:.3e} vs baseline {baseline:.3e}"),
    )?;
    ensure(elapsed.as_secs() < 600, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} steps: train mse {mse:.3e} = {:.1}% of baseline {baseline:.3e} in {elapsed:.1?}",
        out.log.entries.len(),
        100.0 * mse / baseline
    ))
}

pub fn check_masked_gradient() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let m = synth_manifest(dir.path(), &[("toy", 5)], 1, 0, 16, 14);
    let day = traffic_unet::data::read_dayfile(m.resolve(&m.cities[0].train[0])).map_err(err)?;
    let w = window_at(&day, "d", 100).map_err(err)?;
    let cfg = toy_config(16, 14, 0).model.with_variant(Variant::Base2);
    let model = traffic_unet::model::build_model(&cfg, 3).map_err(err)?;
    let table = DirectionTable::default();

    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(encode_input(&w.input, &table).map_err(err)?);
    let y = model
        .unet()
        .map_err(err)?
        .forward(&mut g, &bound, x)
        .map_err(err)?;
    let loss = LossSpec::for_variant(Variant::Base2)
        .build(&mut g, y, &w.target)
        .map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let dy = grads.get(y).ok_or("no gradient at the prediction")?;

    let mask = traffic_unet::train::compute_missing_mask::<f32>(&w.target);
    let pixels = 16 * 14;
    let (mut missing, mut nonzero_kept) = (0, 0);
    for px in 0..pixels {
        for c in 0..9 {
            let gval = dy.data()[px * 9 + c];
            if mask.data()[(c / 3) * pixels + px] == 0.0 {
                missing += 1;
                ensure(gval == 0.0, format!("gradient {gval} at a missing pixel"))?;
            } else if gval != 0.0 {
                nonzero_kept += 1;
            }
        }
    }
    ensure(missing > 0, "window has no missing pixels")?;
    ensure(nonzero_kept > 0, "no gradient on have-data pixels")?;
    Ok(format!(
        "{missing} masked elements with exactly zero gradient"
    ))
}

pub fn check_base4_learns() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let m = synth_manifest(dir.path(), &[("toy", 6)], 2, 0, 16, 14);
    let cfg = toy_config(16, 14, 200);
    let seed = 4;
    let initial = traffic_unet::model::build_model(&cfg.model.with_variant(Variant::Base4), seed)
        .map_err(err)?;
    let (before, _) = spread_loss(&initial, &m, "toy", 12);
    let out =
        traffic_unet::train::train_base(Variant::Base4, &m, &cfg, seed, &TrainOptions::default())
            .map_err(err)?;
    let (after, _) = spread_loss(&out.model, &m, "toy", 12);
    ensure(
        after < before,
        format!("sigmoid-ce {before:.4} -> {after:.4}"),
    )?;
    Ok(format!("sigmoid-ce {before:.4} -> {after:.4}"))
}

pub fn check_base3_cities() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let m = synth_manifest(dir.path(), &[("alpha", 1), ("beta", 2)], 1, 0, 16, 14);
    let log = dir.path().join("base3.jsonl");
    let out = traffic_unet::train::train_base(
        Variant::Base3,
        &m,
        &toy_config(16, 14, 40),
        3,
        &options_with_log(&log),
    )
    .map_err(err)?;
    let text = std::fs::read_to_string(&log).map_err(err)?;
    let mut cities = std::collections::BTreeSet::new();
    for line in text.lines() {
        let e: traffic_unet::train::LogEntry = serde_json::from_str(line).map_err(err)?;
        cities.insert(e.city);
    }
    ensure(cities.len() >= 2, format!("log shows cities {cities:?}"))?;
    ensure(
        out.log.cities_seen().len() == cities.len(),
        "in-memory log disagrees with file",
    )?;
    Ok(format!("log shows cities {cities:?}"))
}

pub fn check_variants() -> Check {
    let a = check_masked_gradient().map_err(|e| format!("base2: {e}"))?;
    let b = check_base4_learns().map_err(|e| format!("base4: {e}"))?;
    let c = check_base3_cities().map_err(|e| format!("base3: {e}"))?;
    Ok(format!("base2 {a}; base4 {b}; base3 {c}"))
}

/// Normalized MSE of `predictor` over windows every 12 frames of a day.
pub fn day_score(predictor: &traffic_unet::eval::Predictor, day: &FrameStack) -> f64 {
    let starts: Vec<usize> = (0..=day.count() - 15).step_by(12).collect();
    let table = DirectionTable::default();
    let pred = traffic_unet::eval::predict_file(predictor, day, &starts, &table).unwrap();
    let pred = traffic_unet::eval::split_windows(&pred).unwrap();
    let truth = traffic_unet::eval::truth_windows(day, &starts).unwrap();
    evaluate(&pred, &truth).unwrap()
}

pub fn check_ensemble() -> Check {
    use traffic_unet::eval::Predictor;
    use traffic_unet::train::{train_base, train_ensemble};

    let dir = tempfile::tempdir().map_err(err)?;
    let m = synth_manifest(dir.path(), &[("alpha", 21), ("beta", 22)], 3, 1, 16, 14);
    let cfg = toy_config(16, 14, 300);
    let opts = TrainOptions::default();
    let mut bases = Vec::new();
    for (i, v) in Variant::BASES.into_iter().enumerate() {
        bases.push(
            train_base(v, &m, &cfg, 100 + i as u64, &opts)
                .map_err(err)?
                .model,
        );
    }
    let ensemble = train_ensemble(&bases, &m, &cfg, 200, &opts)
        .map_err(err)?
        .model;

    let val_path = m.resolve(&m.city("alpha").unwrap().validation[0]);
    let day = traffic_unet::data::read_dayfile(val_path)
        .map_err(err)?
        .frames;
    let mut scores = Vec::new();
    for b in &bases[..3] {
        scores.push(day_score(&Predictor::single(b.clone()).map_err(err)?, &day));
    }
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let ens = day_score(&Predictor::ensemble(bases, ensemble).map_err(err)?, &day);
    let detail = format!(
        "ensemble {ens:.3e} vs bases [{}], min + 5e-3 = {:.3e}",
        scores
            .iter()
            .map(|s| format!("{s:.3e}"))
            .collect::<Vec<_>>()
            .join(", "),
        best + 5e-3
    );
    ensure(ens <= best + 5e-3, detail.clone())?;
    Ok(detail)
}

/// Everything the determinism criterion compares, as raw bytes.
pub fn pipeline_artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    use traffic_unet::eval::{
        predict_file, split_windows, truth_windows, CityReport, EvaluationReport, Predictor,
    };

    let m = synth_manifest(dir, &[("toy", 9)], 2, 1, 16, 14);
    let mut out = Vec::new();
    for p in &m.cities[0].train {
        out.push((
            p.display().to_string(),
            std::fs::read(m.resolve(p)).unwrap(),
        ));
    }
    let cfg = toy_config(16, 14, 20);
    let init = traffic_unet::model::build_model(&cfg.model, 17).unwrap();
    out.push((
        "initial parameters".into(),
        init.to_checkpoint_bytes().unwrap(),
    ));

    let log = dir.join("log.jsonl");
    let trained =
        traffic_unet::train::train_base(Variant::Base1, &m, &cfg, 17, &options_with_log(&log))
            .unwrap()
            .model;
    let first_line = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    out.push(("step-0 log line".into(), first_line.into_bytes()));
    out.push(("training log".into(), std::fs::read(&log).unwrap()));
    out.push((
        "trained parameters".into(),
        trained.to_checkpoint_bytes().unwrap(),
    ));

    let day = traffic_unet::data::read_dayfile(m.resolve(&m.cities[0].validation[0])).unwrap();
    let starts = [0, 48, 96, 144];
    let predictor = Predictor::single(trained).unwrap();
    let pred = predict_file(&predictor, &day.frames, &starts, &DirectionTable::default()).unwrap();
    let pred_path = dir.join("pred.t4c");
    traffic_unet::data::write_frames_file(&pred, &pred_path).unwrap();
    out.push(("prediction file".into(), std::fs::read(&pred_path).unwrap()));

    let city = CityReport::compute(
        "toy",
        "base1",
        &split_windows(&pred).unwrap(),
        &truth_windows(&day.frames, &starts).unwrap(),
    )
    .unwrap();
    let report = EvaluationReport::new(vec![city]).unwrap();
    out.push(("report".into(), report.to_text().into_bytes()));
    out
}

pub fn check_determinism() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = pipeline_artifacts(a.path());
    let second = pipeline_artifacts(b.path());
    ensure(first.len() == second.len(), "artifact lists differ")?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts bit-identical ({})",
        first.len(),
        first
            .iter()
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    ))
}
