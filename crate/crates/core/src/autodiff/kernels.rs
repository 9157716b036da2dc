//! Forward and backward kernels on channel-last `(H, W, C)` images.
//!
//! Kernels are pure functions over tensors; the graph in the parent module
//! wires them together and owns the gradient bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; output keeps the input size.
    Same,
    Valid,
}

fn hwc(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::invalid_shape(
            op,
            format!("expected an (H, W, C) image, got {:?}", t.shape()),
        )),
    }
}

fn kernel4(op: &'static str, k: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize)> {
    match *k.shape() {
        [kh, kw, ci, co] => Ok((kh, kw, ci, co)),
        _ => Err(Error::invalid_shape(
            op,
            format!("expected a (kh, kw, Cin, Cout) kernel, got {:?}", k.shape()),
        )),
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(op, b.shape(), &[cout]));
        }
    }
    Ok(())
}

pub fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry<T: Real>(x: &Tensor<T>, k: &Tensor<T>, padding: Padding) -> Result<ConvGeometry> {
    let (h, w, cin) = hwc("conv2d", x)?;
    let (kh, kw, kcin, cout) = kernel4("conv2d", k)?;
    if kcin != cin {
        return Err(Error::invalid_shape(
            "conv2d",
            format!(
                "input has {cin} channels but kernel {:?} expects {kcin}",
                k.shape()
            ),
        ));
    }
    let (pad_h, pad_w, out_h, out_w) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::invalid_shape(
                    "conv2d",
                    format!("same padding needs odd kernel dims, got {kh}x{kw}"),
                ));
            }
            (kh / 2, kw / 2, h, w)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::invalid_shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(ConvGeometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        pad_h,
        pad_w,
        out_h,
        out_w,
    })
}

impl ConvGeometry {
    /// Input coordinate read by output `(oy, ox)` at tap `(dy, dx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let iy = (oy + dy).checked_sub(self.pad_h)?;
        let ix = (ox + dx).checked_sub(self.pad_w)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, k, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![T::zero(); g.out_h * g.out_w * g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * g.cout..][..g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let Some((iy, ix)) = g.source(oy, ox, dy, dx) else {
                        continue;
                    };
                    let xrow = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    let tap = (dy * g.kw + dx) * g.cin;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let krow = &kd[(tap + ci) * g.cout..][..g.cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc = *acc + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.out_h, g.out_w, g.cout], out))
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, k, padding)?;
    let (xd, kd, gd) = (x.data(), k.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = &gd[(oy * g.out_w + ox) * g.cout..][..g.cout];
            for (acc, &v) in db.iter_mut().zip(go) {
                *acc = *acc + v;
            }
            for dy in 0..g.kh {
                for dx_ in 0..g.kw {
                    let Some((iy, ix)) = g.source(oy, ox, dy, dx_) else {
                        continue;
                    };
                    let base = (iy * g.w + ix) * g.cin;
                    let tap = (dy * g.kw + dx_) * g.cin;
                    for ci in 0..g.cin {
                        let krow = &kd[(tap + ci) * g.cout..][..g.cout];
                        let mut s = T::zero();
                        for (&kv, &gv) in krow.iter().zip(go) {
                            s = s + kv * gv;
                        }
                        dx[base + ci] = dx[base + ci] + s;
                        let xv = xd[base + ci];
                        if xv != T::zero() {
                            let dkrow = &mut dk[(tap + ci) * g.cout..][..g.cout];
                            for (acc, &gv) in dkrow.iter_mut().zip(go) {
                                *acc = *acc + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.cout], db),
    ))
}

fn transpose_geometry<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = hwc("conv2d_transpose", x)?;
    let (kh, kw, kcin, cout) = kernel4("conv2d_transpose", k)?;
    if (kh, kw) != (2, 2) {
        return Err(Error::invalid_shape(
            "conv2d_transpose",
            format!("kernel must be 2x2, got {kh}x{kw}"),
        ));
    }
    if kcin != cin {
        return Err(Error::invalid_shape(
            "conv2d_transpose",
            format!(
                "input has {cin} channels but kernel {:?} expects {kcin}",
                k.shape()
            ),
        ));
    }
    let reachable = |src: usize, dst: usize| dst + 1 == 2 * src || dst == 2 * src;
    if !reachable(h, target_h) || !reachable(w, target_w) {
        return Err(Error::invalid_shape(
            "conv2d_transpose",
            format!(
                "target ({target_h}, {target_w}) not reachable from ({h}, {w}); each axis must be 2n-1 or 2n"
            ),
        ));
    }
    Ok((h, w, cin, cout))
}

/// Stride-2, 2x2 transposed convolution cropped top-left to the target size.
pub fn conv2d_transpose<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin, cout) = transpose_geometry(x, k, target_h, target_w)?;
    check_bias("conv2d_transpose", bias, cout)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![T::zero(); target_h * target_w * cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(b.data());
        }
    }
    for i in 0..h {
        for j in 0..w {
            let xrow = &xd[(i * w + j) * cin..][..cin];
            for a in 0..2 {
                let oy = 2 * i + a;
                if oy >= target_h {
                    continue;
                }
                for b in 0..2 {
                    let ox = 2 * j + b;
                    if ox >= target_w {
                        continue;
                    }
                    let o = &mut out[(oy * target_w + ox) * cout..][..cout];
                    let tap = (a * 2 + b) * cin;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let krow = &kd[(tap + ci) * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc = *acc + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![target_h, target_w, cout], out))
}

pub fn conv2d_transpose_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (target_h, target_w) = (grad_out.shape()[0], grad_out.shape()[1]);
    let (h, w, cin, cout) = transpose_geometry(x, k, target_h, target_w)?;
    let (xd, kd, gd) = (x.data(), k.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); cout];
    for go in gd.chunks_exact(cout) {
        for (acc, &v) in db.iter_mut().zip(go) {
            *acc = *acc + v;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * cin;
            for a in 0..2 {
                let oy = 2 * i + a;
                if oy >= target_h {
                    continue;
                }
                for b in 0..2 {
                    let ox = 2 * j + b;
                    if ox >= target_w {
                        continue;
                    }
                    let go = &gd[(oy * target_w + ox) * cout..][..cout];
                    let tap = (a * 2 + b) * cin;
                    for ci in 0..cin {
                        let krow = &kd[(tap + ci) * cout..][..cout];
                        let mut s = T::zero();
                        for (&kv, &gv) in krow.iter().zip(go) {
                            s = s + kv * gv;
                        }
                        dx[base + ci] = dx[base + ci] + s;
                        let xv = xd[base + ci];
                        let dkrow = &mut dk[(tap + ci) * cout..][..cout];
                        for (acc, &gv) in dkrow.iter_mut().zip(go) {
                            *acc = *acc + xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![cout], db),
    ))
}

/// Output size of ceil-mode halving.
pub fn ceil_half(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 stride-2 average pooling; trailing partial windows average only the
/// elements present.
pub fn avg_pool2d_ceil<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("avg_pool2d_ceil", x)?;
    let (oh, ow) = (ceil_half(h), ceil_half(w));
    let xd = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let rows = (2 * oy)..(2 * oy + 2).min(h);
        for ox in 0..ow {
            let cols = (2 * ox)..(2 * ox + 2).min(w);
            let count = T::lit((rows.len() * cols.len()) as f64);
            let o = &mut out[(oy * ow + ox) * c..][..c];
            for iy in rows.clone() {
                for ix in cols.clone() {
                    let xrow = &xd[(iy * w + ix) * c..][..c];
                    for (acc, &v) in o.iter_mut().zip(xrow) {
                        *acc = *acc + v;
                    }
                }
            }
            for v in o.iter_mut() {
                *v = *v / count;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub fn avg_pool2d_ceil_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let ow = ceil_half(w);
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); h * w * c];
    for iy in 0..h {
        let rows = if (iy | 1) < h { 2 } else { 1 };
        for ix in 0..w {
            let cols = if (ix | 1) < w { 2 } else { 1 };
            let count = T::lit((rows * cols) as f64);
            let go = &gd[((iy / 2) * ow + ix / 2) * c..][..c];
            let d = &mut dx[(iy * w + ix) * c..][..c];
            for (acc, &g) in d.iter_mut().zip(go) {
                *acc = g / count;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

pub fn concat<T: Real>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid_shape("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::invalid_shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for t in &inputs[1..] {
        let compatible = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("mse_loss", pred, target)?;
    let n = T::lit(pred.len() as f64);
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Squared error summed over elements with nonzero weight, divided by the
/// number of such elements. Zero when every element is masked out.
pub fn masked_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    same_shape("masked_mse_loss", pred, target)?;
    same_shape("masked_mse_loss", pred, weights)?;
    let count = weights.data().iter().filter(|&&w| w != T::zero()).count();
    if count == 0 {
        return Ok(T::zero());
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((&p, &t), &w)| w * (p - t) * (p - t))
        .sum();
    Ok(sum / T::lit(count as f64))
}

pub fn masked_count<T: Real>(weights: &Tensor<T>) -> usize {
    weights.data().iter().filter(|&&w| w != T::zero()).count()
}

/// Mean sigmoid cross-entropy in the overflow-free form
/// `max(z, 0) - z * y + ln(1 + exp(-|z|))`.
pub fn sigmoid_ce<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("sigmoid_ce_loss", logits, target)?;
    let n = T::lit(logits.len() as f64);
    let sum: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / n)
}
