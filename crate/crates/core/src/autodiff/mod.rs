//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its cached output.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse. Each graph supports
//! exactly one backward pass; training builds a fresh graph per step.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::Padding;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Scale,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    ConvTranspose {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    AvgPool(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    MaskedMse {
        pred: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    },
    SigmoidCe {
        logits: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Accumulated gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Generic entry point for the elementwise family. `scale` reads its
    /// factor from `factor`; binary ops require `b`.
    pub fn elementwise(
        &mut self,
        op: Elementwise,
        a: Var,
        b: Option<Var>,
        factor: T,
    ) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| {
                Error::invalid_shape("elementwise", format!("{op:?} needs two operands"))
            })
        };
        match op {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Scale => Ok(self.scale(a, factor)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        kernels::same_shape(name, va, vb)?;
        let value = kernels::zip_map(va, vb, f);
        Ok(self.push(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat(&values, axis)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            inputs,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
            value,
            &inputs,
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        target_h: usize,
        target_w: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d_transpose(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            target_h,
            target_w,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(Op::ConvTranspose { x, kernel, bias }, value, &inputs))
    }

    pub fn avg_pool2d_ceil(&mut self, x: Var) -> Result<Var> {
        let value = kernels::avg_pool2d_ceil(self.value(x))?;
        Ok(self.push(Op::AvgPool(x), value, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = kernels::mse(self.value(pred), target)?;
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(loss),
            &[pred],
        ))
    }

    /// Masked MSE with per-element `weights` in {0, 1} shaped like `pred`.
    pub fn masked_mse_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<Var> {
        let loss = kernels::masked_mse(self.value(pred), target, weights)?;
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target: target.clone(),
                weights: weights.clone(),
            },
            Tensor::scalar(loss),
            &[pred],
        ))
    }

    pub fn sigmoid_ce_loss(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = kernels::sigmoid_ce(self.value(logits), target)?;
        Ok(self.push(
            Op::SigmoidCe {
                logits,
                target: target.clone(),
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Runs at most once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;

        let mut acc: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        acc[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = acc[idx].take() else {
                continue;
            };
            let upstream = Tensor::from_parts(node.value.shape().to_vec(), upstream);
            self.propagate(&node.op, &node.value, &upstream, &mut acc)?;
            acc[idx] = Some(upstream.to_vec());
        }

        let grads = acc
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        up: &Tensor<T>,
        acc: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let mut send = |var: Var, grad: Vec<T>| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut acc[var.0] {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(grad) {
                        *e = *e + g;
                    }
                }
                slot @ None => *slot = Some(grad),
            }
        };
        let upd = up.data();
        let val = |v: Var| self.nodes[v.0].value.data();

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, upd.to_vec());
                send(*b, upd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, upd.to_vec());
                send(*b, upd.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, upd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                send(*b, upd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Relu(a) => {
                let va = val(*a);
                send(
                    *a,
                    upd.iter()
                        .zip(va)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                send(
                    *a,
                    upd.iter()
                        .zip(out.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                );
            }
            Op::Scale(a, f) => send(*a, upd.iter().map(|&g| g * *f).collect()),
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].value.shape()[*axis])
                    .collect();
                for (v, piece) in inputs.iter().zip(up.split(*axis, &sizes)?) {
                    send(*v, piece.to_vec());
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let (dx, dk, db) = kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[kernel.0].value,
                    *padding,
                    up,
                )?;
                send(*x, dx.to_vec());
                send(*kernel, dk.to_vec());
                if let Some(b) = bias {
                    send(*b, db.to_vec());
                }
            }
            Op::ConvTranspose { x, kernel, bias } => {
                let (dx, dk, db) = kernels::conv2d_transpose_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[kernel.0].value,
                    up,
                )?;
                send(*x, dx.to_vec());
                send(*kernel, dk.to_vec());
                if let Some(b) = bias {
                    send(*b, db.to_vec());
                }
            }
            Op::AvgPool(x) => {
                let dx = kernels::avg_pool2d_ceil_backward(self.nodes[x.0].value.shape(), up);
                send(*x, dx.to_vec());
            }
            Op::Sum(x) => {
                let g = upd[0];
                send(*x, vec![g; self.nodes[x.0].value.len()]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let g = upd[0] / T::lit(n as f64);
                send(*x, vec![g; n]);
            }
            Op::Mse { pred, target } => {
                let n = T::lit(target.len() as f64);
                let scale = upd[0] * T::lit(2.0) / n;
                send(
                    *pred,
                    val(*pred)
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect(),
                );
            }
            Op::MaskedMse {
                pred,
                target,
                weights,
            } => {
                let count = kernels::masked_count(weights);
                let grad = if count == 0 {
                    vec![T::zero(); target.len()]
                } else {
                    let scale = upd[0] * T::lit(2.0) / T::lit(count as f64);
                    val(*pred)
                        .iter()
                        .zip(target.data())
                        .zip(weights.data())
                        .map(|((&p, &t), &w)| scale * w * (p - t))
                        .collect()
                };
                send(*pred, grad);
            }
            Op::SigmoidCe { logits, target } => {
                let n = T::lit(target.len() as f64);
                let scale = upd[0] / n;
                send(
                    *logits,
                    val(*logits)
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &y)| scale * (kernels::sigmoid(z) - y))
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.elementwise(Elementwise::Add, a, Some(b), 0.0).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let r = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let z = g.sigmoid(z);
        assert_eq!(g.value(z).data(), &[0.5]);
        let c = g.constant(t(&[3], &[0.0; 3]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
        assert!(g.elementwise(Elementwise::Mul, a, None, 0.0).is_err());
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_fn(vec![2, 3, 4], |i| i as f64 * 0.1 - 1.0));
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let target = Tensor::from_fn(vec![3, 3], |i| i as f64);
        let p = g.param(target.clone());
        let loss = g.mse_loss(p, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::ones(vec![2]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(vec![2]));
        let p = g.param(Tensor::ones(vec![2]));
        let m = g.mul(c, p).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2], &[3.0, -2.0]));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0, -4.0]);
    }
}
