use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        OptimizerState {
            config,
            lr,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let (b1, b2, eps, lr) = (
        T::lit(beta1),
        T::lit(beta2),
        T::lit(epsilon),
        T::lit(state.lr),
    );
    let correct1 = T::one() - T::lit(beta1.powi(t));
    let correct2 = T::one() - T::lit(beta2.powi(t));

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = params.get(&name).expect("listed above");
        let g = grads.get(&name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
        let mut updated = Vec::with_capacity(p.len());
        for (((&pv, &gv), mv), vv) in p
            .data()
            .iter()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / correct1;
            let v_hat = *vv / correct2;
            updated.push(pv - lr * m_hat / (v_hat.sqrt() + eps));
        }
        let shape = p.shape().to_vec();
        params.set(&name, Tensor::new(shape, updated)?)?;
    }
    Ok(())
}
