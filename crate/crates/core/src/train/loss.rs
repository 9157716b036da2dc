//! Losses for the four base variants, in normalized `[0, 1]` space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::data::{encode_target, FrameStack, CHANNELS, TARGET_FRAMES};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    MaskedMse,
    SigmoidCe,
}

/// How missing pixels are identified in ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// A pixel is missing when volume, speed and direction bytes are all 0.
    #[default]
    AllChannelsZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub mask_rule: MaskRule,
}

impl LossSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let kind = match variant {
            Variant::Base1 | Variant::Ensemble => LossKind::Mse,
            Variant::Base2 | Variant::Base3 => LossKind::MaskedMse,
            Variant::Base4 => LossKind::SigmoidCe,
        };
        LossSpec {
            kind,
            mask_rule: MaskRule::AllChannelsZero,
        }
    }

    /// Add the loss of `pred` against a window's target frames to `g`.
    pub fn build<T: Real>(&self, g: &mut Graph<T>, pred: Var, target: &FrameStack) -> Result<Var> {
        match self.kind {
            LossKind::Mse => g.mse_loss(pred, &encode_target(target)?),
            LossKind::MaskedMse => {
                let mask = compute_missing_mask::<T>(target);
                g.masked_mse_loss(pred, &encode_target(target)?, &mask_weights(&mask)?)
            }
            LossKind::SigmoidCe => {
                let mask = compute_missing_mask::<T>(target);
                g.sigmoid_ce_loss(pred, &mask_channels_last(&mask)?)
            }
        }
    }

    /// Loss value without building a graph.
    pub fn evaluate<T: Real>(&self, pred: &Tensor<T>, target: &FrameStack) -> Result<T> {
        let mask = || compute_missing_mask::<T>(target);
        match self.kind {
            LossKind::Mse => mse_loss(pred, &encode_target(target)?),
            LossKind::MaskedMse => masked_mse_loss(pred, &encode_target(target)?, &mask()),
            LossKind::SigmoidCe => sigmoid_ce_loss(pred, &mask()),
        }
    }
}

/// `(3, H, W)` indicator: 1 where the ground-truth pixel has data, 0 where
/// all three of its bytes are zero.
pub fn compute_missing_mask<T: Real>(target: &FrameStack) -> Tensor<T> {
    let (h, w) = target.dims();
    let data = target
        .data()
        .chunks_exact(CHANNELS)
        .map(|px| if px == [0, 0, 0] { T::zero() } else { T::one() })
        .collect();
    Tensor::from_parts(vec![target.count(), h, w], data)
}

fn mask_dims<T: Real>(mask: &Tensor<T>) -> Result<(usize, usize)> {
    match *mask.shape() {
        [k, h, w] if k == TARGET_FRAMES => Ok((h, w)),
        _ => Err(Error::invalid_shape(
            "mask",
            format!("expected a (3, H, W) mask, got {:?}", mask.shape()),
        )),
    }
}

/// Expand a `(3, H, W)` mask to `(H, W, 9)` so each frame's value covers its
/// three channels.
pub fn mask_weights<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = mask_dims(mask)?;
    let c = TARGET_FRAMES * CHANNELS;
    Ok(Tensor::from_fn(vec![h, w, c], |i| {
        let (px, ch) = (i / c, i % c);
        mask.data()[(ch / CHANNELS) * h * w + px]
    }))
}

/// Transpose a `(3, H, W)` mask to `(H, W, 3)`.
pub fn mask_channels_last<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = mask_dims(mask)?;
    Ok(Tensor::from_fn(vec![h, w, TARGET_FRAMES], |i| {
        let (px, k) = (i / TARGET_FRAMES, i % TARGET_FRAMES);
        mask.data()[k * h * w + px]
    }))
}

pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    kernels::mse(pred, target)
}

/// Squared error over have-data elements divided by their count; `mask` is
/// `(3, H, W)` and `pred`/`target` are `(H, W, 9)`.
pub fn masked_mse_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<T> {
    kernels::masked_mse(pred, target, &mask_weights(mask)?)
}

/// Mean sigmoid cross-entropy of `(H, W, 3)` logits against a `(3, H, W)`
/// have-data mask.
pub fn sigmoid_ce_loss<T: Real>(logits: &Tensor<T>, have_data: &Tensor<T>) -> Result<T> {
    kernels::sigmoid_ce(logits, &mask_channels_last(have_data)?)
}
