//! Rain perception: prompt-based routing of whole images and the per-pixel
//! rain-confidence predictor with its BCE supervision.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{downsample_mask, RainMask};
use crate::error::{shape_mismatch, Error, Result};
use crate::imaging::Image;
use crate::nn::{self, Conv2d, ConvSpec, Detach, Scope};
use crate::vlm::{Embedding, Gateway, PromptSet};

/// Predictions are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Softmax scores over the prompts and the chosen sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    pub selected: usize,
}

impl RoutingDecision {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let selected = argmax_lowest(&scores);
        Self { scores, selected }
    }

    /// A decision that always picks `index` (used when routing is disabled).
    pub fn fixed(index: usize, n: usize) -> Self {
        let mut scores = vec![0.0; n];
        scores[index] = 1.0;
        Self { scores, selected: index }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores an image against the prompts and picks the best-matching index.
pub fn route(img: &Image, prompts: &PromptSet, gateway: &Gateway) -> Result<RoutingDecision> {
    let txt = gateway.encode_prompts(prompts)?;
    route_embedded(&gateway.encode_image(img)?, &txt, gateway)
}

/// Same as [`route`] with precomputed prompt embeddings.
pub fn route_embedded(img_emb: &Embedding, txt: &[Embedding], gateway: &Gateway) -> Result<RoutingDecision> {
    Ok(RoutingDecision::from_scores(gateway.match_scores(img_emb, txt)?))
}

/// Pixel-level rain confidence: 3×3 conv, GELU, 1×1 conv to one channel,
/// sigmoid.
#[derive(Debug, Clone)]
pub struct MaskPredictor {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Detach for MaskPredictor {
    fn detached(&self) -> Self {
        Self {
            conv1: self.conv1.detached(),
            conv2: self.conv2.detached(),
        }
    }
}

impl MaskPredictor {
    /// `hidden` is the width of the intermediate layer.
    pub fn new(scope: &mut Scope, in_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(scope, "conv1", ConvSpec::same(in_channels, hidden, 3))?,
            conv2: Conv2d::new(scope, "conv2", ConvSpec::same(hidden, 1, 1))?,
        })
    }

    /// Same layout with every weight and bias zero.
    pub fn zeros(scope: &mut Scope, in_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::zeros(scope, "conv1", ConvSpec::same(in_channels, hidden, 3))?,
            conv2: Conv2d::zeros(scope, "conv2", ConvSpec::same(hidden, 1, 1))?,
        })
    }

    pub fn param_count(in_channels: usize, hidden: usize) -> usize {
        ConvSpec::same(in_channels, hidden, 3).param_count() + ConvSpec::same(hidden, 1, 1).param_count()
    }

    pub fn conv1_weight(&self) -> &Tensor {
        self.conv1.weight()
    }

    /// `(B, C, H, W)` → `(B, 1, H, W)` confidences in `(0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = crate::kernels::gelu(&self.conv1.forward(x)?)?;
        nn::sigmoid(&self.conv2.forward(&h)?)
    }

    /// Predicts a mask for a single RGB image.
    pub fn predict_image(&self, img: &Image, dtype: DType) -> Result<RainMask> {
        let x = nn::images_to_tensor(&[img], dtype, &Device::Cpu)?;
        Ok(RainMask::predicted(nn::tensor_to_mask(&self.forward(&x)?, 0)?, 0))
    }
}

/// Mean binary cross-entropy between predicted confidences and binary targets
/// of the same shape (differentiable in `pred`).
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_mismatch(target.dims(), pred.dims()));
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// BCE between a predicted mask and a ground-truth mask.
pub fn bce_mask_loss(pred: &RainMask, gt: &RainMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(shape_mismatch(gt.dims(), pred.dims()));
    }
    let dev = Device::Cpu;
    let p = nn::masks_to_tensor(&[&pred.values], DType::F64, &dev)?;
    let g = nn::masks_to_tensor(&[&gt.values], DType::F64, &dev)?;
    Ok(bce_loss(&p, &g)?.to_scalar::<f64>()?)
}

/// Per-level BCE (shallow → deep). `preds` are at full, half and quarter
/// resolution of `gt_full`.
pub fn multilevel_mask_losses(preds: &[RainMask; 3], gt_full: &RainMask) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (level, (pred, slot)) in preds.iter().zip(out.iter_mut()).enumerate() {
        let gt = downsample_mask(gt_full, 1 << level)?;
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("level {level} at {:?}", gt.dims()),
                got: format!("{:?}", pred.dims()),
            });
        }
        *slot = bce_mask_loss(pred, &gt)?;
    }
    Ok(out)
}
