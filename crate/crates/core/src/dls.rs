//! Dynamic loss scheduling.
//!
//! The reconstruction loss is `mean(max(|pred − target|, ε₀)^p)` with an
//! exponent `p = β + η·f(τ)/T` that grows with the optimizer step `τ`. Early
//! on (`p < 1`) small errors get the larger gradients; late (`p > 1`) large
//! errors dominate.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::rpn::bce_loss;

/// Per-pixel error floor applied before exponentiation.
pub const EPS_FLOOR: f64 = 1e-6;

/// Weight of each mask BCE term in the total objective.
pub const MASK_LOSS_WEIGHT: f64 = 0.1;

/// Huber transition point.
pub const HUBER_DELTA: f64 = 1.0;

/// Progress map `f(τ)` with `f(0) = 0` and `f(T) = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ScheduleFn {
    #[default]
    Linear,
    /// Half-cosine ramp: slow at both ends.
    Cosine,
    /// Piecewise constant with `stages` equal plateaus.
    Step { stages: u32 },
}

impl ScheduleFn {
    pub fn apply(&self, tau: f64, total: f64) -> f64 {
        match *self {
            ScheduleFn::Linear => tau,
            ScheduleFn::Cosine => total * (1.0 - (std::f64::consts::PI * tau / total).cos()) / 2.0,
            ScheduleFn::Step { stages } => {
                let k = stages.max(1) as f64;
                if tau >= total {
                    total
                } else {
                    total * (tau * k / total).floor() / k
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub beta: f64,
    pub eta: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub schedule: ScheduleFn,
}

impl LossSchedule {
    pub fn new(beta: f64, eta: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            beta,
            eta,
            total_steps,
            schedule: ScheduleFn::Linear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_schedule(self, schedule: ScheduleFn) -> Self {
        Self { schedule, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn check_tau(&self, tau: u64) -> Result<()> {
        if tau > self.total_steps {
            return Err(Error::OutOfRange {
                what: "tau",
                detail: format!("{tau} > T = {}", self.total_steps),
            });
        }
        Ok(())
    }

    /// `β + η·f(τ)/T`.
    pub fn exponent(&self, tau: u64) -> Result<f64> {
        self.check_tau(tau)?;
        let t = self.total_steps as f64;
        Ok(self.beta + self.eta * self.schedule.apply(tau as f64, t) / t)
    }
}

/// Scheduled reconstruction loss on tensors of any matching shape.
pub fn dls_loss(pred: &Tensor, target: &Tensor, schedule: &LossSchedule, tau: u64) -> Result<Tensor> {
    let p = schedule.exponent(tau)?;
    dls_loss_with_exponent(pred, target, p)
}

pub fn dls_loss_with_exponent(pred: &Tensor, target: &Tensor, p: f64) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let eps = (pred - target)?.abs()?.maximum(EPS_FLOOR)?;
    Ok(eps.powf(p)?.mean_all()?)
}

/// `dl/dε = p·ε^{p−1}` over `eps_grid` at the exponent for step `tau`.
pub fn dls_gradient_profile(schedule: &LossSchedule, tau: u64, eps_grid: &[f64]) -> Result<Vec<f64>> {
    let p = schedule.exponent(tau)?;
    gradient_profile(p, eps_grid)
}

/// `p·ε^{p−1}` for each grid point; the grid must lie in `(0, 1]`.
pub fn gradient_profile(p: f64, eps_grid: &[f64]) -> Result<Vec<f64>> {
    eps_grid
        .iter()
        .map(|&e| {
            if e > 0.0 && e <= 1.0 {
                Ok(p * e.powf(p - 1.0))
            } else {
                Err(Error::OutOfRange {
                    what: "epsilon",
                    detail: format!("{e} not in (0, 1]"),
                })
            }
        })
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn eps_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Dls,
    L1,
    L2,
    Huber,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::L1, LossKind::L2, LossKind::Huber, LossKind::Dls];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Dls => "dls",
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Huber => "huber",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dls" => Ok(LossKind::Dls),
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "huber" => Ok(LossKind::Huber),
            _ => Err(Error::UnknownLoss(s.to_string())),
        }
    }
}

/// Mean l1, l2 or Huber (`δ = 1`) loss. `LossKind::Dls` is rejected since it
/// needs a schedule; use [`reconstruction_loss`].
pub fn baseline_loss(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let diff = (pred - target)?;
    let out = match kind {
        LossKind::L1 => diff.abs()?.mean_all()?,
        LossKind::L2 => diff.sqr()?.mean_all()?,
        LossKind::Huber => {
            let a = diff.abs()?;
            let q = a.minimum(HUBER_DELTA)?;
            ((q.sqr()? * 0.5)? + ((a - &q)? * HUBER_DELTA)?)?.mean_all()?
        }
        LossKind::Dls => return Err(Error::UnknownLoss("dls is not a baseline loss".into())),
    };
    Ok(out)
}

/// Same as [`baseline_loss`] but parses the kind from a string.
pub fn baseline_losses(pred: &Tensor, target: &Tensor, kind: &str) -> Result<f64> {
    let t = baseline_loss(pred, target, kind.parse()?)?;
    scalar(&t)
}

/// The configured reconstruction term.
pub fn reconstruction_loss(
    kind: LossKind,
    pred: &Tensor,
    target: &Tensor,
    schedule: &LossSchedule,
    tau: u64,
) -> Result<Tensor> {
    match kind {
        LossKind::Dls => dls_loss(pred, target, schedule, tau),
        other => baseline_loss(pred, target, other),
    }
}

/// Scalar parts of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLossBreakdown {
    pub reconstruction: f64,
    pub mask_bce: [f64; 3],
    pub total: f64,
    pub current_exponent: f64,
}

impl TotalLossBreakdown {
    pub fn new(reconstruction: f64, mask_bce: [f64; 3], current_exponent: f64) -> Self {
        let bce: f64 = mask_bce.iter().sum();
        Self {
            reconstruction,
            mask_bce,
            total: reconstruction + MASK_LOSS_WEIGHT * bce,
            current_exponent,
        }
    }
}

/// The differentiable objective and its breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Tensor,
    pub breakdown: TotalLossBreakdown,
}

/// `reconstruction + 0.1·Σ BCE(mask_pred_i, mask_gt_i)`.
///
/// `masks` holds `(prediction, target)` tensor pairs, one per level; an empty
/// slice drops the mask terms.
pub fn total_loss(
    kind: LossKind,
    pred: &Tensor,
    target: &Tensor,
    masks: &[(Tensor, Tensor)],
    schedule: &LossSchedule,
    tau: u64,
) -> Result<TotalLoss> {
    if !(masks.is_empty() || masks.len() == 3) {
        return Err(shape_mismatch("0 or 3 mask levels", masks.len()));
    }
    let exponent = schedule.exponent(tau)?;
    let recon = reconstruction_loss(kind, pred, target, schedule, tau)?;
    let mut loss = recon.clone();
    let mut mask_bce = [0.0; 3];
    for (i, (p, t)) in masks.iter().enumerate() {
        let b = bce_loss(p, t)?;
        mask_bce[i] = scalar(&b)?;
        loss = (loss + (b * MASK_LOSS_WEIGHT)?)?;
    }
    let breakdown = TotalLossBreakdown::new(scalar(&recon)?, mask_bce, exponent);
    for v in std::iter::once(breakdown.total).chain(mask_bce) {
        if !v.is_finite() {
            return Err(Error::OutOfRange {
                what: "loss",
                detail: format!("non-finite value {v}"),
            });
        }
    }
    Ok(TotalLoss { loss, breakdown })
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_mismatch(b.dims(), a.dims()));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
