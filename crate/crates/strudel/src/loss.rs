//! Segmentation losses: soft Dice, binary cross entropy, the
//! uncertainty-weighted BCE, and the routed combination used in retraining.
//!
//! A sample routed as `FixedLabel` is scored with Dice + BCE; a sample routed
//! as `PseudoLabelWithUncertainty` is scored with Dice + UBCE, where each
//! pixel's cross-entropy term is weighted by `1 - sigma` and `sigma` is the
//! rescaled per-pixel uncertainty. Only the cross-entropy term is weighted;
//! Dice is not. All math here is f64.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_binary, check_same_shape, Grid, Mask};

/// How a sample's loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRouting {
    /// Trusted label: Dice + BCE.
    FixedLabel,
    /// Pseudo label with an uncertainty map: Dice + UBCE.
    PseudoLabelWithUncertainty,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Predictions are clamped to `[eps, 1 - eps]` before logarithms.
    pub bce_clamp_epsilon: f64,
    /// Additive smoothing in the soft Dice ratio.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_clamp_epsilon: 1e-7,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce_clamp_epsilon > 0.0 && self.bce_clamp_epsilon < 0.5) {
            return Err(Error::Config(format!(
                "bce_clamp_epsilon must be in (0, 0.5), got {}",
                self.bce_clamp_epsilon
            )));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config(format!(
                "dice_smooth must be > 0, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// Per-sample loss components. `total` always equals `dice + bce + ubce`;
/// the component not selected by the routing is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub ubce: f64,
}

fn check_sigma(sigma: &Grid) -> Result<()> {
    if sigma.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Domain(
            "sigma values must lie in [0, 1]".to_string(),
        ));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Mean binary cross entropy over pixels.
pub fn bce(pred: &Grid, target: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_same_shape("bce", pred, target)?;
    check_binary("bce", target)?;
    let eps = cfg.bce_clamp_epsilon;
    let n = pred.len() as f64;
    let sum = Zip::from(pred).and(target).fold(0.0, |acc, &p, &t| {
        let p = clamp(p, eps);
        acc - (t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
    });
    Ok(sum / n)
}

/// Gradient of [`bce`] w.r.t. the prediction. Pixels in the clamped region
/// receive zero gradient.
pub fn bce_grad(pred: &Grid, target: &Mask, cfg: &LossConfig) -> Result<Grid> {
    check_same_shape("bce", pred, target)?;
    check_binary("bce", target)?;
    let eps = cfg.bce_clamp_epsilon;
    let n = pred.len() as f64;
    let mut g = Grid::zeros(pred.raw_dim());
    Zip::from(&mut g).and(pred).and(target).for_each(|o, &p, &t| {
        if p > eps && p < 1.0 - eps {
            *o = (-(t as f64) / p + (1.0 - t as f64) / (1.0 - p)) / n;
        }
    });
    Ok(g)
}

/// Uncertainty-weighted binary cross entropy: each pixel's BCE term is scaled
/// by `1 - sigma`.
pub fn ubce(pred: &Grid, target: &Mask, sigma: &Grid, cfg: &LossConfig) -> Result<f64> {
    check_same_shape("ubce", pred, target)?;
    check_same_shape("ubce sigma", pred, sigma)?;
    check_binary("ubce", target)?;
    check_sigma(sigma)?;
    let eps = cfg.bce_clamp_epsilon;
    let n = pred.len() as f64;
    let sum = Zip::from(pred)
        .and(target)
        .and(sigma)
        .fold(0.0, |acc, &p, &t, &s| {
            let p = clamp(p, eps);
            acc - (1.0 - s) * (t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
        });
    Ok(sum / n)
}

pub fn ubce_grad(pred: &Grid, target: &Mask, sigma: &Grid, cfg: &LossConfig) -> Result<Grid> {
    check_same_shape("ubce", pred, target)?;
    check_same_shape("ubce sigma", pred, sigma)?;
    check_binary("ubce", target)?;
    check_sigma(sigma)?;
    let eps = cfg.bce_clamp_epsilon;
    let n = pred.len() as f64;
    let mut g = Grid::zeros(pred.raw_dim());
    Zip::from(&mut g)
        .and(pred)
        .and(target)
        .and(sigma)
        .for_each(|o, &p, &t, &s| {
            if p > eps && p < 1.0 - eps {
                *o = (1.0 - s) * (-(t as f64) / p + (1.0 - t as f64) / (1.0 - p)) / n;
            }
        });
    Ok(g)
}

/// Soft Dice loss: `1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss(pred: &Grid, target: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_same_shape("dice", pred, target)?;
    check_binary("dice", target)?;
    let s = cfg.dice_smooth;
    let inter = Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + p * t as f64);
    let psum = pred.sum();
    let tsum = target.iter().map(|&t| t as f64).sum::<f64>();
    Ok(1.0 - (2.0 * inter + s) / (psum + tsum + s))
}

pub fn dice_loss_grad(pred: &Grid, target: &Mask, cfg: &LossConfig) -> Result<Grid> {
    check_same_shape("dice", pred, target)?;
    check_binary("dice", target)?;
    let s = cfg.dice_smooth;
    let inter = Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + p * t as f64);
    let psum = pred.sum();
    let tsum = target.iter().map(|&t| t as f64).sum::<f64>();
    let denom = psum + tsum + s;
    let num = 2.0 * inter + s;
    let mut g = Grid::zeros(pred.raw_dim());
    Zip::from(&mut g).and(target).for_each(|o, &t| {
        *o = -(2.0 * t as f64 * denom - num) / (denom * denom);
    });
    Ok(g)
}

/// The routed per-sample loss with its component breakdown.
pub fn combined_loss(
    pred: &Grid,
    target: &Mask,
    sigma: Option<&Grid>,
    routing: LossRouting,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_routing(sigma, routing)?;
    let dice = dice_loss(pred, target, cfg)?;
    let (bce_v, ubce_v) = match routing {
        LossRouting::FixedLabel => (bce(pred, target, cfg)?, 0.0),
        LossRouting::PseudoLabelWithUncertainty => {
            (0.0, ubce(pred, target, sigma.unwrap(), cfg)?)
        }
    };
    Ok(LossBreakdown {
        total: dice + bce_v + ubce_v,
        dice,
        bce: bce_v,
        ubce: ubce_v,
    })
}

/// [`combined_loss`] plus its gradient w.r.t. the prediction.
pub fn combined_loss_grad(
    pred: &Grid,
    target: &Mask,
    sigma: Option<&Grid>,
    routing: LossRouting,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Grid)> {
    let breakdown = combined_loss(pred, target, sigma, routing, cfg)?;
    let mut grad = dice_loss_grad(pred, target, cfg)?;
    match routing {
        LossRouting::FixedLabel => grad += &bce_grad(pred, target, cfg)?,
        LossRouting::PseudoLabelWithUncertainty => {
            grad += &ubce_grad(pred, target, sigma.unwrap(), cfg)?;
        }
    }
    Ok((breakdown, grad))
}

fn check_routing(sigma: Option<&Grid>, routing: LossRouting) -> Result<()> {
    match (routing, sigma) {
        (LossRouting::FixedLabel, Some(_)) => Err(Error::Routing(
            "sigma provided for a fixed-label sample".to_string(),
        )),
        (LossRouting::PseudoLabelWithUncertainty, None) => Err(Error::Routing(
            "pseudo-label routing requires an uncertainty map".to_string(),
        )),
        _ => Ok(()),
    }
}
