//! Weighted cross-entropy plus soft Dice objective.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; Dice gets `1 - lambda`.
    pub lambda: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!(
                "dice_smooth must be positive, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// Scalar loss tensors; `total` carries the graph for backprop.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub cross_entropy: Tensor,
    pub dice: Tensor,
}

impl LossOutput {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        Ok((f(&self.total)?, f(&self.cross_entropy)?, f(&self.dice)?))
    }
}

/// `logits` `(B, 2, H, W)` against a `(B, H, W)` target of zeros and ones.
///
/// Cross-entropy is averaged over all pixels; Dice is computed per sample on
/// the foreground probability map and averaged over the batch.
pub fn combined_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::Input(format!("expected 2 class channels, got {c}")));
    }
    if target.dims() != [b, h, w] {
        return Err(Error::Input(format!(
            "target shape {:?} does not match logits {:?}",
            target.dims(),
            logits.dims()
        )));
    }
    let target = target.to_dtype(logits.dtype())?;
    let off = (&target * target.affine(-1.0, 1.0)?)?
        .abs()?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if off != 0.0 {
        return Err(Error::Input("target contains values other than 0 and 1".into()));
    }

    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let log_bg = log_probs.narrow(1, 0, 1)?.squeeze(1)?;
    let log_fg = log_probs.narrow(1, 1, 1)?.squeeze(1)?;
    let ce = ((&target * &log_fg)? + (target.affine(-1.0, 1.0)? * &log_bg)?)?
        .neg()?
        .mean_all()?;

    let prob_fg = log_fg.exp()?.flatten_from(1)?;
    let g = target.flatten_from(1)?;
    let inter = (&prob_fg * &g)?.sum(D::Minus1)?;
    let denom = (prob_fg.sum(D::Minus1)? + g.sum(D::Minus1)?)?;
    let s = cfg.dice_smooth;
    let ratio = (inter.affine(2.0, s)? / denom.affine(1.0, s)?)?;
    let dice = ratio.affine(-1.0, 1.0)?.mean_all()?;

    let total = (ce.affine(cfg.lambda, 0.0)? + dice.affine(1.0 - cfg.lambda, 0.0)?)?;
    Ok(LossOutput {
        total,
        cross_entropy: ce,
        dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn config_bounds() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: 1.2, ..Default::default() }.validate().is_err());
        assert!(LossConfig { dice_smooth: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn rejects_bad_targets() -> Result<()> {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 2, 2, 2), candle_core::DType::F64, &dev)?;
        let bad = Tensor::new(&[[[0.0f64, 0.5], [1.0, 0.0]]], &dev)?;
        assert!(matches!(combined_loss(&logits, &bad, &LossConfig::default()), Err(Error::Input(_))));
        let wrong = Tensor::zeros((1, 3, 2), candle_core::DType::F64, &dev)?;
        assert!(matches!(combined_loss(&logits, &wrong, &LossConfig::default()), Err(Error::Input(_))));
        Ok(())
    }

    #[test]
    fn large_margin_drives_loss_to_zero() -> Result<()> {
        let dev = Device::Cpu;
        let t = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0]]], &dev)?;
        let fg = t.affine(80.0, -40.0)?;
        let logits = Tensor::stack(&[fg.neg()?, fg], 1)?;
        let (total, ce, dice) = combined_loss(&logits, &t, &LossConfig::default())?.values()?;
        assert!(ce < 1e-12 && dice < 1e-12 && total < 1e-12);
        Ok(())
    }
}
