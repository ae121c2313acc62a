//! Masked smooth-L1 losses on the full, quarter and intermediate outputs.

use tdstereo_tensor::{CustomOp, Graph, Tensor, Var};

use crate::disparity::DisparityMap;
use crate::error::{invalid, Error, Result};
use crate::lrr::{forward_warp, WarpDirection};
use crate::model::Forward;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Full-resolution output.
    pub lambda0: f64,
    /// 1/4-resolution output.
    pub lambda1: f64,
    /// 1/8 head.
    pub lambda2: f64,
    /// 1/16 head.
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 0.3,
            lambda2: 0.2,
            lambda3: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda0, self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {l:?}")));
        }
        Ok(())
    }
}

/// `0.5x²` for `|x| < 1`, `|x| − 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative; at `|x| = 1` the linear branch applies.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

struct SmoothL1Op {
    target: Tensor,
    mask: Tensor,
    count: usize,
}

impl CustomOp for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> tdstereo_tensor::Result<Vec<Option<Tensor>>> {
        let pred = inputs[0];
        let g = grad.data()[0] / self.count.max(1) as f64;
        let out = Tensor::from_fn(pred.shape().to_vec(), |i| {
            if self.mask.data()[i] == 1.0 {
                g * smooth_l1_grad(pred.data()[i] - self.target.data()[i])
            } else {
                0.0
            }
        });
        Ok(vec![Some(out)])
    }
}

/// Mean smooth-L1 of `pred − gt` over the valid pixels of `gt`; 0 when
/// there are none.
pub fn smooth_l1_loss(g: &mut Graph, pred: Var, gt: &DisparityMap) -> Result<Var> {
    if g.shape(pred) != gt.values().shape() {
        return Err(invalid(format!(
            "prediction {:?} and ground truth {:?} differ in resolution",
            g.shape(pred),
            gt.values().shape()
        )));
    }
    let p = g.value(pred);
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..p.len() {
        if gt.valid().data()[i] == 1.0 {
            sum += smooth_l1(p.data()[i] - gt.values().data()[i]);
            count += 1;
        }
    }
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(g.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(SmoothL1Op {
            target: gt.values().clone(),
            mask: gt.valid().clone(),
            count,
        }),
    )?)
}

/// Individually weighted terms of the objective; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub full: f64,
    pub quarter: f64,
    pub left8: f64,
    pub left16: f64,
    pub right8: f64,
    pub right16: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn basic(&self) -> f64 {
        self.full + self.quarter
    }

    pub fn intermediate(&self) -> f64 {
        self.left8 + self.left16 + self.right8 + self.right16
    }
}

/// Supervision targets derived from full-resolution left ground truth.
#[derive(Debug, Clone)]
pub struct Targets {
    pub full: DisparityMap,
    /// Valid-aware 4×4 pooling, in 1/4-resolution units.
    pub quarter: DisparityMap,
    /// The quarter target forward-warped into the right view; holes invalid.
    pub right_quarter: DisparityMap,
}

impl Targets {
    pub fn new(gt: &DisparityMap) -> Result<Self> {
        let quarter = gt.downsample(4)?;
        let right_quarter = forward_warp(&quarter, WarpDirection::LeftToRight)?.to_map()?;
        Ok(Self {
            full: gt.clone(),
            quarter,
            right_quarter,
        })
    }
}

fn weighted(g: &mut Graph, pred: Var, gt: &DisparityMap, lambda: f64) -> Result<(Var, f64)> {
    let l = smooth_l1_loss(g, pred, gt)?;
    let l = g.scale(l, lambda)?;
    let v = g.value(l).data()[0];
    Ok((l, v))
}

/// Basic loss on the full and quarter outputs plus, when the forward pass
/// produced heads, the intermediate loss on both views.
pub fn compute_loss(g: &mut Graph, out: &Forward, targets: &Targets, cfg: &LossConfig) -> Result<(Var, LossTerms)> {
    let mut terms = LossTerms::default();
    let (full, v) = weighted(g, out.full, &targets.full, cfg.lambda0)?;
    terms.full = v;
    let (quarter, v) = weighted(g, out.quarter, &targets.quarter, cfg.lambda1)?;
    terms.quarter = v;
    let mut parts = vec![full, quarter];
    if let Some(h) = &out.heads {
        let items = [
            (h.left8, &targets.quarter, cfg.lambda2, &mut terms.left8),
            (h.left16, &targets.quarter, cfg.lambda3, &mut terms.left16),
            (h.right8, &targets.right_quarter, cfg.lambda2, &mut terms.right8),
            (h.right16, &targets.right_quarter, cfg.lambda3, &mut terms.right16),
        ];
        for (pred, gt, lambda, slot) in items {
            let (l, v) = weighted(g, pred, gt, lambda)?;
            *slot = v;
            parts.push(l);
        }
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    terms.total = g.value(total).data()[0];
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> DisparityMap {
        DisparityMap::dense(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    fn loss_of(pred: &[f64], gt: &DisparityMap) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, pred.len()], pred.to_vec()).unwrap());
        let l = smooth_l1_loss(&mut g, p, gt).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn branch_values() {
        assert_eq!(loss_of(&[1.0, 2.0], &map(&[1.0, 2.0])), 0.0);
        assert_eq!(loss_of(&[0.5], &map(&[0.0])), 0.125);
        assert_eq!(loss_of(&[0.5, 2.0], &map(&[0.0, 0.0])), 0.8125);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let gt = map(&[1.0, 2.0]).masked(|_| false);
        assert_eq!(loss_of(&[5.0, 7.0], &gt), 0.0);
    }

    #[test]
    fn kink_uses_linear_branch() {
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert_eq!(smooth_l1_grad(-1.0), -1.0);
        assert_eq!(smooth_l1(1.0), 0.5);
    }

    #[test]
    fn resolution_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(smooth_l1_loss(&mut g, p, &map(&[0.0, 0.0])).is_err());
    }
}
