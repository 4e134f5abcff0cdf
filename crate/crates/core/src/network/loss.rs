//! Weighted sum of the elastic interaction loss and pixelwise binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::elastic::{ElasticConfig, ElasticLoss, Field2D};
use crate::error::{Error, Result};
use crate::tensor::{softmax_channels_vjp, Tensor4};

/// Probability clamp for the cross-entropy logarithms.
pub const CE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the elastic term.
    pub beta1: f64,
    /// Weight of the cross-entropy term.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta1: 0.1, beta2: 1.5 }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        LossWeights { beta1: 0.0, beta2: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.beta1 == 0.0 && self.beta2 == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `β₁·elastic + β₂·ce`.
    pub total: f64,
    /// Unweighted batch-mean elastic energy.
    pub elastic: f64,
    /// Unweighted pixel-mean cross-entropy.
    pub cross_entropy: f64,
    /// `∂total/∂probabilities`, nonzero only on the foreground channel.
    pub grad_probabilities: Tensor4,
}

impl LossOutput {
    /// `∂total/∂logits` through the softmax that produced `pred`.
    pub fn grad_logits(&self, pred: &Tensor4) -> Result<Tensor4> {
        softmax_channels_vjp(pred, &self.grad_probabilities)
    }
}

fn check_prediction(pred: &Tensor4, targets: &[Field2D]) -> Result<()> {
    let [n, c, h, w] = pred.dims();
    if c != 2 {
        return Err(Error::shape(format!("prediction {:?}", pred.dims()), "2 class channels"));
    }
    if targets.len() != n {
        return Err(Error::shape(format!("prediction batch {n}"), format!("{} targets", targets.len())));
    }
    for t in targets {
        if t.dims() != (h, w) {
            return Err(Error::shape(format!("prediction {h}x{w}"), format!("target {:?}", t.dims())));
        }
        if !t.is_binary() {
            return Err(Error::Domain("target mask must contain only 0 and 1".into()));
        }
    }
    let tol = 1e-9;
    if let Some(v) = pred.data().iter().find(|v| !(-tol..=1.0 + tol).contains(*v)) {
        return Err(Error::Domain(format!("prediction value {v} is not a probability")));
    }
    for ni in 0..n {
        let (p0, p1) = (pred.plane_of(ni, 0), pred.plane_of(ni, 1));
        if let Some((a, b)) = p0.iter().zip(p1).find(|(a, b)| ((*a + *b) - 1.0).abs() > 1e-6) {
            return Err(Error::Domain(format!("class probabilities sum to {}, not 1", a + b)));
        }
    }
    Ok(())
}

/// Combined loss and its gradient with respect to the softmax output.
///
/// `elastic` must be built for the prediction's spatial size; pass `None`
/// when `β₁ = 0` to skip the spectral evaluation.
pub fn loss_total(
    pred: &Tensor4,
    targets: &[Field2D],
    weights: &LossWeights,
    elastic: Option<&ElasticLoss>,
) -> Result<LossOutput> {
    weights.validate()?;
    check_prediction(pred, targets)?;
    let [n, _, h, w] = pred.dims();
    let mut grad = Tensor4::zeros(pred.dims());

    let mut elastic_mean = 0.0;
    if weights.beta1 > 0.0 {
        let op = elastic.ok_or_else(|| Error::Config("elastic term weighted but no elastic evaluator given".into()))?;
        for (ni, target) in targets.iter().enumerate() {
            let fg = Field2D::from_vec(h, w, pred.plane_of(ni, 1).iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            let (e, g) = op.value_and_grad(&fg, target)?;
            elastic_mean += e / n as f64;
            for (d, gv) in grad.plane_of_mut(ni, 1).iter_mut().zip(g.data()) {
                *d += weights.beta1 * gv / n as f64;
            }
        }
    }

    let count = (n * h * w) as f64;
    let mut ce = 0.0;
    for (ni, target) in targets.iter().enumerate() {
        let p1 = pred.plane_of(ni, 1).to_vec();
        let dst = grad.plane_of_mut(ni, 1);
        for ((d, &p), &g) in dst.iter_mut().zip(&p1).zip(target.data()) {
            let pc = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
            ce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
            if p > CE_EPSILON && p < 1.0 - CE_EPSILON {
                *d += weights.beta2 * (-g / pc + (1.0 - g) / (1.0 - pc)) / count;
            }
        }
    }
    ce /= count;

    Ok(LossOutput {
        total: weights.beta1 * elastic_mean + weights.beta2 * ce,
        elastic: elastic_mean,
        cross_entropy: ce,
        grad_probabilities: grad,
    })
}

/// Convenience wrapper building the elastic evaluator from its configuration.
pub fn loss_total_with_config(
    pred: &Tensor4,
    targets: &[Field2D],
    weights: &LossWeights,
    elastic_cfg: &ElasticConfig,
) -> Result<LossOutput> {
    let op = if weights.beta1 > 0.0 {
        Some(ElasticLoss::new(pred.height(), pred.width(), *elastic_cfg)?)
    } else {
        None
    };
    loss_total(pred, targets, weights, op.as_ref())
}
