//! Sigmoid focal loss on logits.
//!
//! With `Xt = y X` for a label `y` in `{+1, -1}` and `p_t = sigmoid(Xt)`:
//!
//! ```text
//! FL = -alpha (1 - p_t)^gamma ln p_t
//!    = alpha exp(-gamma softplus(Xt)) softplus(-Xt)
//!
//! dFL/dX = -y alpha (1 - p_t)^gamma [gamma p_t (-ln p_t) + (1 - p_t)]
//! ```
//!
//! `softplus(z) = max(z, 0) + ln(1 + exp(-|z|))` keeps both forms finite
//! for any finite logit. With `gamma = 0, alpha = 1` this is binary
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight positives by `alpha` and negatives by `1 - alpha` instead of
    /// applying `alpha` to both.
    pub class_weighted: bool,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 1.5,
            class_weighted: false,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!(
                "focal loss needs alpha in (0, 1] and gamma >= 0, got alpha={} gamma={}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }

    fn weight(&self, y: f64) -> f64 {
        if self.class_weighted && y < 0.0 {
            1.0 - self.alpha
        } else {
            self.alpha
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maps a `{1, 0}` patch label to `{+1, -1}`.
pub fn signed_label(label01: f64) -> f64 {
    if label01 > 0.5 {
        1.0
    } else {
        -1.0
    }
}

fn check(x: f64, y: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("focal loss logit {x}")));
    }
    if y != 1.0 && y != -1.0 {
        return Err(Error::invalid(format!("focal loss label must be +1 or -1, got {y}")));
    }
    Ok(())
}

pub fn focal_loss(x: f64, y: f64, p: &FocalParams) -> Result<f64> {
    check(x, y)?;
    let xt = y * x;
    let modulating = if p.gamma == 0.0 { 1.0 } else { (-p.gamma * softplus(xt)).exp() };
    Ok(p.weight(y) * modulating * softplus(-xt))
}

pub fn focal_loss_grad(x: f64, y: f64, p: &FocalParams) -> Result<f64> {
    check(x, y)?;
    let xt = y * x;
    let pt = sigmoid(xt);
    let qt = sigmoid(-xt);
    let modulating = if p.gamma == 0.0 { 1.0 } else { (-p.gamma * softplus(xt)).exp() };
    let neg_log_pt = softplus(-xt);
    Ok(-y * p.weight(y) * modulating * (p.gamma * pt * neg_log_pt + qt))
}

/// Plain binary cross-entropy `ln(1 + exp(-Xt))`.
pub fn cross_entropy(x: f64, y: f64) -> Result<f64> {
    check(x, y)?;
    Ok(softplus(-y * x))
}

/// Mean focal loss and its gradient with respect to each logit.
pub fn batch_loss(logits: &[f64], labels: &[f64], p: &FocalParams) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::invalid("focal loss over an empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        total += focal_loss(x, y, p)?;
        grads.push(focal_loss_grad(x, y, p)? / n);
    }
    Ok((total / n, grads))
}
