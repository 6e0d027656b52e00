use super::{QuantileConfig, QuantileTriple};
use crate::error::{Error, Result};
use crate::image::Image;

#[inline]
fn pinball(residual: f64, q: f64) -> f64 {
    // residual = target - prediction
    if residual >= 0.0 {
        q * residual
    } else {
        (q - 1.0) * residual
    }
}

/// Derivative of the pinball loss with respect to the prediction.
#[inline]
fn pinball_grad(residual: f64, q: f64) -> f64 {
    if residual >= 0.0 {
        -q
    } else {
        1.0 - q
    }
}

/// Mean pinball loss of `pred` as an estimate of the `q`-quantile of `target`.
pub fn quantile_loss(target: &Image, pred: &Image, q: f64) -> Result<f64> {
    target.ensure_same_dims(pred, "quantile_loss")?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Input(format!("quantile level {q} outside (0, 1)")));
    }
    let n = target.len() as f64;
    Ok(target
        .pixels()
        .iter()
        .zip(pred.pixels())
        .map(|(x, p)| pinball(x - p, q))
        .sum::<f64>()
        / n)
}

pub fn mse_loss(target: &Image, pred: &Image) -> Result<f64> {
    target.ensure_same_dims(pred, "mse_loss")?;
    let n = target.len() as f64;
    Ok(target
        .pixels()
        .iter()
        .zip(pred.pixels())
        .map(|(x, p)| (x - p).powi(2))
        .sum::<f64>()
        / n)
}

/// Lower-quantile loss + squared error of the point estimate + upper-quantile
/// loss, each averaged over pixels.
pub fn combined_loss(triple: &QuantileTriple, target: &Image, qc: &QuantileConfig) -> Result<f64> {
    Ok(quantile_loss(target, &triple.lower, qc.q_low)?
        + mse_loss(target, &triple.mean)?
        + quantile_loss(target, &triple.upper, qc.q_high)?)
}

/// Combined loss over raw output planes plus its gradient with respect to
/// each plane. `grads` receives `[d_lower, d_mean, d_upper]`.
pub(crate) fn combined_loss_with_grad(
    outputs: [&[f64]; 3],
    target: &[f64],
    qc: &QuantileConfig,
    grads: [&mut [f64]; 3],
) -> f64 {
    let n = target.len() as f64;
    let [lo, mu, hi] = outputs;
    let [g_lo, g_mu, g_hi] = grads;
    let mut total = 0.0;
    for i in 0..target.len() {
        let x = target[i];
        let (r_lo, r_mu, r_hi) = (x - lo[i], x - mu[i], x - hi[i]);
        total += pinball(r_lo, qc.q_low) + r_mu * r_mu + pinball(r_hi, qc.q_high);
        g_lo[i] = pinball_grad(r_lo, qc.q_low) / n;
        g_mu[i] = -2.0 * r_mu / n;
        g_hi[i] = pinball_grad(r_hi, qc.q_high) / n;
    }
    total / n
}
