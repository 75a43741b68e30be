//! Central finite-difference validation of the analytic gradients.
//!
//! Everything runs in 64-bit. The reported figure is the worst relative
//! error over all parameters, with the denominator floored so that near-zero
//! gradient pairs are compared on an absolute scale.

use crate::error::{Error, Result};

use super::model::{chunk_loss, chunk_loss_backward, ChunkSample};
use super::params::ModelParams;

/// A differentiable scalar objective over the model parameters.
pub trait LossFunction {
    fn loss(&self, params: &ModelParams) -> Result<f64>;
    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, Vec<f64>)>;
}

/// Mean chunk loss over a fixed batch of samples, the objective used in
/// training.
pub struct ChunkBatchLoss<'a> {
    pub samples: &'a [ChunkSample],
    pub minlen_weight: f64,
    pub tau: f64,
}

impl LossFunction for ChunkBatchLoss<'_> {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in self.samples {
            let stats = chunk_loss(params, s, self.minlen_weight, self.tau)?;
            if !stats.skipped {
                total += stats.total;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, Vec<f64>)> {
        // Two passes: the effective batch size excludes skipped samples.
        let mut active = 0usize;
        for s in self.samples {
            if !chunk_loss(params, s, self.minlen_weight, self.tau)?.skipped {
                active += 1;
            }
        }
        let mut grad = params.zeros_like();
        if active == 0 {
            return Ok((0.0, grad));
        }
        let scale = 1.0 / active as f64;
        let mut total = 0.0;
        for s in self.samples {
            let stats =
                chunk_loss_backward(params, s, self.minlen_weight, self.tau, scale, &mut grad)?;
            if !stats.skipped {
                total += stats.total;
            }
        }
        Ok((total * scale, grad))
    }
}

/// Compares analytic gradients against central finite differences and
/// returns the worst relative error over all parameters.
pub fn gradient_check(
    params: &ModelParams,
    objective: &dyn LossFunction,
    perturbation: f64,
) -> Result<f64> {
    let (loss0, grad) = objective.loss_and_grad(params)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss0}")));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for j in 0..probe.data.len() {
        let original = probe.data[j];
        probe.data[j] = original + perturbation;
        let up = objective.loss(&probe)?;
        probe.data[j] = original - perturbation;
        let down = objective.loss(&probe)?;
        probe.data[j] = original;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("perturbed loss at parameter {j}")));
        }
        let numeric = (up - down) / (2.0 * perturbation);
        let denom = (grad[j].abs() + numeric.abs()).max(1e-3);
        let rel = (grad[j] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
