//! Adadelta (Zeiler, 2012): per-parameter step sizes from running averages
//! of squared gradients and squared updates, with no global learning rate.

use super::model::{Gradients, ModelState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaParams {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaParams {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

impl AdadeltaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// One scalar Adadelta update. Accumulates `E[g^2]`, forms the step from the
/// previous `E[dx^2]`, then accumulates `E[dx^2]`. Returns the step to add.
#[inline]
pub fn adadelta_update(grad_sq: &mut f64, update_sq: &mut f64, g: f64, p: AdadeltaParams) -> f64 {
    *grad_sq = p.rho * *grad_sq + (1.0 - p.rho) * g * g;
    let dx = -((*update_sq + p.eps).sqrt() / (*grad_sq + p.eps).sqrt()) * g;
    *update_sq = p.rho * *update_sq + (1.0 - p.rho) * dx * dx;
    dx
}

/// Applies one update to every parameter and bumps the model version.
/// Non-finite gradients leave the model untouched.
pub fn adadelta_step(
    model: &mut ModelState,
    grads: &Gradients,
    params: AdadeltaParams,
) -> Result<()> {
    params.validate()?;
    if grads.tensors.len() != model.params.len()
        || grads
            .tensors
            .iter()
            .zip(&model.params)
            .any(|(g, p)| g.len() != p.len())
    {
        return Err(Error::Usage(
            "gradient tensors do not match the model".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    for (t, g) in grads.tensors.iter().enumerate() {
        let values = &mut model.params[t];
        let grad_sq = &mut model.grad_sq[t];
        let update_sq = &mut model.update_sq[t];
        for i in 0..g.len() {
            values[i] += adadelta_update(&mut grad_sq[i], &mut update_sq[i], g[i], params);
        }
    }
    model.version += 1;
    Ok(())
}
