//! Central finite-difference oracles for gradients and the Hessian
//! diagonal. Test-grade reference implementations: O(d) loss
//! evaluations per call, intended for small fixtures only.

use super::{forward, Architecture, Batch, ModelParams};
use crate::error::{Error, Result};

/// Central-difference gradient of an arbitrary scalar function.
pub fn fd_gradient_fn<F>(mut f: F, w: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::input("finite-difference step must be positive"));
    }
    let mut probe = w.to_vec();
    let mut grad = vec![0.0; w.len()];
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Second central differences for the Hessian diagonal of an arbitrary
/// scalar function. Entries may be negative on non-convex losses.
pub fn fd_diag_hessian_fn<F>(mut f: F, w: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::input("finite-difference step must be positive"));
    }
    let center = f(w);
    let mut probe = w.to_vec();
    let mut diag = vec![0.0; w.len()];
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        diag[i] = (up - 2.0 * center + down) / (step * step);
    }
    Ok(diag)
}

fn batch_loss(arch: &Architecture, template: &ModelParams, batch: &Batch, values: &[f64]) -> f64 {
    let params = ModelParams {
        values: values.to_vec(),
        index: template.index.clone(),
    };
    forward(arch, &params, batch).expect("shapes validated before probing").0
}

/// Finite-difference gradient of the batch loss.
pub fn fd_gradient(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Batch,
    step: f64,
) -> Result<Vec<f64>> {
    forward(arch, params, batch)?;
    fd_gradient_fn(|v| batch_loss(arch, params, batch, v), &params.values, step)
}

/// Finite-difference Hessian diagonal of the batch loss.
pub fn fd_diag_hessian(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Batch,
    step: f64,
) -> Result<Vec<f64>> {
    forward(arch, params, batch)?;
    fd_diag_hessian_fn(|v| batch_loss(arch, params, batch, v), &params.values, step)
}
