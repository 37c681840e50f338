//! SGD with classical momentum: `v' = momentum * v + g`,
//! `w' = w - lr * v'` (no dampening, no Nesterov).

use super::ModelParams;
use crate::error::{Error, Result};

/// One in-place optimizer step. `velocity` carries state across steps
/// and must have the same length as the parameter vector.
pub fn sgd_step(
    params: &mut ModelParams,
    grad: &[f64],
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::input(format!("momentum {momentum} outside [0, 1)")));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::input(format!("learning rate {lr} must be finite and >= 0")));
    }
    if grad.len() != params.dim() || velocity.len() != params.dim() {
        return Err(Error::shape(format!(
            "gradient/velocity length {}/{} vs {} parameters",
            grad.len(),
            velocity.len(),
            params.dim()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericFault {
            round: 0,
            detail: format!("non-finite gradient entry at coordinate {i}"),
        });
    }
    for ((w, v), g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture, FeatureShape, LayerSpec};

    fn tiny_params(vals: Vec<f64>) -> ModelParams {
        let arch = Architecture::new(
            FeatureShape::Flat(1),
            vec![LayerSpec::Dense {
                in_dim: 1,
                out_dim: 2,
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        ModelParams {
            index: arch.param_index(),
            values: vals,
        }
    }

    #[test]
    fn vanilla_step_moves_by_lr_times_grad() {
        let mut p = tiny_params(vec![1.0, 2.0, 3.0, 4.0]);
        let g = vec![0.5, -1.0, 0.0, 2.0];
        let mut v = vec![0.0; 4];
        sgd_step(&mut p, &g, 0.1, 0.0, &mut v).unwrap();
        assert_eq!(p.values, vec![1.0 - 0.05, 2.0 + 0.1, 3.0, 4.0 - 0.2]);
    }

    #[test]
    fn zero_grad_zero_velocity_is_identity() {
        let mut p = tiny_params(vec![1.0, -2.0, 0.5, 0.0]);
        let before = p.values.clone();
        let mut v = vec![0.0; 4];
        sgd_step(&mut p, &[0.0; 4], 0.3, 0.9, &mut v).unwrap();
        assert_eq!(p.values, before);
    }

    #[test]
    fn two_momentum_steps_on_constant_gradient() {
        // v1 = g, v2 = 0.9 g + g; total displacement = lr*g*(1 + 1.9).
        let mut p = tiny_params(vec![0.0; 4]);
        let g = vec![1.0, 2.0, -1.0, 0.5];
        let mut v = vec![0.0; 4];
        let lr = 0.1;
        sgd_step(&mut p, &g, lr, 0.9, &mut v).unwrap();
        sgd_step(&mut p, &g, lr, 0.9, &mut v).unwrap();
        for (w, gi) in p.values.iter().zip(&g) {
            assert!((w - (-lr * gi * (1.0 + 1.9))).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_fault() {
        let mut p = tiny_params(vec![0.0; 4]);
        let mut v = vec![0.0; 4];
        let err = sgd_step(&mut p, &[0.0, f64::NAN, 0.0, 0.0], 0.1, 0.0, &mut v).unwrap_err();
        assert!(matches!(err, crate::error::Error::NumericFault { .. }));
    }
}
