//! Central-difference gradient checking, used as a test oracle.

use super::{Result, Tensor, TensorError};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Max over elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for the gradient of scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::parameter(x.to_vec(), x.shape())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let base = x.to_vec();
    let mut worst = 0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = base.clone();
            probe[i] += delta;
            scalar_of(&f(&Tensor::from_vec(probe, x.shape())?)?)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same measure taken jointly over several parameter tensors that `f`
/// closes over. Parameter values are perturbed in place and restored.
pub fn grad_check_params<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut worst = 0f64;
    for (p, grad) in params.iter().zip(&analytic) {
        for (i, &g) in grad.iter().enumerate() {
            let original = p.data()[i];
            p.data_mut()[i] = original + eps;
            let up = scalar_of(&f()?)?;
            p.data_mut()[i] = original - eps;
            let down = scalar_of(&f()?)?;
            p.data_mut()[i] = original;
            worst = worst.max(relative_error(g, (up - down) / (2.0 * eps)));
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}
