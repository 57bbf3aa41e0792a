use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one buffer per parameter in the order the parameters
/// are passed to [`adam_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter from its stored
/// gradient.
pub fn adam_step<T: Element>(params: &[(String, Tensor<T>)], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<(), TrainError> {
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::OptimizerState {
            expected: params.len(),
            got: state.m.len(),
        });
    }
    let mut grads = Vec::with_capacity(params.len());
    for ((name, p), m) in params.iter().zip(&state.m) {
        let g = p.grad().ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.len() != p.numel() || m.len() != p.numel() {
            return Err(TrainError::GradientShape {
                name: name.clone(),
                param: p.numel(),
                grad: g.len(),
            });
        }
        grads.push(g);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps, lr) = (T::one(), T::of(cfg.eps), T::of(cfg.lr));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    for (i, (_, p)) in params.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.data_mut();
        for (j, &g) in grads[i].iter().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>) -> (String, Tensor<f64>) {
        let n = v.len();
        ("p".to_string(), Tensor::parameter(v, &[n]).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (name, p) = param(vec![0.5]);
        p.scale(1.0).sum_all().backward().unwrap();
        let mut state = AdamState::new();
        adam_step(&[(name, p.clone())], &mut state, &AdamConfig::default()).unwrap();
        let delta = p.item() - 0.5;
        let expected = -1e-5 * (1.0 / (1.0 + 1e-8));
        assert!((delta - expected).abs() < 1e-15, "{delta}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let (name, p) = param(vec![1.0, -2.0]);
        let params = [(name, p.clone())];
        let mut state = AdamState::new();
        p.scale(3.0).sum_all().backward().unwrap();
        adam_step(&params, &mut state, &AdamConfig::default()).unwrap();
        let before = p.to_vec();
        let m_before = state.m[0].clone();
        p.zero_grad();
        // materialize a zero gradient
        p.scale(0.0).sum_all().backward().unwrap();
        adam_step(&params, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(state.m[0], m_before.iter().map(|m| 0.9 * m).collect::<Vec<_>>());
        assert!(state.v[0].iter().all(|&v| v >= 0.0));
        // the bias-corrected first moment is still nonzero, so parameters keep moving
        assert_ne!(p.to_vec(), before);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_stationary() {
        let (name, p) = param(vec![1.0, -2.0]);
        p.scale(0.0).sum_all().backward().unwrap();
        let mut state = AdamState::new();
        adam_step(&[(name, p.clone())], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (name, p) = param(vec![1.0]);
        let err = adam_step(&[(name, p)], &mut AdamState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::MissingGradient(ref n) if n == "p"));
    }

    #[test]
    fn identical_runs_agree_bitwise() {
        let run = || {
            let (name, p) = param(vec![0.3, -0.7, 1.1]);
            let params = [(name, p.clone())];
            let mut state = AdamState::new();
            for _ in 0..20 {
                p.zero_grad();
                p.mul(&p).unwrap().sum_all().backward().unwrap();
                adam_step(&params, &mut state, &AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
            }
            p.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
