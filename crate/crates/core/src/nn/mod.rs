//! Differentiable layers built on the tensor engine.

mod conv;
mod gru;
mod norm;

pub use conv::{conv3d, maxpool3d, output_dim, Conv3dParams};
pub use gru::{gru_bidirectional, GruDirection, GruOutput, GruParams};
pub use norm::{batchnorm, BatchNormState, BN_EPS, BN_MOMENTUM};

use crate::tensor::{Element, Result, Rng, Tensor, TensorError};

pub(crate) fn uniform_parameter<T: Element>(shape: &[usize], bound: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
    Tensor::parameter(data, shape)
}

pub struct Linear<T: Element> {
    /// `(K, D)`
    pub weight: Tensor<T>,
    /// `(K)`
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    /// Weight uniform in `±sqrt(1/D)`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: uniform_parameter(&[output, input], (1.0 / input as f64).sqrt(), rng)?,
            bias: Tensor::parameter(vec![T::zero(); output], &[output])?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `x . W^T + b` for `x` of shape `(B, D)`.
pub fn linear<T: Element>(x: &Tensor<T>, layer: &Linear<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[1] != layer.in_features() {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: layer.weight.shape().to_vec(),
        });
    }
    x.matmul(&layer.weight.t()?)?.add(&layer.bias)
}

/// Row-wise softmax of a `(B, K)` buffer, max-subtracted.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax_rows(&logits.data(), k);
    let mut total = T::zero();
    {
        let x = logits.data();
        for (row, &label) in x.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
    }
    let loss = total / T::of(b as f64);
    let labels = labels.to_vec();
    Ok(Tensor::from_rule(vec![loss], vec![], vec![logits.clone()], move |_, _, g| {
        let scale = g[0] / T::of(b as f64);
        let mut grad: Vec<T> = probs.iter().map(|&p| p * scale).collect();
        for (i, &label) in labels.iter().enumerate() {
            grad[i * k + label] -= scale;
        }
        vec![Some(grad)]
    }))
}

/// Identity forward; backward multiplies the incoming gradient by `-lambda`.
pub fn gradient_reversal<T: Element>(x: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let factor = T::of(-lambda);
    Tensor::from_rule(x.to_vec(), x.shape().to_vec(), vec![x.clone()], move |_, _, g| {
        vec![Some(g.iter().map(|&v| v * factor).collect())]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, grad_check_params};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let id = Linear {
            weight: Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        assert_eq!(linear(&x, &id).unwrap().to_vec(), x.to_vec());
        let zero = Linear {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]).unwrap(),
        };
        assert_eq!(linear(&x, &zero).unwrap().to_vec(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(linear(&Tensor::zeros(&[2, 3]), &zero).is_err());
    }

    #[test]
    fn linear_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(90 + seed);
            let layer = Linear::<f64>::init(4, 3, &mut rng).unwrap();
            *layer.bias.data_mut() = vec![0.1, -0.3, 0.7];
            let x = Tensor::parameter(random(&mut rng, &[5, 4]).to_vec(), &[5, 4]).unwrap();
            let w = random(&mut rng, &[5, 3]);
            let err = grad_check_params(
                || linear(&x, &layer)?.mul(&w).map(|v| v.sum_all()),
                &[x.clone(), layer.weight.clone(), layer.bias.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 15]);
        let loss = softmax_cross_entropy(&logits, &[0, 7, 14]).unwrap();
        assert!((loss.item() - 15f64.ln()).abs() < 1e-12);
        assert!((loss.item() - 2.70805).abs() < 1e-5);
    }

    #[test]
    fn large_margin_does_not_overflow() {
        let mut row = vec![0.0f32; 15];
        row[4] = 1000.0;
        let logits = Tensor::<f32>::from_vec(row, &[1, 15]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[4]).unwrap().item();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = Rng::new(7);
        let logits = random(&mut rng, &[4, 15]).scale(3.0);
        let labels = [0, 5, 14, 9];
        let loss = softmax_cross_entropy(&logits, &labels).unwrap().item();
        // direct form: -ln(exp(x_y) / sum exp(x_j)), no stabilization needed at this scale
        let x = logits.to_vec();
        let direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &x[i * 15..(i + 1) * 15];
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / denom).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss - direct).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(
            softmax_cross_entropy(&logits, &[3]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn cross_entropy_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(110 + seed);
            let x = random(&mut rng, &[4, 15]);
            let labels = [seed as usize % 15, 3, 11, 0];
            let err = grad_check(|x| softmax_cross_entropy(x, &labels), &x, 1e-5).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversal_forward_is_identity() {
        let x = Tensor::<f32>::parameter(vec![1.5, -2.25, 0.0], &[3]).unwrap();
        let y = gradient_reversal(&x, 0.7);
        assert_eq!(
            y.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn reversal_negates_and_annihilates() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        gradient_reversal(&x, 1.0).sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0; 3]);
        x.zero_grad();
        gradient_reversal(&x, 0.0).sum_all().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn double_reversal_is_transparent() {
        let mut rng = Rng::new(12);
        let x = Tensor::parameter(random(&mut rng, &[2, 3]).to_vec(), &[2, 3]).unwrap();
        let w = random(&mut rng, &[2, 3]);
        gradient_reversal(&gradient_reversal(&x, 1.0), 1.0).tanh().mul(&w).unwrap().sum_all().backward().unwrap();
        let with = x.grad().unwrap();
        x.zero_grad();
        x.tanh().mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(with, x.grad().unwrap());
    }
}
