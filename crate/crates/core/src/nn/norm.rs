use crate::tensor::{Element, Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel normalization over every axis except axis 1.
pub struct BatchNormState<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Buffers, updated in place during training-mode forwards.
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::parameter(vec![T::one(); channels], &[channels]).expect("positive channel count"),
            beta: Tensor::parameter(vec![T::zero(); channels], &[channels]).expect("positive channel count"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Normalize `input` of shape `(B, C, ...)`. Training mode uses batch
/// statistics and folds them into the running estimates; eval mode reads
/// the running estimates and leaves them untouched.
pub fn batchnorm<T: Element>(input: &Tensor<T>, s: &BatchNormState<T>, training: bool) -> Result<Tensor<T>> {
    let shape = input.shape();
    let c = s.channels();
    if shape.len() < 2 || shape[1] != c {
        return Err(TensorError::ChannelMismatch {
            op: "batchnorm",
            input: shape.get(1).copied().unwrap_or(0),
            weight: c,
        });
    }
    let mut bshape = vec![1; shape.len()];
    bshape[1] = c;
    let gamma = s.gamma.reshape(&bshape)?;
    let beta = s.beta.reshape(&bshape)?;
    if training {
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let count = input.numel() / c;
        let mean = input.mean(&axes)?;
        let centered = input.sub(&mean)?;
        let var = centered.mul(&centered)?.mean(&axes)?;
        let inv_std = var.add_scalar(s.eps).powf(-0.5);
        let out = centered.mul(&inv_std)?.mul(&gamma)?.add(&beta)?;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let m = T::of(s.momentum);
        let keep = T::one() - m;
        {
            let bm = mean.data();
            let mut rm = s.running_mean.data_mut();
            rm.iter_mut().zip(bm.iter()).for_each(|(r, &b)| *r = keep * *r + m * b);
        }
        {
            let bv = var.data();
            let mut rv = s.running_var.data_mut();
            rv.iter_mut()
                .zip(bv.iter())
                .for_each(|(r, &b)| *r = keep * *r + m * b * T::of(unbias));
        }
        Ok(out)
    } else {
        let mean = s.running_mean.detach().reshape(&bshape)?;
        let inv_std: Vec<T> = s
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::of(s.eps)).sqrt())
            .collect();
        let inv_std = Tensor::from_vec(inv_std, &bshape)?;
        input.sub(&mean)?.mul(&inv_std)?.mul(&gamma)?.add(&beta)
    }
}
