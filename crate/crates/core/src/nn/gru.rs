use crate::tensor::{Element, Result, Rng, Tensor, TensorError};

/// Weights of one GRU direction. Gate blocks are stacked `r | z | n` along
/// the first axis of every tensor.
pub struct GruDirection<T: Element> {
    /// `(3H, D_in)`
    pub w_ih: Tensor<T>,
    /// `(3H, H)`
    pub w_hh: Tensor<T>,
    /// `(3H)`
    pub b_ih: Tensor<T>,
    /// `(3H)`
    pub b_hh: Tensor<T>,
}

impl<T: Element> GruDirection<T> {
    /// Weights uniform in `±sqrt(1/H)`, zero biases.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (1.0 / hidden as f64).sqrt();
        Ok(GruDirection {
            w_ih: super::uniform_parameter(&[3 * hidden, input], bound, rng)?,
            w_hh: super::uniform_parameter(&[3 * hidden, hidden], bound, rng)?,
            b_ih: Tensor::parameter(vec![T::zero(); 3 * hidden], &[3 * hidden])?,
            b_hh: Tensor::parameter(vec![T::zero(); 3 * hidden], &[3 * hidden])?,
        })
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("b_ih", &self.b_ih), ("b_hh", &self.b_hh)]
    }
}

pub struct GruParams<T: Element> {
    pub hidden: usize,
    /// Per layer, `[forward, backward]`.
    pub layers: Vec<[GruDirection<T>; 2]>,
}

impl<T: Element> GruParams<T> {
    pub fn init(input: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Result<Self> {
        let mut stack = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { input } else { 2 * hidden };
            stack.push([GruDirection::init(d_in, hidden, rng)?, GruDirection::init(d_in, hidden, rng)?]);
        }
        Ok(GruParams { hidden, layers: stack })
    }
}

pub struct GruOutput<T: Element> {
    /// `(B, T, 2H)` from the last layer, forward half first.
    pub outputs: Tensor<T>,
    /// Per layer `[forward final, backward final]`, each `(B, H)`. The
    /// backward direction's final state is the one after consuming `t = 0`.
    pub finals: Vec<[Tensor<T>; 2]>,
}

/// Runs one direction over `(B, T, D)`; returns per-step states in time
/// order and the final state.
fn run_direction<T: Element>(x: &Tensor<T>, d: &GruDirection<T>, hidden: usize, reverse: bool) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let (b, t, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if d.w_ih.shape() != [3 * hidden, din] || d.w_hh.shape() != [3 * hidden, hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "gru",
            lhs: x.shape().to_vec(),
            rhs: d.w_ih.shape().to_vec(),
        });
    }
    let gi = x.reshape(&[b * t, din])?.matmul(&d.w_ih.t()?)?.add(&d.b_ih)?.reshape(&[b, t, 3 * hidden])?;
    let w_hh_t = d.w_hh.t()?;
    let mut h = Tensor::zeros(&[b, hidden]);
    let mut states: Vec<Option<Tensor<T>>> = vec![None; t];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t).rev()) } else { Box::new(0..t) };
    for step in order {
        let gi_t = gi.narrow(1, step, 1)?.reshape(&[b, 3 * hidden])?;
        let gh = h.matmul(&w_hh_t)?.add(&d.b_hh)?;
        let r = gi_t.narrow(1, 0, hidden)?.add(&gh.narrow(1, 0, hidden)?)?.sigmoid();
        let z = gi_t.narrow(1, hidden, hidden)?.add(&gh.narrow(1, hidden, hidden)?)?.sigmoid();
        let n = gi_t
            .narrow(1, 2 * hidden, hidden)?
            .add(&r.mul(&gh.narrow(1, 2 * hidden, hidden)?)?)?
            .tanh();
        // h' = (1 - z) * n + z * h
        h = z.one_minus().mul(&n)?.add(&z.mul(&h)?)?;
        states[step] = Some(h.clone());
    }
    Ok((states.into_iter().map(|s| s.expect("every step visited")).collect(), h))
}

/// Stacked bidirectional GRU over `(B, T, D_in)` with zero initial state.
pub fn gru_bidirectional<T: Element>(seq: &Tensor<T>, p: &GruParams<T>) -> Result<GruOutput<T>> {
    if seq.rank() != 3 {
        return Err(TensorError::Rank {
            op: "gru",
            expected: 3,
            got: seq.shape().to_vec(),
        });
    }
    let (b, t) = (seq.shape()[0], seq.shape()[1]);
    if t == 0 {
        return Err(TensorError::EmptySequence);
    }
    let h = p.hidden;
    let mut x = seq.clone();
    let mut finals = Vec::with_capacity(p.layers.len());
    for [fwd, bwd] in &p.layers {
        let (fs, ff) = run_direction(&x, fwd, h, false)?;
        let (bs, bf) = run_direction(&x, bwd, h, true)?;
        let stack = |states: Vec<Tensor<T>>| -> Result<Tensor<T>> {
            let parts = states.iter().map(|s| s.reshape(&[b, 1, h])).collect::<Result<Vec<_>>>()?;
            Tensor::concat(&parts, 1)
        };
        x = Tensor::concat(&[stack(fs)?, stack(bs)?], 2)?;
        finals.push([ff, bf]);
    }
    Ok(GruOutput { outputs: x, finals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check_params;

    fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.uniform(-scale, scale)).collect(), shape).unwrap()
    }

    fn zero_params(input: usize, hidden: usize) -> GruParams<f64> {
        let mut rng = Rng::new(0);
        let p = GruParams::init(input, hidden, 2, &mut rng).unwrap();
        for layer in &p.layers {
            for d in layer {
                for (_, t) in d.tensors() {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        p
    }

    #[test]
    fn zero_weights_hold_zero_state() {
        let p = zero_params(3, 4);
        let mut rng = Rng::new(1);
        let x = random(&mut rng, &[2, 5, 3], 1.0);
        let out = gru_bidirectional(&x, &p).unwrap();
        assert_eq!(out.outputs.shape(), &[2, 5, 8]);
        assert!(out.outputs.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_directions_agree() {
        let mut rng = Rng::new(2);
        let p = GruParams::<f64>::init(3, 4, 2, &mut rng).unwrap();
        for layer in &p.layers {
            let [f, b] = layer;
            for ((_, src), (_, dst)) in f.tensors().into_iter().zip(b.tensors()) {
                *dst.data_mut() = src.to_vec();
            }
        }
        let x = random(&mut rng, &[2, 1, 3], 1.0);
        let out = gru_bidirectional(&x, &p).unwrap();
        for [f, b] in &out.finals {
            assert_eq!(f.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn states_stay_inside_unit_interval() {
        let mut rng = Rng::new(3);
        let p = GruParams::<f64>::init(4, 5, 2, &mut rng).unwrap();
        let x = random(&mut rng, &[3, 6, 4], 5.0);
        let out = gru_bidirectional(&x, &p).unwrap();
        assert!(out.outputs.to_vec().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn empty_and_rank_errors() {
        let p = zero_params(2, 2);
        assert!(matches!(
            gru_bidirectional(&Tensor::<f64>::zeros(&[2, 2]), &p),
            Err(TensorError::Rank { .. })
        ));
    }

    #[test]
    fn backward_direction_reads_reversed_sequence() {
        let mut rng = Rng::new(4);
        let p = GruParams::<f64>::init(2, 3, 1, &mut rng).unwrap();
        let x = random(&mut rng, &[1, 4, 2], 1.0);
        let out = gru_bidirectional(&x, &p).unwrap();
        // backward half at t=0 is that direction's final state
        let first = out.outputs.narrow(1, 0, 1).unwrap().narrow(2, 3, 3).unwrap();
        assert_eq!(first.to_vec(), out.finals[0][1].to_vec());
        let last = out.outputs.narrow(1, 3, 1).unwrap().narrow(2, 0, 3).unwrap();
        assert_eq!(last.to_vec(), out.finals[0][0].to_vec());
    }

    #[test]
    fn gradcheck_all_parameters() {
        for seed in 0..3 {
            let mut rng = Rng::new(80 + seed);
            let p = GruParams::<f64>::init(3, 2, 2, &mut rng).unwrap();
            // nonzero biases so their gradients are exercised away from the origin
            for layer in &p.layers {
                for d in layer {
                    for t in [&d.b_ih, &d.b_hh] {
                        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
                    }
                }
            }
            let x = Tensor::parameter(random(&mut rng, &[2, 3, 3], 1.0).to_vec(), &[2, 3, 3]).unwrap();
            let mut params: Vec<Tensor<f64>> = vec![x.clone()];
            for layer in &p.layers {
                for d in layer {
                    params.extend(d.tensors().into_iter().map(|(_, t)| t.clone()));
                }
            }
            let err = grad_check_params(|| Ok(gru_bidirectional(&x, &p)?.outputs.sum_all()), &params, 1e-5).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
}
