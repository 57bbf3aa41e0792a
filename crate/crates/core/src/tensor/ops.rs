use super::{numel, strides, Backward, Element, Result, Tensor, TensorError};

type Rule<T> = dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>>;

struct FnBackward<T: Element> {
    parents: Vec<Tensor<T>>,
    rule: Box<Rule<T>>,
}

impl<T: Element> Backward<T> for FnBackward<T> {
    fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }

    fn backward(&self, output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        (self.rule)(&self.parents, output, grad)
    }
}

impl<T: Element> Tensor<T> {
    /// Output of an operation whose derivative rule is `rule(parents, output, grad)`.
    pub(crate) fn from_rule(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        rule: impl Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        Tensor::from_op(
            data,
            shape,
            FnBackward {
                parents,
                rule: Box::new(rule),
            },
        )
    }
}

/// Visit every index of `shape` in row-major order, passing the linear index
/// together with offsets under two stride vectors.
pub(crate) fn walk(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut lin) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(lin + j, oa + j * ia, ob + j * ib);
        }
        lin += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` right-aligned into `out_rank` dims, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Sum `grad` (shaped like `out_shape`) back down to `shape`.
fn reduce_to<T: Element>(grad: &[T], out_shape: &[usize], shape: &[usize]) -> Vec<T> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); numel(shape)];
    let dst = broadcast_strides(shape, out_shape);
    let src = strides(out_shape);
    walk(out_shape, &src, &dst, |_, s, d| acc[d] += grad[s]);
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise binary operation with NumPy-style broadcasting.
pub fn ew_binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let name = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let data = {
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut k = 0;
            walk(&out_shape, &sa, &sb, |_, ia, ib| {
                out[k] = f(ad[ia], bd[ib]);
                k += 1;
            });
            out
        }
    };
    let shape_for_rule = out_shape.clone();
    Ok(Tensor::from_rule(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        move |p, _out, g| {
            let (a, b) = (&p[0], &p[1]);
            let os = &shape_for_rule;
            // Upstream gradient scaled by the other operand, in output layout.
            let scaled = |other: &Tensor<T>, transform: &dyn Fn(T, T) -> T| -> Vec<T> {
                let od = other.data();
                let so = broadcast_strides(other.shape(), os);
                let contiguous = strides(os);
                let mut v = vec![T::zero(); g.len()];
                walk(os, &contiguous, &so, |i, _, io| v[i] = transform(g[i], od[io]));
                v
            };
            let ga = a.requires_grad().then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => reduce_to(g, os, a.shape()),
                BinaryKind::Mul => reduce_to(&scaled(b, &|g, y| g * y), os, a.shape()),
                BinaryKind::Div => reduce_to(&scaled(b, &|g, y| g / y), os, a.shape()),
            });
            let gb = b.requires_grad().then(|| match kind {
                BinaryKind::Add => reduce_to(g, os, b.shape()),
                BinaryKind::Sub => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    reduce_to(&neg, os, b.shape())
                }
                BinaryKind::Mul => reduce_to(&scaled(a, &|g, x| g * x), os, b.shape()),
                BinaryKind::Div => {
                    // d(x/y)/dy = -x / y^2
                    let ad = a.data();
                    let bd = b.data();
                    let sa = broadcast_strides(a.shape(), os);
                    let sb = broadcast_strides(b.shape(), os);
                    let mut v = vec![T::zero(); g.len()];
                    let mut k = 0;
                    walk(os, &sa, &sb, |_, ia, ib| {
                        let y = bd[ib];
                        v[k] = -g[k] * ad[ia] / (y * y);
                        k += 1;
                    });
                    reduce_to(&v, os, b.shape())
                }
            });
            vec![ga, gb]
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Sigmoid => x.unary(
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        ),
        Activation::Tanh => x.unary(|v| v.tanh(), |_, y| T::one() - y * y),
        Activation::Relu => x.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes`, keeping them as size-1 dimensions.
pub fn reduce<T: Element>(x: &Tensor<T>, kind: ReduceKind, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut reduced = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(TensorError::InvalidAxis {
                op: "reduce",
                axis: ax,
                rank,
            });
        }
        reduced[ax] = true;
    }
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let count = numel(x.shape()) / numel(&out_shape);
    let in_strides = strides(x.shape());
    let out_strides: Vec<usize> = strides(&out_shape)
        .into_iter()
        .zip(&reduced)
        .map(|(s, &r)| if r { 0 } else { s })
        .collect();
    let n_out = numel(&out_shape);
    let xd = x.data();
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut out = vec![T::zero(); n_out];
            walk(x.shape(), &in_strides, &out_strides, |_, i, o| out[o] += xd[i]);
            let scale = if kind == ReduceKind::Mean {
                T::one() / T::of(count as f64)
            } else {
                T::one()
            };
            if kind == ReduceKind::Mean {
                out.iter_mut().for_each(|v| *v *= scale);
            }
            let in_shape = x.shape().to_vec();
            drop(xd);
            Ok(Tensor::from_rule(out, out_shape, vec![x.clone()], move |_, _, g| {
                let mut gx = vec![T::zero(); numel(&in_shape)];
                walk(&in_shape, &strides(&in_shape), &out_strides, |_, i, o| gx[i] = g[o] * scale);
                vec![Some(gx)]
            }))
        }
        ReduceKind::Max => {
            let mut out = vec![T::neg_infinity(); n_out];
            let mut arg = vec![usize::MAX; n_out];
            walk(x.shape(), &in_strides, &out_strides, |_, i, o| {
                // strict comparison keeps the first occurrence on ties
                if arg[o] == usize::MAX || xd[i] > out[o] {
                    out[o] = xd[i];
                    arg[o] = i;
                }
            });
            let n_in = x.numel();
            drop(xd);
            Ok(Tensor::from_rule(out, out_shape, vec![x.clone()], move |_, _, g| {
                let mut gx = vec![T::zero(); n_in];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }))
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ew_binary(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ew_binary(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ew_binary(self, other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ew_binary(self, other, BinaryKind::Div)
    }

    /// Elementwise map with derivative `deriv(x, y)` where `y = f(x)`.
    pub(crate) fn unary(&self, f: impl Fn(T) -> T, deriv: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_rule(data, self.shape().to_vec(), vec![self.clone()], move |p, out, g| {
            let x = p[0].data();
            let gx = x
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &g)| g * deriv(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        activation(self, Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<T> {
        activation(self, Activation::Tanh)
    }

    pub fn relu(&self) -> Tensor<T> {
        activation(self, Activation::Relu)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        let e = T::of(p);
        self.unary(move |v| v.powf(e), move |x, _| e * x.powf(e - T::one()))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |v| v + c, |_, _| T::one())
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Tensor<T> {
        self.unary(|v| T::one() - v, |_, _| -T::one())
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Tensor<T>> {
        reduce(self, ReduceKind::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor<T>> {
        reduce(self, ReduceKind::Mean, axes)
    }

    pub fn max(&self, axes: &[usize]) -> Result<Tensor<T>> {
        reduce(self, ReduceKind::Max, axes)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        reduce(self, ReduceKind::Sum, &axes)
            .and_then(|t| t.reshape(&[]))
            .expect("full reduction is always valid")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        reduce(self, ReduceKind::Mean, &axes)
            .and_then(|t| t.reshape(&[]))
            .expect("full reduction is always valid")
    }

    /// Standard `(m,k) x (k,n)` matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::InnerDimension {
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data(),
            (k as isize, 1),
            &other.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(Tensor::from_rule(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |p, _, g| {
                let (a, b) = (&p[0], &p[1]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    // dA = G . B^T
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), &b.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    // dB = A^T . G
                    T::gemm(k, m, n, T::one(), &a.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                got: self.shape().to_vec(),
            });
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_rule(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |_, _, g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let contiguous = strides(&out_shape);
        let mut out = vec![T::zero(); self.numel()];
        {
            let x = self.data();
            walk(&out_shape, &contiguous, &gather, |o, _, i| out[o] = x[i]);
        }
        let n = self.numel();
        let shape_for_rule = out_shape.clone();
        Ok(Tensor::from_rule(out, out_shape, vec![self.clone()], move |_, _, g| {
            let mut gx = vec![T::zero(); n];
            walk(&shape_for_rule, &strides(&shape_for_rule), &gather, |o, _, i| gx[i] = g[o]);
            vec![Some(gx)]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                detail: format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_rule(out, out_shape, vec![self.clone()], move |_, _, g| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Join tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        drop(datas);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total / inner;
        Ok(Tensor::from_rule(out, out_shape, parts.to_vec(), move |p, _, g| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(p.len());
            for (part, &w) in p.iter().zip(&widths) {
                if part.requires_grad() {
                    let mut gp = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gp.extend_from_slice(&g[base..base + w]);
                    }
                    grads.push(Some(gp));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::grad_check;
    use super::super::Rng;
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = numel(shape);
        Tensor::from_vec((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let c = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(c.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates() {
        let x = Tensor::<f64>::parameter(vec![1.5, -2.0, 7.0], &[3]).unwrap();
        let y = x.mul(&Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 3]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let err = t(&[1.0; 6], &[2, 3]).add(&t(&[1.0; 2], &[2])).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn broadcast_bias_gradient_is_column_sum() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::parameter(vec![0.1, 0.2, 0.3], &[3]).unwrap();
        let up = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        y.mul(&up).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn broadcast_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let a = random(&mut rng, &[2, 3]);
            let b = random(&mut rng, &[3]);
            let w = random(&mut rng, &[2, 3]);
            for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
                let (a2, w2) = (a.clone(), w.clone());
                let err = grad_check(|x| ew_binary(&a2, x, kind)?.mul(&w2).map(|v| v.sum_all()), &b, 1e-5).unwrap();
                assert!(err < 1e-5, "{kind:?} wrt broadcast operand: {err}");
                let (b2, w2) = (b.clone(), w.clone());
                let err = grad_check(|x| ew_binary(x, &b2, kind)?.mul(&w2).map(|v| v.sum_all()), &a, 1e-5).unwrap();
                assert!(err < 1e-5, "{kind:?} wrt full operand: {err}");
            }
            let pos = Tensor::from_vec(b.to_vec().iter().map(|v| v.abs() + 0.5).collect(), &[3]).unwrap();
            let a2 = a.clone();
            let err = grad_check(|x| a2.div(x).map(|v| v.sum_all()), &pos, 1e-5).unwrap();
            assert!(err < 1e-5, "div: {err}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), m.to_vec());
        let v = t(&[1.0, 1.0], &[2, 1]);
        let r = m.matmul(&v).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let err = t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 6], &[2, 3])).unwrap_err();
        assert!(matches!(err, TensorError::InnerDimension { .. }));
    }

    #[test]
    fn matmul_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            let w = random(&mut rng, &[3, 2]);
            let (b2, w2) = (b.clone(), w.clone());
            assert!(grad_check(|x| x.matmul(&b2)?.mul(&w2).map(|v| v.sum_all()), &a, 1e-5).unwrap() < 1e-5);
            let (a2, w2) = (a.clone(), w.clone());
            assert!(grad_check(|x| a2.matmul(x)?.mul(&w2).map(|v| v.sum_all()), &b, 1e-5).unwrap() < 1e-5);
        }
    }

    #[test]
    fn activation_values() {
        let z = t(&[0.0], &[1]);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert_eq!(z.tanh().item(), 0.0);
        let x = Tensor::<f64>::parameter(vec![0.0], &[1]).unwrap();
        x.tanh().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn activation_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(200 + seed);
            let x = random(&mut rng, &[3, 5]);
            let w = random(&mut rng, &[3, 5]);
            for kind in [Activation::Sigmoid, Activation::Tanh] {
                let w2 = w.clone();
                assert!(grad_check(|x| activation(x, kind).mul(&w2).map(|v| v.sum_all()), &x, 1e-5).unwrap() < 1e-5);
            }
            // keep relu inputs away from the kink
            let shifted = Tensor::from_vec(
                x.to_vec().iter().map(|&v| if v >= 0.0 { v + 0.1 } else { v - 0.1 }).collect(),
                &[3, 5],
            )
            .unwrap();
            let w2 = w.clone();
            assert!(grad_check(|x| x.relu().mul(&w2).map(|v| v.sum_all()), &shifted, 1e-5).unwrap() < 1e-5);
        }
    }

    #[test]
    fn reductions() {
        assert_eq!(t(&[1.0, 2.0, 3.0], &[3]).sum_all().item(), 6.0);
        assert_eq!(Tensor::<f64>::full(&[2, 3], 4.25).mean_all().item(), 4.25);
        let r = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).sum(&[0]).unwrap();
        assert_eq!(r.shape(), &[1, 3]);
        assert_eq!(r.to_vec(), vec![5.0, 7.0, 9.0]);
        assert!(matches!(
            t(&[1.0], &[1]).sum(&[1]),
            Err(TensorError::InvalidAxis { axis: 1, .. })
        ));
    }

    #[test]
    fn max_tie_routes_to_first_occurrence() {
        let x = Tensor::<f64>::parameter(vec![3.0, 5.0, 5.0], &[3]).unwrap();
        let m = x.max(&[0]).unwrap();
        assert_eq!(m.item(), 5.0);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_gradcheck() {
        for seed in 0..10 {
            let mut rng = Rng::new(300 + seed);
            let x = random(&mut rng, &[2, 3, 4]);
            let w = random(&mut rng, &[2, 1, 4]);
            for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
                let w2 = w.clone();
                let err = grad_check(|x| reduce(x, kind, &[1])?.mul(&w2).map(|v| v.sum_all()), &x, 1e-5).unwrap();
                assert!(err < 1e-5, "{kind:?}: {err}");
            }
        }
    }

    #[test]
    fn shape_ops_gradcheck() {
        let mut rng = Rng::new(9);
        let x = random(&mut rng, &[2, 3, 4]);
        let w = random(&mut rng, &[4, 2, 3]);
        let w2 = w.clone();
        assert!(grad_check(|x| x.permute(&[2, 0, 1])?.mul(&w2).map(|v| v.sum_all()), &x, 1e-5).unwrap() < 1e-7);
        let w = random(&mut rng, &[2, 2, 4]);
        let w2 = w.clone();
        assert!(grad_check(|x| x.narrow(1, 1, 2)?.mul(&w2).map(|v| v.sum_all()), &x, 1e-5).unwrap() < 1e-7);
        let y = random(&mut rng, &[2, 1, 4]);
        let w = random(&mut rng, &[2, 4, 4]);
        let (y2, w2) = (y.clone(), w.clone());
        assert!(
            grad_check(|x| Tensor::concat(&[x.clone(), y2.clone()], 1)?.mul(&w2).map(|v| v.sum_all()), &x, 1e-5).unwrap()
                < 1e-7
        );
    }

    #[test]
    fn concat_and_narrow_agree() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn powf_and_ln_gradcheck() {
        let x = t(&[0.5, 1.5, 2.0], &[3]);
        assert!(grad_check(|x| Ok(x.powf(-0.5).sum_all()), &x, 1e-5).unwrap() < 1e-7);
        assert!(grad_check(|x| Ok(x.ln().sum_all()), &x, 1e-5).unwrap() < 1e-7);
        assert!(grad_check(|x| Ok(x.exp().one_minus().sum_all()), &x, 1e-5).unwrap() < 1e-7);
    }
}
