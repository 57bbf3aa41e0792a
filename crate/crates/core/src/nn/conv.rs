use rayon::prelude::*;

use crate::tensor::{Element, Result, Rng, Tensor, TensorError};

/// `floor((d + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub fn output_dim(d: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (d + 2 * p).checked_sub(k).map(|span| span / s + 1)
}

fn output_dims(op: &'static str, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        out[axis] = output_dim(input[axis], kernel[axis], stride[axis], pad[axis])
            .filter(|&d| d > 0)
            .ok_or(TensorError::NonPositiveOutput { op, axis: axis + 2 })?;
    }
    Ok(out)
}

fn dims5(op: &'static str, x: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(x).map_err(|_| TensorError::Rank {
        op,
        expected: 5,
        got: x.to_vec(),
    })
}

pub struct Conv3dParams<T: Element> {
    /// `(C_out, C_in, kT, kH, kW)`
    pub weight: Tensor<T>,
    /// `(C_out)`
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<T: Element> Conv3dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        let w = dims5("conv3d", weight.shape())?;
        if bias.shape() != [w[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if stride.contains(&0) || (0..3).any(|i| padding[i] > w[2 + i]) {
            return Err(TensorError::Invalid {
                op: "conv3d",
                detail: format!("stride {stride:?} / padding {padding:?} invalid for kernel {:?}", &w[2..]),
            });
        }
        Ok(Conv3dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn init(c_in: usize, c_out: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], rng: &mut Rng) -> Result<Self> {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let bound = (1.0 / fan_in as f64).sqrt();
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let weight = super::uniform_parameter(&shape, bound, rng)?;
        let bias = Tensor::parameter(vec![T::zero(); c_out], &[c_out])?;
        Self::new(weight, bias, stride, padding)
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn k(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds cell of the
    /// unfolded patch matrix of output frame `t_out`.
    #[inline]
    fn for_each_patch_cell(&self, t_out: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [kt, kh, kw] = self.kernel;
        let [_, h, w] = self.input;
        let [_, ho_n, wo_n] = self.out;
        let plane = self.plane();
        for ci in 0..self.c_in {
            for dt in 0..kt {
                let ti = (t_out * self.stride[0] + dt) as isize - self.pad[0] as isize;
                if ti < 0 || ti as usize >= self.input[0] {
                    continue;
                }
                let frame = (ci * self.input[0] + ti as usize) * h * w;
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                        for ho in 0..ho_n {
                            let hi = (ho * self.stride[1] + dh) as isize - self.pad[1] as isize;
                            if hi < 0 || hi as usize >= h {
                                continue;
                            }
                            for wo in 0..wo_n {
                                let wi = (wo * self.stride[2] + dw) as isize - self.pad[2] as isize;
                                if wi < 0 || wi as usize >= w {
                                    continue;
                                }
                                f(row * plane, ho * wo_n + wo, frame + hi as usize * w + wi as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, x: &[T], t_out: usize, col: &mut [T]) {
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_patch_cell(t_out, |row, c, i| col[row + c] = x[i]);
    }

    fn col2im<T: Element>(&self, col: &[T], t_out: usize, dx: &mut [T]) {
        self.for_each_patch_cell(t_out, |row, c, i| dx[i] += col[row + c]);
    }
}

/// 3-D cross-correlation with zero padding over `(B, C_in, T, H, W)` input.
pub fn conv3d<T: Element>(input: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let [b, c_in, t, h, w] = dims5("conv3d", input.shape())?;
    if c_in != p.in_channels() {
        return Err(TensorError::ChannelMismatch {
            op: "conv3d",
            input: c_in,
            weight: p.in_channels(),
        });
    }
    let geo = Geometry {
        c_in,
        c_out: p.out_channels(),
        input: [t, h, w],
        kernel: p.kernel(),
        stride: p.stride,
        pad: p.padding,
        out: output_dims("conv3d", [t, h, w], p.kernel(), p.stride, p.padding)?,
    };
    let (k, plane, ovol, ivol) = (geo.k(), geo.plane(), geo.out_volume(), geo.in_volume());
    let per_sample = geo.c_out * ovol;
    let mut out = vec![T::zero(); b * per_sample];
    {
        let (xg, wg, bg) = (input.data(), p.weight.data(), p.bias.data());
        let (x, wd, bias): (&[T], &[T], &[T]) = (&xg, &wg, &bg);
        out.par_chunks_mut(per_sample).enumerate().for_each(|(bi, ob)| {
            let xb = &x[bi * c_in * ivol..(bi + 1) * c_in * ivol];
            let mut col = vec![T::zero(); k * plane];
            for to in 0..geo.out[0] {
                geo.im2col(xb, to, &mut col);
                let row_stride = (geo.out[0] * plane) as isize;
                T::gemm(geo.c_out, k, plane, T::one(), wd, (k as isize, 1), &col, (plane as isize, 1), T::zero(), &mut ob[to * plane..], (row_stride, 1));
            }
            for (co, chunk) in ob.chunks_mut(ovol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        });
    }
    let out_shape = vec![b, geo.c_out, geo.out[0], geo.out[1], geo.out[2]];
    Ok(Tensor::from_rule(
        out,
        out_shape,
        vec![input.clone(), p.weight.clone(), p.bias.clone()],
        move |parents, _, g| {
            let (x, weight, bias) = (&parents[0], &parents[1], &parents[2]);
            let need_x = x.requires_grad();
            let (xg, wg) = (x.data(), weight.data());
            let (xd, wd): (&[T], &[T]) = (&xg, &wg);
            let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b)
                .into_par_iter()
                .map(|bi| {
                    let xb = &xd[bi * c_in * ivol..(bi + 1) * c_in * ivol];
                    let gb = &g[bi * per_sample..(bi + 1) * per_sample];
                    let mut dw = vec![T::zero(); geo.c_out * k];
                    let mut dx = if need_x { vec![T::zero(); c_in * ivol] } else { Vec::new() };
                    let mut col = vec![T::zero(); k * plane];
                    let mut dcol = vec![T::zero(); k * plane];
                    let row_stride = (geo.out[0] * plane) as isize;
                    for to in 0..geo.out[0] {
                        let gt = &gb[to * plane..];
                        geo.im2col(xb, to, &mut col);
                        // dW += dY_t . col^T
                        T::gemm(geo.c_out, plane, k, T::one(), gt, (row_stride, 1), &col, (1, plane as isize), T::one(), &mut dw, (k as isize, 1));
                        if need_x {
                            // dcol = W^T . dY_t
                            T::gemm(k, geo.c_out, plane, T::one(), wd, (1, k as isize), gt, (row_stride, 1), T::zero(), &mut dcol, (plane as isize, 1));
                            geo.col2im(&dcol, to, &mut dx);
                        }
                    }
                    let db = gb.chunks(ovol).map(|c| c.iter().copied().sum()).collect();
                    (dx, dw, db)
                })
                .collect();
            let mut dx = need_x.then(|| Vec::with_capacity(b * c_in * ivol));
            let mut dw = vec![T::zero(); geo.c_out * k];
            let mut db = vec![T::zero(); geo.c_out];
            for (px, pw, pb) in partials {
                if let Some(dx) = dx.as_mut() {
                    dx.extend_from_slice(&px);
                }
                dw.iter_mut().zip(&pw).for_each(|(a, v)| *a += *v);
                db.iter_mut().zip(&pb).for_each(|(a, v)| *a += *v);
            }
            vec![
                dx,
                weight.requires_grad().then_some(dw),
                bias.requires_grad().then_some(db),
            ]
        },
    ))
}

/// Windowed max over `(B, C, T, H, W)`. Padded cells never win.
/// Max along the middle axis of an `(outer, len, inner)` block. Each window
/// keeps its first maximum, so chaining passes over the three axes selects
/// the same element as a scan of the whole box in row-major order.
#[allow(clippy::too_many_arguments)]
fn max_along<T: Element>(vals: &[T], ids: &[usize], dims: [usize; 3], k: usize, s: usize, p: usize, out_len: usize) -> (Vec<T>, Vec<usize>) {
    let [outer, len, inner] = dims;
    let mut best_vals = Vec::with_capacity(outer * out_len * inner);
    let mut best_ids = Vec::with_capacity(outer * out_len * inner);
    for o in 0..outer {
        for j in 0..out_len {
            // padding < kernel keeps every window non-empty
            let lo = (j * s).saturating_sub(p);
            let hi = (j * s + k - p).min(len);
            for i in 0..inner {
                let mut at = (o * len + lo) * inner + i;
                let mut best = vals[at];
                for pos in lo + 1..hi {
                    let q = (o * len + pos) * inner + i;
                    if vals[q] > best {
                        best = vals[q];
                        at = q;
                    }
                }
                best_vals.push(best);
                best_ids.push(ids[at]);
            }
        }
    }
    (best_vals, best_ids)
}

pub fn maxpool3d<T: Element>(input: &Tensor<T>, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Tensor<T>> {
    let [b, c, t, h, w] = dims5("maxpool3d", input.shape())?;
    if stride.contains(&0) || (0..3).any(|i| padding[i] >= kernel[i]) {
        return Err(TensorError::Invalid {
            op: "maxpool3d",
            detail: format!("padding {padding:?} must be smaller than kernel {kernel:?}, stride {stride:?} positive"),
        });
    }
    let out = output_dims("maxpool3d", [t, h, w], kernel, stride, padding)?;
    let ivol = t * h * w;
    let ovol: usize = out.iter().product();
    let mut values = vec![T::zero(); b * c * ovol];
    let mut argmax = vec![0usize; b * c * ovol];
    {
        let xg = input.data();
        let x: &[T] = &xg;
        values
            .par_chunks_mut(ovol)
            .zip(argmax.par_chunks_mut(ovol))
            .enumerate()
            .for_each(|(plane, (vals, args))| {
                let xp = &x[plane * ivol..(plane + 1) * ivol];
                let ids: Vec<usize> = (0..ivol).collect();
                // box max is separable: width, then height, then time
                let (v, i) = max_along(xp, &ids, [t * h, w, 1], kernel[2], stride[2], padding[2], out[2]);
                let (v, i) = max_along(&v, &i, [t, h, out[2]], kernel[1], stride[1], padding[1], out[1]);
                let (v, i) = max_along(&v, &i, [1, t, out[1] * out[2]], kernel[0], stride[0], padding[0], out[0]);
                vals.copy_from_slice(&v);
                for (a, src) in args.iter_mut().zip(i) {
                    *a = plane * ivol + src;
                }
            });
    }
    let n_in = input.numel();
    Ok(Tensor::from_rule(
        values,
        vec![b, c, out[0], out[1], out[2]],
        vec![input.clone()],
        move |_, _, g| {
            let mut dx = vec![T::zero(); n_in];
            for (&i, &gv) in argmax.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        },
    ))
}
