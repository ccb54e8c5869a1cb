//! Elementwise, reduction, and structural ops on [`Tensor`].
//!
//! Broadcasting is limited to what the network uses: an operand may have
//! extent 1 on axes where the other has more (spatial or channel gates) or
//! be a single-element scalar. Reductions accumulate in f64.

use super::Tensor;
use crate::error::{Error, Result};

/// Sobel outputs on [0,1] inputs lie in [0, 4*sqrt(2)]; divide to renormalize.
pub const SOBEL_NORM: f32 = 0.17677669529663687; // 1 / (4*sqrt(2))

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Index map for broadcasting `src_shape` over `out_shape`: strides are 0 on
/// broadcast axes.
fn broadcast_strides(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    debug_assert_eq!(out_shape.len(), src_shape.len());
    let mut strides = vec![0usize; src_shape.len()];
    let mut acc = 1usize;
    for i in (0..src_shape.len()).rev() {
        strides[i] = if src_shape[i] == 1 { 0 } else { acc };
        acc *= src_shape[i];
    }
    let _ = out_shape;
    strides
}

fn for_each_broadcast(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(out_shape, src_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let total: usize = out_shape.iter().product();
    let mut src = 0usize;
    for flat in 0..total {
        f(flat, src);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_compatible(out: &[usize], src: &[usize]) -> bool {
    out.len() == src.len() && out.iter().zip(src).all(|(&o, &s)| s == o || s == 1)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape != rhs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                shape,
                rhs.shape()
            )));
        }
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        )
        .into_ok()
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape != rhs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sub: {:?} vs {:?}",
                shape,
                rhs.shape()
            )));
        }
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        )
        .into_ok()
    }

    /// Elementwise product. `rhs` may broadcast: a single element, or extent 1
    /// on axes where `self` is wider (channel gate `N,C,1,1`, spatial gate
    /// `N,1,H,W`).
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        let rhs_shape = if rhs.numel() == 1 {
            vec![1; shape.len()]
        } else {
            rhs.shape()
        };
        if !broadcast_compatible(&shape, &rhs_shape) {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                shape,
                rhs.shape()
            )));
        }
        let mut data = vec![0.0f32; self.numel()];
        {
            let a = self.data();
            let b = rhs.data();
            for_each_broadcast(&shape, &rhs_shape, |out_i, src_i| {
                data[out_i] = a[out_i] * b[src_i];
            });
        }
        let a_saved = self.to_vec();
        let b_saved = rhs.to_vec();
        let out_shape = shape.clone();
        let rhs_numel = rhs.numel();
        Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0f32; a_saved.len()];
                let mut db = vec![0.0f32; rhs_numel];
                for_each_broadcast(&out_shape, &rhs_shape, |out_i, src_i| {
                    da[out_i] = g[out_i] * b_saved[src_i];
                    db[src_i] += g[out_i] * a_saved[out_i];
                });
                vec![da, db]
            }),
        )
        .into_ok()
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|v| v * factor).collect()]),
        )
    }

    pub fn add_scalar(&self, value: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        let mask: Vec<bool> = self.data().iter().map(|&v| v > 0.0).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&mask)
                    .map(|(gi, &m)| if m { *gi } else { 0.0 })
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let saved = data.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect()]
            }),
        )
    }

    /// Natural log. Callers clamp inputs away from zero first.
    pub fn log(&self) -> Tensor {
        let saved = self.to_vec();
        let data: Vec<f32> = saved.iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&saved).map(|(gi, x)| gi / x).collect()]),
        )
    }

    /// Square root with subgradient 0 at the origin.
    pub fn sqrt(&self) -> Tensor {
        let saved = self.to_vec();
        let data: Vec<f32> = saved.iter().map(|v| v.max(0.0).sqrt()).collect();
        let out = data.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&out)
                    .map(|(gi, y)| if *y > 0.0 { gi / (2.0 * y) } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Elementwise reciprocal. Callers keep inputs away from zero.
    pub fn recip(&self) -> Tensor {
        let saved = self.to_vec();
        let data: Vec<f32> = saved.iter().map(|v| 1.0 / v).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, x)| -gi / (x * x))
                    .collect()]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input is inside the
    /// (inclusive) range.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let saved = self.to_vec();
        let data: Vec<f32> = saved.iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, &x)| if x >= lo && x <= hi { *gi } else { 0.0 })
                    .collect()]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let sum: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![sum as f32],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let sum: f64 = self.data().iter().map(|&v| v as f64).sum();
        let mean = (sum / n as f64) as f32;
        Tensor::from_op(
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0] / n as f32; n]]),
        )
    }

    /// Mean of the `k` largest elements (ties broken by index, selected
    /// indices summed in ascending order so `k == numel` matches
    /// [`Tensor::mean_all`] bit for bit).
    pub fn topk_mean(&self, k: usize) -> Result<Tensor> {
        let n = self.numel();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "topk_mean: k={} out of range 1..={}",
                k, n
            )));
        }
        let values = self.to_vec();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut selected: Vec<usize> = order[..k].to_vec();
        selected.sort_unstable();
        let sum: f64 = selected.iter().map(|&i| values[i] as f64).sum();
        let mean = (sum / k as f64) as f32;
        Tensor::from_op(
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n];
                let w = g[0] / k as f32;
                for &i in &selected {
                    dx[i] = w;
                }
                vec![dx]
            }),
        )
        .into_ok()
    }

    /// Copy into a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        )
        .into_ok()
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_12(&self) -> Result<Tensor> {
        let (n, a, b) = self.dims3()?;
        let mut data = vec![0.0f32; n * a * b];
        {
            let src = self.data();
            for i in 0..n {
                for j in 0..a {
                    for l in 0..b {
                        data[i * a * b + l * a + j] = src[i * a * b + j * b + l];
                    }
                }
            }
        }
        Tensor::from_op(
            vec![n, b, a],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n * a * b];
                for i in 0..n {
                    for j in 0..a {
                        for l in 0..b {
                            dx[i * a * b + j * b + l] = g[i * a * b + l * a + j];
                        }
                    }
                }
                vec![dx]
            }),
        )
        .into_ok()
    }

    /// Batched matrix product: `[n,p,q] x [n,q,r] -> [n,p,r]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, p, q) = self.dims3()?;
        let (n2, q2, r) = rhs.dims3()?;
        if n != n2 || q != q2 {
            return Err(Error::ShapeMismatch(format!(
                "bmm: {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let a_saved = self.to_vec();
        let b_saved = rhs.to_vec();
        let mut data = vec![0.0f32; n * p * r];
        for i in 0..n {
            gemm_rowmajor(
                p,
                q,
                r,
                &a_saved[i * p * q..],
                false,
                &b_saved[i * q * r..],
                false,
                &mut data[i * p * r..(i + 1) * p * r],
            );
        }
        Tensor::from_op(
            vec![n, p, r],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0f32; n * p * q];
                let mut db = vec![0.0f32; n * q * r];
                for i in 0..n {
                    // dA = dC * B^T, dB = A^T * dC
                    gemm_rowmajor(
                        p,
                        r,
                        q,
                        &g[i * p * r..],
                        false,
                        &b_saved[i * q * r..],
                        true,
                        &mut da[i * p * q..(i + 1) * p * q],
                    );
                    gemm_rowmajor(
                        q,
                        p,
                        r,
                        &a_saved[i * p * q..],
                        true,
                        &g[i * p * r..],
                        false,
                        &mut db[i * q * r..(i + 1) * q * r],
                    );
                }
                vec![da, db]
            }),
        )
        .into_ok()
    }

    /// Softmax over the last axis of a rank-3 tensor; each row sums to 1.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, r, c) = self.dims3()?;
        let mut data = vec![0.0f32; n * r * c];
        {
            let src = self.data();
            for row in 0..n * r {
                let s = &src[row * c..(row + 1) * c];
                let max = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for (i, &v) in s.iter().enumerate() {
                    let e = (v - max).exp();
                    data[row * c + i] = e;
                    sum += e as f64;
                }
                for v in &mut data[row * c..(row + 1) * c] {
                    *v = (*v as f64 / sum) as f32;
                }
            }
        }
        let out = data.clone();
        Tensor::from_op(
            vec![n, r, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n * r * c];
                for row in 0..n * r {
                    let y = &out[row * c..(row + 1) * c];
                    let gy = &g[row * c..(row + 1) * c];
                    let dot: f64 = y
                        .iter()
                        .zip(gy)
                        .map(|(&yi, &gi)| yi as f64 * gi as f64)
                        .sum();
                    for i in 0..c {
                        dx[row * c + i] = y[i] * (gy[i] - dot as f32);
                    }
                }
                vec![dx]
            }),
        )
        .into_ok()
    }

    /// Join along the channel axis; inputs must agree on N, H, W.
    pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
        concat_axis(inputs, 1)
    }

    /// Join along the batch axis; inputs must agree on C, H, W.
    pub fn concat_batch(inputs: &[Tensor]) -> Result<Tensor> {
        concat_axis(inputs, 0)
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels: [{start}, {end}) of {c}"
            )));
        }
        let cs = end - start;
        let plane = h * w;
        let mut data = vec![0.0f32; n * cs * plane];
        {
            let src = self.data();
            for i in 0..n {
                for ch in 0..cs {
                    let s = (i * c + start + ch) * plane;
                    let d = (i * cs + ch) * plane;
                    data[d..d + plane].copy_from_slice(&src[s..s + plane]);
                }
            }
        }
        Tensor::from_op(
            vec![n, cs, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n * c * plane];
                for i in 0..n {
                    for ch in 0..cs {
                        let d = (i * c + start + ch) * plane;
                        let s = (i * cs + ch) * plane;
                        dx[d..d + plane].copy_from_slice(&g[s..s + plane]);
                    }
                }
                vec![dx]
            }),
        )
        .into_ok()
    }

    /// Batch item `index` as a `1,C,H,W` tensor.
    pub fn slice_batch(&self, index: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "slice_batch: index {index} of {n}"
            )));
        }
        let item = c * h * w;
        let data = self.data()[index * item..(index + 1) * item].to_vec();
        Tensor::from_op(
            vec![1, c, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; n * item];
                dx[index * item..(index + 1) * item].copy_from_slice(g);
                vec![dx]
            }),
        )
        .into_ok()
    }

    /// Sobel gradient magnitude of a single-channel map, normalized so that
    /// [0,1] inputs produce [0,1] outputs. Zero padding at the borders.
    pub fn sobel_magnitude(&self) -> Result<Tensor> {
        let (_, c, _, _) = self.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "sobel_magnitude expects a single channel, got {c}"
            )));
        }
        let kx = Tensor::from_vec(&[1, 1, 3, 3], SOBEL_X.to_vec())?;
        let ky = Tensor::from_vec(&[1, 1, 3, 3], SOBEL_Y.to_vec())?;
        let gx = self.conv2d(&kx, None, 1, 1)?;
        let gy = self.conv2d(&ky, None, 1, 1)?;
        let sq = gx.mul(&gx)?.add(&gy.mul(&gy)?)?;
        Ok(sq.sqrt().scale(SOBEL_NORM))
    }
}

fn concat_axis(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let first = inputs[0].dims4()?;
    let mut extents = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (n, c, h, w) = t.dims4()?;
        let same = match axis {
            0 => (c, h, w) == (first.1, first.2, first.3),
            1 => (n, h, w) == (first.0, first.2, first.3),
            _ => unreachable!(),
        };
        if !same {
            return Err(Error::ShapeMismatch(format!(
                "concat axis {}: {:?} vs {:?}",
                axis,
                t.shape(),
                inputs[0].shape()
            )));
        }
        extents.push(if axis == 0 { n } else { c });
    }
    let total: usize = extents.iter().sum();
    let (n0, c0, h, w) = first;
    let out_shape = if axis == 0 {
        vec![total, c0, h, w]
    } else {
        vec![n0, total, h, w]
    };
    let plane = h * w;
    let out_n = out_shape[0];
    let mut data = vec![0.0f32; out_shape.iter().product()];
    // [batch][channel] block copy; offsets per input along the chosen axis.
    let mut offset = 0usize;
    let mut spans = Vec::with_capacity(inputs.len());
    for (t, &ext) in inputs.iter().zip(&extents) {
        spans.push((offset, ext));
        let src = t.data();
        let (tn, tc, _, _) = t.dims4().unwrap();
        for i in 0..tn {
            for ch in 0..tc {
                let (oi, oc) = if axis == 0 {
                    (offset + i, ch)
                } else {
                    (i, offset + ch)
                };
                let d = (oi * out_shape[1] + oc) * plane;
                let s = (i * tc + ch) * plane;
                data[d..d + plane].copy_from_slice(&src[s..s + plane]);
            }
        }
        offset += ext;
    }
    let in_dims: Vec<(usize, usize)> = inputs
        .iter()
        .map(|t| {
            let (n, c, _, _) = t.dims4().unwrap();
            (n, c)
        })
        .collect();
    let out_c = out_shape[1];
    Tensor::from_op(
        out_shape,
        data,
        inputs.to_vec(),
        Box::new(move |g| {
            let _ = out_n;
            let mut grads = Vec::with_capacity(spans.len());
            for (k, &(off, _ext)) in spans.iter().enumerate() {
                let (tn, tc) = in_dims[k];
                let mut dx = vec![0.0f32; tn * tc * plane];
                for i in 0..tn {
                    for ch in 0..tc {
                        let (oi, oc) = if axis == 0 { (off + i, ch) } else { (i, off + ch) };
                        let s = (oi * out_c + oc) * plane;
                        let d = (i * tc + ch) * plane;
                        dx[d..d + plane].copy_from_slice(&g[s..s + plane]);
                    }
                }
                grads.push(dx);
            }
            grads
        }),
    )
    .into_ok()
}

/// Row-major single-precision GEMM: `c = a(t?) * b(t?)`, `c` overwritten.
pub(crate) fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
) {
    let (rsa, csa) = if trans_a {
        (1isize, k as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, n as isize)
    } else {
        (n as isize, 1isize)
    };
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

trait IntoOk: Sized {
    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl IntoOk for Tensor {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = Tensor::scalar(0.0).sigmoid();
        assert_eq!(t.item(), 0.5);
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap().relu();
        assert_eq!(t.to_vec(), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x: f32 = rng.random_range(-4.0..4.0);
            let t = Tensor::scalar(x).requires_grad(true);
            let y = t.sigmoid();
            y.sum_all().backward().unwrap();
            let s = 1.0 / (1.0 + (-x).exp());
            let expect = s * (1.0 - s);
            let got = t.grad().unwrap()[0];
            assert!((got - expect).abs() < 1e-6, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn mul_broadcasts_channel_and_spatial_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let chan = rand_tensor(&mut rng, &[2, 3, 1, 1]);
        let spat = rand_tensor(&mut rng, &[2, 1, 4, 5]);
        let yc = f.mul(&chan).unwrap();
        let ys = f.mul(&spat).unwrap();
        let fd = f.to_vec();
        let cd = chan.to_vec();
        let sd = spat.to_vec();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let i = ((n * 3 + c) * 4 + h) * 5 + w;
                        assert_eq!(yc.to_vec()[i], fd[i] * cd[n * 3 + c]);
                        assert_eq!(ys.to_vec()[i], fd[i] * sd[(n * 4 + h) * 5 + w]);
                    }
                }
            }
        }
    }

    #[test]
    fn mul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn concat_channels_order_and_slice_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let parts: Vec<Tensor> = [1usize, 2, 3]
            .iter()
            .map(|&c| rand_tensor(&mut rng, &[2, c, 3, 3]))
            .collect();
        let cat = Tensor::concat_channels(&parts).unwrap();
        assert_eq!(cat.shape(), vec![2, 6, 3, 3]);
        let mut start = 0;
        for p in &parts {
            let c = p.shape()[1];
            let back = cat.slice_channels(start, start + c).unwrap();
            assert_eq!(back.to_vec(), p.to_vec());
            start += c;
        }
    }

    #[test]
    fn concat_single_input_is_identity() {
        let t = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let cat = Tensor::concat_channels(std::slice::from_ref(&t)).unwrap();
        assert_eq!(cat.to_vec(), t.to_vec());
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 3, 2]);
        assert!(Tensor::concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn topk_mean_full_equals_mean_all_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[1, 1, 7, 9]);
        let full = t.topk_mean(t.numel()).unwrap().item();
        let mean = t.mean_all().item();
        assert_eq!(full.to_bits(), mean.to_bits());
    }

    #[test]
    fn topk_mean_selects_largest() {
        let t = Tensor::from_vec(&[5], vec![0.1, 5.0, 0.2, 4.0, 0.3]).unwrap();
        let m = t.topk_mean(2).unwrap().item();
        assert!((m - 4.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_tensor(&mut rng, &[2, 4, 6]).reshape(&[2, 4, 6]).unwrap();
        let y = t.softmax_rows().unwrap();
        let d = y.to_vec();
        for row in 0..8 {
            let s: f32 = d[row * 6..(row + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bmm_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 5]);
        let c = a.bmm(&b).unwrap();
        let (ad, bd, cd) = (a.to_vec(), b.to_vec(), c.to_vec());
        for i in 0..2 {
            for p in 0..3 {
                for r in 0..5 {
                    let mut acc = 0.0f32;
                    for q in 0..4 {
                        acc += ad[i * 12 + p * 4 + q] * bd[i * 20 + q * 5 + r];
                    }
                    let got = cd[i * 15 + p * 5 + r];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let t = Tensor::full(&[1, 1, 6, 6], 0.7);
        let m = t.sobel_magnitude().unwrap();
        assert!(m.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_step_edge_peaks_at_step() {
        // Columns 0..3 are 0, columns 3..6 are 1.
        let mut img = vec![0.0f32; 36];
        for r in 0..6 {
            for c in 3..6 {
                img[r * 6 + c] = 1.0;
            }
        }
        let m = Tensor::from_vec(&[1, 1, 6, 6], img)
            .unwrap()
            .sobel_magnitude()
            .unwrap();
        let d = m.to_vec();
        // Middle row: peak response on the two columns flanking the step,
        // zero in the flat interior away from it.
        let row = 2;
        let peak = 4.0 * SOBEL_NORM;
        assert!((d[row * 6 + 2] - peak).abs() < 1e-6);
        assert!((d[row * 6 + 3] - peak).abs() < 1e-6);
        assert_eq!(d[row * 6], 0.0);
        assert_eq!(d[row * 6 + 1], 0.0);
        assert_eq!(d[row * 6 + 4], 0.0);
    }

    #[test]
    fn sobel_rejects_multichannel() {
        assert!(Tensor::zeros(&[1, 2, 4, 4]).sobel_magnitude().is_err());
    }

    #[test]
    fn slice_batch_roundtrip_through_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let items: Vec<Tensor> = (0..3).map(|i| t.slice_batch(i).unwrap()).collect();
        let back = Tensor::concat_batch(&items).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
    }
}
