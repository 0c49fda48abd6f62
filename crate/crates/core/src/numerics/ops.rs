//! Differentiable primitives with explicit forward/backward.

use crate::error::{Error, Result};
use crate::numerics::tensor::{idx4, Tensor};
use crate::scalar::Scalar;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

/// Forward value plus a closure mapping the output gradient to input gradients.
pub struct GradPair<T: Scalar> {
    pub value: Tensor<T>,
    backward: BackwardFn<T>,
}

impl<T: Scalar> std::fmt::Debug for GradPair<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradPair").field("value", &self.value).finish()
    }
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: Tensor<T>, backward: BackwardFn<T>) -> Self {
        GradPair { value, backward }
    }

    /// Gradients w.r.t. each differentiable input, in declaration order.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
        debug_assert_eq!(grad_out.shape(), self.value.shape());
        (self.backward)(grad_out)
    }
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes; summation order differs from a naive left fold.
pub fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let p = i * 4;
        acc[0] += a[p] * b[p];
        acc[1] += a[p + 1] * b[p + 1];
        acc[2] += a[p + 2] * b[p + 2];
        acc[3] += a[p + 3] * b[p + 3];
    }
    let mut tail = T::zero();
    for p in chunks * 4..n {
        tail += a[p] * b[p];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += w * x over matching slices.
pub fn axpy<T: Scalar>(y: &mut [T], w: T, x: &[T]) {
    for (yo, xi) in y.iter_mut().zip(x) {
        *yo += w * *xi;
    }
}

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be 4-d, got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let [n, cin, h, w] = dims4(input, "conv2d input")?;
    let [cout, kcin, kh, kw] = dims4(kernel, "conv2d kernel")?;
    if kcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::InvalidArg("conv2d kernel extents must be >= 1".into()));
    }
    if stride < 1 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Output-column range for which `ox*stride + k - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(out_len: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k + stride - 1) / stride
    };
    let hi_excl = (extent + pad - k + stride - 1) / stride;
    (lo.min(out_len), hi_excl.min(out_len))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.oh, d.ow]);
    let inp = input.data();
    let ker = kernel.data();
    let o = out.data_mut();
    // Input rows are gathered into a contiguous scratch row once per
    // (ci, ky, kx, oy) and reused across all output channels, so the inner
    // accumulation is a vectorizable axpy even for strided convolutions.
    let mut scratch = vec![T::zero(); d.ow];
    for n in 0..d.n {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = valid_range(d.oh, d.h, stride, ky, pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let irow = idx4(d.cin, d.h, d.w, n, ci, iy, 0);
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = valid_range(d.ow, d.w, stride, kx, pad);
                        let len = ox_hi - ox_lo;
                        if len == 0 {
                            continue;
                        }
                        let row: &[T] = if stride == 1 {
                            let ix0 = irow + ox_lo + kx - pad;
                            &inp[ix0..ix0 + len]
                        } else {
                            for (p, s) in scratch[..len].iter_mut().enumerate() {
                                *s = inp[irow + (ox_lo + p) * stride + kx - pad];
                            }
                            &scratch[..len]
                        };
                        for co in 0..d.cout {
                            let wgt = ker[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                            if wgt == T::zero() {
                                continue;
                            }
                            let orow = idx4(d.cout, d.oh, d.ow, n, co, oy, 0);
                            axpy(&mut o[orow + ox_lo..orow + ox_hi], wgt, row);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let mut gin = Tensor::zeros(input.shape());
    let mut gker = Tensor::zeros(kernel.shape());
    let inp = input.data();
    let ker = kernel.data();
    let go = grad_out.data();
    let gi = gin.data_mut();
    let gk = gker.data_mut();
    for n in 0..d.n {
        for co in 0..d.cout {
            for ci in 0..d.cin {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let kidx = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
                        let wgt = ker[kidx];
                        let mut acc = T::zero();
                        let (oy_lo, oy_hi) = valid_range(d.oh, d.h, stride, ky, pad);
                        let (ox_lo, ox_hi) = valid_range(d.ow, d.w, stride, kx, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let irow = idx4(d.cin, d.h, d.w, n, ci, iy, 0);
                            let orow = idx4(d.cout, d.oh, d.ow, n, co, oy, 0);
                            if stride == 1 {
                                let ix0 = irow + ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let g_row = &go[orow + ox_lo..orow + ox_lo + len];
                                axpy(&mut gi[ix0..ix0 + len], wgt, g_row);
                                acc += dot4(&inp[ix0..ix0 + len], g_row);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let g = go[orow + ox];
                                    gi[irow + ix] += wgt * g;
                                    acc += inp[irow + ix] * g;
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((gin, gker))
}

/// 2-d convolution; backward yields `[grad_input, grad_kernel]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<GradPair<T>> {
    let value = conv2d_forward(input, kernel, stride, pad)?;
    let input = input.clone();
    let kernel = kernel.clone();
    Ok(GradPair::new(
        value,
        Box::new(move |g| {
            let (gi, gk) = conv2d_backward(&input, &kernel, stride, pad, g)
                .expect("conv2d backward on validated shapes");
            vec![gi, gk]
        }),
    ))
}

/// Per-(instance, channel) standardization to zero mean / unit variance.
///
/// Population variance over H*W, eps inside the square root; a constant
/// channel maps to zeros.
pub fn instance_norm<T: Scalar>(features: &Tensor<T>, eps: T) -> Result<GradPair<T>> {
    let [n, c, h, w] = dims4(features, "instance_norm input")?;
    let m = h * w;
    if m == 0 {
        return Err(Error::InvalidArg("instance_norm needs H*W >= 1".into()));
    }
    let inv_m = T::one() / T::of_usize(m);
    let mut value = Tensor::zeros(features.shape());
    let mut invs = vec![T::zero(); n * c];
    {
        let x = features.data();
        let y = value.data_mut();
        for nc in 0..n * c {
            let base = nc * m;
            let ch = &x[base..base + m];
            let mean = ch.iter().fold(T::zero(), |a, &v| a + v) * inv_m;
            let var = ch
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_m;
            let inv = T::one() / (var + eps).sqrt();
            invs[nc] = inv;
            for (yo, &xi) in y[base..base + m].iter_mut().zip(ch) {
                *yo = (xi - mean) * inv;
            }
        }
    }
    let yhat = value.clone();
    Ok(GradPair::new(
        value,
        Box::new(move |g| {
            let mut gx = Tensor::zeros(yhat.shape());
            let go = g.data();
            let yh = yhat.data();
            let gi = gx.data_mut();
            for nc in 0..n * c {
                let base = nc * m;
                let mut sum_g = T::zero();
                let mut sum_gy = T::zero();
                for p in 0..m {
                    sum_g += go[base + p];
                    sum_gy += go[base + p] * yh[base + p];
                }
                let mean_g = sum_g * inv_m;
                let mean_gy = sum_gy * inv_m;
                let inv = invs[nc];
                for p in 0..m {
                    gi[base + p] = inv * (go[base + p] - mean_g - yh[base + p] * mean_gy);
                }
            }
            vec![gx]
        }),
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> GradPair<T> {
    let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
    let mask = x.map(|v| if v > T::zero() { T::one() } else { T::zero() });
    GradPair::new(
        value,
        Box::new(move |g| vec![g.zip(&mask, |a, b| a * b).expect("relu shapes")]),
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> GradPair<T> {
    let value = x.map(|v| T::one() / (T::one() + (-v).exp()));
    let y = value.clone();
    GradPair::new(
        value,
        Box::new(move |g| {
            vec![g
                .zip(&y, |gv, yv| gv * yv * (T::one() - yv))
                .expect("sigmoid shapes")]
        }),
    )
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<GradPair<T>> {
    let value = a.zip(b, |x, y| x + y)?;
    Ok(GradPair::new(
        value,
        Box::new(move |g| vec![g.clone(), g.clone()]),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<GradPair<T>> {
    let value = a.zip(b, |x, y| x * y)?;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(GradPair::new(
        value,
        Box::new(move |g| {
            vec![
                g.zip(&bc, |gv, v| gv * v).expect("mul shapes"),
                g.zip(&ac, |gv, v| gv * v).expect("mul shapes"),
            ]
        }),
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> GradPair<T> {
    let value = x.map(|v| v * c);
    GradPair::new(value, Box::new(move |g| vec![g.map(|v| v * c)]))
}

/// Broadcast-add a per-channel bias to a `[N,C,H,W]` tensor.
pub fn add_channel_bias<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<GradPair<T>> {
    let [n, c, h, w] = dims4(input, "add_channel_bias input")?;
    if bias.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} vs channel count {}",
            bias.shape(),
            c
        )));
    }
    let m = h * w;
    let mut value = input.clone();
    {
        let v = value.data_mut();
        let b = bias.data();
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * m;
                for p in 0..m {
                    v[base + p] += b[cc];
                }
            }
        }
    }
    Ok(GradPair::new(
        value,
        Box::new(move |g| {
            let go = g.data();
            let mut gb = Tensor::zeros(&[c]);
            let gbd = gb.data_mut();
            for nn in 0..n {
                for cc in 0..c {
                    let base = (nn * c + cc) * m;
                    let mut acc = T::zero();
                    for p in 0..m {
                        acc += go[base + p];
                    }
                    gbd[cc] += acc;
                }
            }
            vec![g.clone(), gb]
        }),
    ))
}

/// Source index pair and interpolation weight for one output coordinate,
/// half-pixel-center (align-corners=false) convention.
#[inline]
fn bilinear_axis(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let f = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, f)
}

pub fn upsample_bilinear<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<GradPair<T>> {
    let [n, c, h, w] = dims4(input, "upsample input")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArg("upsample output dims must be >= 1".into()));
    }
    // axis weights converted to T once; the per-pixel loop is conversion-free
    let ys: Vec<(usize, usize, T)> = (0..out_h)
        .map(|i| {
            let (a, b, f) = bilinear_axis(i, h, out_h);
            (a, b, T::of_f64(f))
        })
        .collect();
    let xs: Vec<(usize, usize, T)> = (0..out_w)
        .map(|i| {
            let (a, b, f) = bilinear_axis(i, w, out_w);
            (a, b, T::of_f64(f))
        })
        .collect();
    let mut value = Tensor::zeros(&[n, c, out_h, out_w]);
    {
        let inp = input.data();
        let o = value.data_mut();
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * out_h * out_w;
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &inp[ibase + y0 * w..ibase + y0 * w + w];
                let r1 = &inp[ibase + y1 * w..ibase + y1 * w + w];
                let orow = obase + oy * out_w;
                let out_row = &mut o[orow..orow + out_w];
                for (yo, &(x0, x1, fx)) in out_row.iter_mut().zip(&xs) {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    *yo = top + (bot - top) * fy;
                }
            }
        }
    }
    let in_shape = input.shape().to_vec();
    Ok(GradPair::new(
        value,
        Box::new(move |g| {
            let mut gin = Tensor::zeros(&in_shape);
            let go = g.data();
            let gi = gin.data_mut();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * out_h * out_w;
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let r0 = ibase + y0 * w;
                    let r1 = ibase + y1 * w;
                    let orow = obase + oy * out_w;
                    let gy = T::one() - fy;
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let g = go[orow + ox];
                        let gx = T::one() - fx;
                        gi[r0 + x0] += g * gy * gx;
                        gi[r0 + x1] += g * gy * fx;
                        gi[r1 + x0] += g * fy * gx;
                        gi[r1 + x1] += g * fy * fx;
                    }
                }
            }
            vec![gin]
        }),
    ))
}
