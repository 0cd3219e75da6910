//! Forward and backward kernels. Convolution is cross-correlation (no kernel
//! flip) lowered to GEMM through an im2col buffer per batch item.

use matrixmultiply::dgemm;

use super::{NnError, Tensor};

/// Output length of a strided, zero-padded window along one axis.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`; `a` and `b` are given by (row, column) strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index the strides address, checked above
    // for the packed layouts used in this module.
    unsafe {
        dgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Saved forward state of a convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: [usize; 4],
    weight: Tensor,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    /// im2col buffers, one `[C·k·k, H'·W']` block per batch item
    cols: Vec<f64>,
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    gx: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// `x[N,C,H,W] ⋆ w[F,C,k,k] + b[F]` with zero padding.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache), NnError> {
    x.expect_rank(4, "conv2d input")?;
    w.expect_rank(4, "conv2d weight")?;
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, wc, k, k2] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if wc != c || k != k2 {
        return Err(NnError::Shape(format!(
            "conv2d weight {:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if b.shape() != [f] {
        return Err(NnError::Shape(format!("conv2d bias {:?}, expected [{f}]", b.shape())));
    }
    let (oh, ow) = match (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(NnError::Shape(format!(
                "conv2d k={k} s={stride} p={pad} produces an empty map from {h}×{wd}"
            )))
        }
    };
    let p = oh * ow;
    let ckk = c * k * k;
    let mut cols = vec![0.0; n * ckk * p];
    let mut out = vec![0.0; n * f * p];
    let xs = x.data();
    for i in 0..n {
        let col = &mut cols[i * ckk * p..(i + 1) * ckk * p];
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], (c, h, wd), k, stride, pad, (oh, ow), col);
        let y = &mut out[i * f * p..(i + 1) * f * p];
        for (fi, chunk) in y.chunks_exact_mut(p).enumerate() {
            chunk.fill(b.data()[fi]);
        }
        gemm(f, ckk, p, w.data(), (ckk as isize, 1), col, (p as isize, 1), 1.0, y);
    }
    let cache = ConvCache {
        input_shape: [n, c, h, wd],
        weight: w.clone(),
        stride,
        pad,
        out_hw: (oh, ow),
        cols,
    };
    Ok((Tensor::new(vec![n, f, oh, ow], out)?, cache))
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(grad_out: &Tensor, cache: &ConvCache) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (gx, gw, gb) = conv2d_backward_impl(grad_out, cache, true)?;
    Ok((gx.unwrap(), gw, gb))
}

/// Weight and bias gradients only; for layers whose input needs no gradient.
pub fn conv2d_backward_params(grad_out: &Tensor, cache: &ConvCache) -> Result<(Tensor, Tensor), NnError> {
    let (_, gw, gb) = conv2d_backward_impl(grad_out, cache, false)?;
    Ok((gw, gb))
}

fn conv2d_backward_impl(
    grad_out: &Tensor,
    cache: &ConvCache,
    input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let [n, c, h, wd] = cache.input_shape;
    let w = &cache.weight;
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = cache.out_hw;
    if grad_out.shape() != [n, f, oh, ow] {
        return Err(NnError::Shape(format!(
            "conv2d grad {:?}, expected {:?}",
            grad_out.shape(),
            [n, f, oh, ow]
        )));
    }
    let p = oh * ow;
    let ckk = c * k * k;
    let mut gx = vec![0.0; if input_grad { n * c * h * wd } else { 0 }];
    let mut gw = vec![0.0; f * ckk];
    let mut gb = vec![0.0; f];
    let mut gcols = vec![0.0; if input_grad { ckk * p } else { 0 }];
    let go = grad_out.data();
    for i in 0..n {
        let g = &go[i * f * p..(i + 1) * f * p];
        let col = &cache.cols[i * ckk * p..(i + 1) * ckk * p];
        for (fi, chunk) in g.chunks_exact(p).enumerate() {
            gb[fi] += chunk.iter().sum::<f64>();
        }
        // gw[F, CKK] += g[F, P] · colᵀ
        gemm(f, p, ckk, g, (p as isize, 1), col, (1, p as isize), 1.0, &mut gw);
        if !input_grad {
            continue;
        }
        // gcols[CKK, P] = wᵀ · g
        gemm(ckk, f, p, w.data(), (1, ckk as isize), g, (p as isize, 1), 0.0, &mut gcols);
        col2im(
            &gcols,
            (c, h, wd),
            k,
            cache.stride,
            cache.pad,
            (oh, ow),
            &mut gx[i * c * h * wd..(i + 1) * c * h * wd],
        );
    }
    let gx = if input_grad {
        Some(Tensor::new(vec![n, c, h, wd], gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(w.shape().to_vec(), gw)?, Tensor::new(vec![f], gb)?))
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
    weight: Tensor,
}

/// `y[N,out] = x[N,in]·wᵀ + b` with `w[out,in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, LinearCache), NnError> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    let (n, fan_in) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    if w.shape()[1] != fan_in || b.shape() != [out] {
        return Err(NnError::Shape(format!(
            "linear weight {:?} / bias {:?} do not fit input {:?}",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(n, fan_in, out, x.data(), (fan_in as isize, 1), w.data(), (1, fan_in as isize), 1.0, &mut y);
    Ok((
        Tensor::new(vec![n, out], y)?,
        LinearCache {
            input: x.clone(),
            weight: w.clone(),
        },
    ))
}

pub fn linear_backward(grad_out: &Tensor, cache: &LinearCache) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, fan_in) = (cache.input.shape()[0], cache.input.shape()[1]);
    let out = cache.weight.shape()[0];
    if grad_out.shape() != [n, out] {
        return Err(NnError::Shape(format!(
            "linear grad {:?}, expected [{n}, {out}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut gx = vec![0.0; n * fan_in];
    gemm(n, out, fan_in, g, (out as isize, 1), cache.weight.data(), (fan_in as isize, 1), 0.0, &mut gx);
    let mut gw = vec![0.0; out * fan_in];
    gemm(out, n, fan_in, g, (1, out as isize), cache.input.data(), (fan_in as isize, 1), 0.0, &mut gw);
    let mut gb = vec![0.0; out];
    for row in g.chunks_exact(out) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((
        Tensor::new(vec![n, fan_in], gx)?,
        Tensor::new(vec![out, fan_in], gw)?,
        Tensor::new(vec![out], gb)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor, NnError> {
    if grad_out.shape() != input.shape() {
        return Err(NnError::Shape(format!(
            "relu grad {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect()).unwrap()
}

pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor, NnError> {
    if grad_out.shape() != output.shape() {
        return Err(NnError::Shape("sigmoid grad shape".into()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// `[N, ...] → [N, ∏...]`.
pub fn flatten(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let rest = x.len() / n;
    x.clone().reshape(vec![n, rest]).unwrap()
}
