//! Forward and backward kernels for the layer types the networks use.
//!
//! Every kernel works on batched tensors: affine ops on `[.., in]`, spatial
//! ops on `[batch, channels, height, width]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `W x + b` over the last axis of `x`.
pub fn affine_forward(weight: &Tensor, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (outputs, inputs) = affine_dims(weight, x, bias)?;
    let rows = x.len() / inputs;
    let w = weight.data();
    let mut out = Vec::with_capacity(rows * outputs);
    for row in x.data().chunks_exact(inputs) {
        for (o, b) in bias.data().iter().enumerate() {
            let w_row = &w[o * inputs..(o + 1) * inputs];
            out.push(b + dot(w_row, row));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("checked non-empty") = outputs;
    Tensor::new(shape, out)
}

/// Gradients of `affine_forward`: `(d_x, d_weight, d_bias)`.
pub fn affine_backward(
    weight: &Tensor,
    x: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [outputs, inputs] = weight.shape() else {
        return Err(Error::Dimension(format!(
            "affine weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    let (outputs, inputs) = (*outputs, *inputs);
    let rows = x.len() / inputs;
    if grad_out.len() != rows * outputs {
        return Err(Error::Dimension(format!(
            "affine grad {:?} does not match input {:?} and weight {:?}",
            grad_out.shape(),
            x.shape(),
            weight.shape()
        )));
    }
    let w = weight.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; outputs];
    for ((x_row, g_row), dx_row) in x
        .data()
        .chunks_exact(inputs)
        .zip(grad_out.data().chunks_exact(outputs))
        .zip(dx.chunks_exact_mut(inputs))
    {
        for (o, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let w_row = &w[o * inputs..(o + 1) * inputs];
            let dw_row = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dx_row[i] += g * w_row[i];
                dw_row[i] += g * x_row[i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::vector(db),
    ))
}

fn affine_dims(weight: &Tensor, x: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let mismatch = || {
        Error::Dimension(format!(
            "affine weight {:?}, input {:?}, bias {:?}",
            weight.shape(),
            x.shape(),
            bias.shape()
        ))
    };
    let [outputs, inputs] = weight.shape() else {
        return Err(mismatch());
    };
    if x.shape().last() != Some(inputs) || bias.len() != *outputs || bias.ndim() != 1 {
        return Err(mismatch());
    }
    Ok((*outputs, *inputs))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(
    kernel: &Tensor,
    x: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<ConvGeometry> {
    let [out_channels, k_channels, kernel_h, kernel_w] = *kernel.shape() else {
        return Err(Error::Dimension(format!(
            "conv kernel must be [out, in, kh, kw], got {:?}",
            kernel.shape()
        )));
    };
    let [batch, in_channels, height, width] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "conv input must be [batch, channels, h, w], got {:?}",
            x.shape()
        )));
    };
    if k_channels != in_channels {
        return Err(Error::Dimension(format!(
            "kernel {:?} expects {k_channels} channels, input {:?} has {in_channels}",
            kernel.shape(),
            x.shape()
        )));
    }
    if kernel_h > height || kernel_w > width {
        return Err(Error::Dimension(format!(
            "kernel {:?} larger than input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    if bias.shape() != [out_channels] {
        return Err(Error::Dimension(format!(
            "conv bias {:?} does not match kernel {:?}",
            bias.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("conv stride must be positive".into()));
    }
    Ok(ConvGeometry {
        batch,
        in_channels,
        height,
        width,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        out_h: (height - kernel_h) / stride + 1,
        out_w: (width - kernel_w) / stride + 1,
    })
}

/// Valid cross-correlation plus a per-output-channel bias.
pub fn conv2d_forward(kernel: &Tensor, x: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(kernel, x, bias, stride)?;
    let k = kernel.data();
    let xd = x.data();
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let plane = g.height * g.width;
    let k_size = g.in_channels * g.kernel_h * g.kernel_w;
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let k_o = &k[o * k_size..(o + 1) * k_size];
            let out_plane =
                &mut out[(b * g.out_channels + o) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            out_plane.fill(bias.data()[o]);
            for c in 0..g.in_channels {
                let x_plane = &xd[(b * g.in_channels + c) * plane..][..plane];
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let weight = k_o[(c * g.kernel_h + kh) * g.kernel_w + kw];
                        for oh in 0..g.out_h {
                            let x_row = &x_plane[(oh * g.stride + kh) * g.width..];
                            let o_row = &mut out_plane[oh * g.out_w..(oh + 1) * g.out_w];
                            for (ow, acc) in o_row.iter_mut().enumerate() {
                                *acc += weight * x_row[ow * g.stride + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of `conv2d_forward`: `(d_x, d_kernel, d_bias)`.
pub fn conv2d_backward(
    kernel: &Tensor,
    x: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[kernel.shape().first().copied().unwrap_or(1)]);
    let g = conv_geometry(kernel, x, &bias, stride)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(Error::Dimension(format!(
            "conv grad {:?} does not match output of kernel {:?} on {:?}",
            grad_out.shape(),
            kernel.shape(),
            x.shape()
        )));
    }
    let k = kernel.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.out_channels];
    let plane = g.height * g.width;
    let k_size = g.in_channels * g.kernel_h * g.kernel_w;
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let g_plane = &gd[(b * g.out_channels + o) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            db[o] += g_plane.iter().sum::<f64>();
            for c in 0..g.in_channels {
                let base = (b * g.in_channels + c) * plane;
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let k_idx = o * k_size + (c * g.kernel_h + kh) * g.kernel_w + kw;
                        let weight = k[k_idx];
                        let mut acc = 0.0;
                        for oh in 0..g.out_h {
                            for ow in 0..g.out_w {
                                let gv = g_plane[oh * g.out_w + ow];
                                let xi = base + (oh * g.stride + kh) * g.width + ow * g.stride + kw;
                                acc += gv * xd[xi];
                                dx[xi] += gv * weight;
                            }
                        }
                        dk[k_idx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::vector(db),
    ))
}

fn pool_dims(shape: &[usize], window: usize) -> Result<[usize; 4]> {
    let &[b, c, h, w] = shape else {
        return Err(Error::Dimension(format!(
            "avgpool input must be [batch, channels, h, w], got {shape:?}"
        )));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Dimension(format!(
            "spatial dims {h}x{w} not divisible by pooling window {window}"
        )));
    }
    Ok([b, c, h, w])
}

/// Non-overlapping window mean.
pub fn avgpool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    let [b, c, h, w] = pool_dims(x.shape(), window)?;
    let (oh, ow) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, o_plane) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(oh * ow))
    {
        for i in 0..h {
            for j in 0..w {
                o_plane[(i / window) * ow + j / window] += plane[i * w + j];
            }
        }
        o_plane.iter_mut().for_each(|v| *v *= norm);
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avgpool2d_backward(
    input_shape: &[usize],
    window: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [b, c, h, w] = pool_dims(input_shape, window)?;
    let (oh, ow) = (h / window, w / window);
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::Dimension(format!(
            "avgpool grad {:?} does not match input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let norm = 1.0 / (window * window) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    for (g_plane, d_plane) in grad_out
        .data()
        .chunks_exact(oh * ow)
        .zip(dx.chunks_exact_mut(h * w))
    {
        for i in 0..h {
            for j in 0..w {
                d_plane[i * w + j] = g_plane[(i / window) * ow + j / window] * norm;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Element-wise `min(max(x, lo), hi)`.
pub fn clip_interval(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    check_interval(lo, hi)?;
    Ok(x.map(|v| v.clamp(lo, hi)))
}

/// Passes the gradient where `lo <= x <= hi`; the endpoints count as inside.
pub fn clip_backward(x: &Tensor, lo: f64, hi: f64, grad_out: &Tensor) -> Result<Tensor> {
    check_interval(lo, hi)?;
    x.zip_map(
        grad_out,
        |v, g| if (lo..=hi).contains(&v) { g } else { 0.0 },
    )
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::Argument(format!(
            "clip interval [{lo}, {hi}] is empty"
        )));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(loss, _)| loss)
}

/// Loss together with its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    for ((row, &label), g_row) in logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .zip(grad.chunks_exact_mut(classes))
    {
        if label >= classes {
            return Err(Error::Argument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        for (g, v) in g_row.iter_mut().zip(row) {
            *g = (v - log_z).exp() / batch as f64;
        }
        g_row[label] -= 1.0 / batch as f64;
    }
    Ok((
        total / batch as f64,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

/// Cosine similarity; `degenerate` is set when either vector is all zero, in
/// which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Cosine> {
    let ab = a.dot(b)?;
    let (na, nb) = (a.l2_norm_sq().sqrt(), b.l2_norm_sq().sqrt());
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector, returning 0");
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (ab / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// d cos(a, b) / d b. Zero when the similarity is degenerate.
pub fn cosine_grad_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ab = a.dot(b)?;
    let (na, nb2) = (a.l2_norm_sq().sqrt(), b.l2_norm_sq());
    if na == 0.0 || nb2 == 0.0 {
        return Ok(Tensor::zeros(b.shape()));
    }
    let nb = nb2.sqrt();
    let cos = ab / (na * nb);
    a.zip_map(b, |ai, bi| ai / (na * nb) - cos * bi / nb2)
}
