//! Hand-written forward/backward passes for every layer in the detector:
//! fully connected, 2-D convolution, ReLU, sigmoid, softmax cross-entropy,
//! smooth-L1 and SGD with momentum. Summation orders are fixed so repeated
//! runs are bit-identical; every backward is checked against central finite
//! differences in the test suite.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Gradients of one layer: w.r.t. its input and w.r.t. each parameter
/// tensor, in the order the layer takes them.
#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub wrt_input: Tensor,
    pub wrt_params: Vec<Tensor>,
}

/// Dot product with four independent accumulators combined in a fixed
/// grouping; bit-reproducible and much faster than a serial chain.
pub(crate) fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..chunks {
        let i = 4 * k;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// out[b,j] = sum_i input[b,i] * weights[i,j] + bias[j]
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, d_in) = dims2(input, "fc input")?;
    let (w_in, d_out) = dims2(weights, "fc weights")?;
    if w_in != d_in {
        return Err(Error::ShapeMismatch {
            expected: vec![d_in, d_out],
            got: weights.shape().to_vec(),
        });
    }
    bias.check_shape(&[d_out])?;

    let mut out = Tensor::zeros(&[batch, d_out]);
    let w = weights.data();
    for b in 0..batch {
        let row = &mut out.data_mut()[b * d_out..(b + 1) * d_out];
        row.copy_from_slice(bias.data());
        let x = &input.data()[b * d_in..(b + 1) * d_in];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(row, xi, &w[i * d_out..(i + 1) * d_out]);
            }
        }
    }
    Ok(out)
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
    let mut d_weights = weights.zeros_like();
    let mut d_bias = Tensor::zeros(&[weights.shape()[1]]);
    let d_input = fc_backward_acc(input, weights, upstream, &mut d_weights, &mut d_bias)?;
    Ok(LayerGradients {
        wrt_input: d_input,
        wrt_params: vec![d_weights, d_bias],
    })
}

/// Like [`fc_backward`] but accumulates the parameter gradients into
/// existing tensors; the training path calls this to avoid churning large
/// per-call weight-gradient allocations.
pub(crate) fn fc_backward_acc(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    d_weights: &mut Tensor,
    d_bias: &mut Tensor,
) -> Result<Tensor> {
    let (batch, d_in) = dims2(input, "fc input")?;
    let (w_in, d_out) = dims2(weights, "fc weights")?;
    if w_in != d_in {
        return Err(Error::ShapeMismatch {
            expected: vec![d_in, d_out],
            got: weights.shape().to_vec(),
        });
    }
    upstream.check_shape(&[batch, d_out])?;
    d_weights.check_shape(&[d_in, d_out])?;
    d_bias.check_shape(&[d_out])?;

    let mut d_input = Tensor::zeros(&[batch, d_in]);
    let w = weights.data();
    for b in 0..batch {
        let up = &upstream.data()[b * d_out..(b + 1) * d_out];
        let x = &input.data()[b * d_in..(b + 1) * d_in];
        let dx = &mut d_input.data_mut()[b * d_in..(b + 1) * d_in];
        for i in 0..d_in {
            dx[i] = dot4(up, &w[i * d_out..(i + 1) * d_out]);
        }
        let dw = d_weights.data_mut();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(&mut dw[i * d_out..(i + 1) * d_out], xi, up);
            }
        }
        axpy(d_bias.data_mut(), 1.0, up);
    }
    Ok(d_input)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
}

fn conv_out_extent(extent: usize, k: usize, cfg: &Conv2dCfg) -> Result<usize> {
    let padded = extent + 2 * cfg.padding;
    if padded < k || cfg.stride == 0 {
        return Err(Error::invalid(format!(
            "conv2d: kernel {k} does not fit extent {extent} with padding {}",
            cfg.padding
        )));
    }
    Ok((padded - k) / cfg.stride + 1)
}

/// Zero-padded 2-D convolution on a single [C,H,W] image.
/// kernel is [C_out, C_in, kh, kw].
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    cfg: &Conv2dCfg,
) -> Result<Tensor> {
    let (c_in, h, w) = dims3(input, "conv input")?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != c_in {
        return Err(Error::ShapeMismatch {
            expected: vec![0, c_in, 0, 0],
            got: ks.to_vec(),
        });
    }
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    bias.check_shape(&[c_out])?;
    let oh = conv_out_extent(h, kh, cfg)?;
    let ow = conv_out_extent(w, kw, cfg)?;

    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let x = input.data();
    let k = kernel.data();
    let o = out.data_mut();
    for co in 0..c_out {
        let b = bias.data()[co];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize]
                                * k[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                o[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    cfg: &Conv2dCfg,
    upstream: &Tensor,
) -> Result<LayerGradients> {
    let (c_in, h, w) = dims3(input, "conv input")?;
    let ks = kernel.shape().to_vec();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = conv_out_extent(h, kh, cfg)?;
    let ow = conv_out_extent(w, kw, cfg)?;
    upstream.check_shape(&[c_out, oh, ow])?;

    let mut d_input = Tensor::zeros(&[c_in, h, w]);
    let mut d_kernel = Tensor::zeros(&ks);
    let mut d_bias = Tensor::zeros(&[c_out]);
    let x = input.data();
    let k = kernel.data();
    let up = upstream.data();
    let dx = d_input.data_mut();
    let dk = d_kernel.data_mut();
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = up[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                d_bias.data_mut()[co] += g;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                            dx[xi] += g * k[ki];
                            dk[ki] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok(LayerGradients {
        wrt_input: d_input,
        wrt_params: vec![d_kernel, d_bias],
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient 0 at exactly zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.check_shape(input.shape())?;
    let mut out = upstream.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Takes the forward *output*: d sigmoid = s (1 - s).
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.check_shape(output.shape())?;
    let mut out = upstream.clone();
    for (g, &s) in out.data_mut().iter_mut().zip(output.data()) {
        *g *= s * (1.0 - s);
    }
    Ok(out)
}

/// Mean over the batch of -log softmax(logits)[label]; returns the loss and
/// the analytic gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, k) = dims2(logits, "logits")?;
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "expected {batch} labels, got {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let mut grad = Tensor::zeros(&[batch, k]);
    let mut loss = 0.0;
    for b in 0..batch {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[labels[b]] - max);
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - max).exp() / denom;
        }
        g[labels[b]] -= 1.0;
    }
    let scale = 1.0 / batch as f64;
    grad.scale(scale);
    Ok((loss * scale, grad))
}

/// Per-element 0.5 x^2 if |x| < 1 else |x| - 0.5, summed and normalized by
/// element count. Returns the loss and gradient w.r.t. `pred`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    target.check_shape(pred.shape())?;
    if pred.is_empty() {
        return Ok((0.0, pred.zeros_like()));
    }
    let mut grad = pred.zeros_like();
    let mut loss = 0.0;
    let n = pred.len() as f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let x = p - t;
        if x.abs() < 1.0 {
            loss += 0.5 * x * x;
            *g = x / n;
        } else {
            loss += x.abs() - 0.5;
            *g = x.signum() / n;
        }
    }
    Ok((loss / n, grad))
}

/// state <- momentum * state + grads; params <- params - lr * state.
pub fn sgd_step(
    params: &mut Tensor,
    grads: &Tensor,
    lr: f64,
    momentum: f64,
    state: &mut Tensor,
) -> Result<()> {
    grads.check_shape(params.shape())?;
    state.check_shape(params.shape())?;
    if lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::non_finite("gradients in sgd_step"));
    }
    for ((p, s), &g) in params
        .data_mut()
        .iter_mut()
        .zip(state.data_mut())
        .zip(grads.data())
    {
        *s = momentum * *s + g;
        *p -= lr * *s;
    }
    Ok(())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!(
            "{what} must be rank 2, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!(
            "{what} must be rank 3, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}
