//! Forward pass, softmax cross-entropy and analytic backpropagation.
//!
//! Samples in a batch are processed independently (optionally in parallel)
//! and their gradients are summed in sample order with f64 accumulators,
//! so the result does not depend on the execution mode.

use crate::error::{Error, Result};
use crate::nn::spec::{Layer, ModelSpec, ParamVector, PlannedLayer, Shape3};
use crate::nn::tensor::Tensor;
use crate::par::Parallelism;

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Tensor) -> Result<usize> {
    params.check(spec)?;
    let r = spec.input_resolution;
    match batch.shape() {
        [b, h, w] if *h == r && *w == r => Ok(*b),
        other => Err(Error::InvalidShape(format!(
            "batch shape {other:?}, expected [B, {r}, {r}]"
        ))),
    }
}

/// Logits for every sample in `batch` (shape `[B, H, W]`), returned as `[B, C]`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Tensor) -> Result<Tensor> {
    forward_with(Parallelism::default(), spec, params, batch)
}

pub fn forward_with(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
) -> Result<Tensor> {
    let b = check_batch(spec, params, batch)?;
    let plan = spec.plan()?;
    let rows = par.map_range(b, |i| {
        let acts = forward_sample(&plan, &params.values, batch.row(i));
        acts.into_iter().last().unwrap()
    });
    Tensor::new(vec![b, spec.num_classes], rows.concat())
}

/// Softmax in f64 via the max-shifted exponentials.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-sample class probabilities, `[B][C]`.
pub fn predict_proba(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    let logits = forward_with(par, spec, params, batch)?;
    Ok((0..logits.shape()[0]).map(|i| softmax(logits.row(i))).collect())
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    loss_and_grad_with(Parallelism::default(), spec, params, batch, labels)
}

pub fn loss_and_grad_with(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    let b = check_batch(spec, params, batch)?;
    if labels.len() != b {
        return Err(Error::InvalidShape(format!("{} labels for {b} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::InvalidLabel { label, classes: spec.num_classes });
    }
    let plan = spec.plan()?;
    let per_sample = par.map_range(b, |i| sample_loss_grad(&plan, &params.values, batch.row(i), labels[i]));

    let mut loss = 0.0f64;
    let mut acc = vec![0.0f64; params.len()];
    for (l, g) in &per_sample {
        loss += l;
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v as f64;
        }
    }
    let scale = 1.0 / b as f64;
    let grad = ParamVector {
        values: acc.into_iter().map(|a| (a * scale) as f32).collect(),
        spec_hash: params.spec_hash,
    };
    Ok((loss * scale, grad))
}

fn sample_loss_grad(plan: &[PlannedLayer], params: &[f32], x: &[f32], label: usize) -> (f64, Vec<f32>) {
    let acts = forward_sample(plan, params, x);
    let logits = acts.last().unwrap();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let sum: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label] as f64;
    let dlogits: Vec<f32> = logits
        .iter()
        .enumerate()
        .map(|(c, &z)| {
            let p = (z as f64 - log_z).exp();
            (p - if c == label { 1.0 } else { 0.0 }) as f32
        })
        .collect();
    let grad = backward_sample(plan, params, &acts, dlogits);
    (loss, grad)
}

/// Returns the input followed by every layer's output.
fn forward_sample(plan: &[PlannedLayer], params: &[f32], x: &[f32]) -> Vec<Vec<f32>> {
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(plan.len() + 1);
    acts.push(x.to_vec());
    for l in plan {
        let input = acts.last().unwrap();
        let mut out = vec![0.0f32; l.output.len()];
        match l.layer {
            Layer::Conv { kernel, stride, .. } => {
                let (w, b) = layer_params(l, params);
                conv_forward(input, l.input, l.output, w, b, kernel, stride, &mut out);
            }
            Layer::Dense { .. } => {
                let (w, b) = layer_params(l, params);
                let n_in = l.input.len();
                for (o, y) in out.iter_mut().enumerate() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let s: f64 = row.iter().zip(input).map(|(&a, &v)| a as f64 * v as f64).sum();
                    *y = (s + b[o] as f64) as f32;
                }
            }
            Layer::Relu => {
                for (y, &v) in out.iter_mut().zip(input) {
                    *y = v.max(0.0);
                }
            }
            Layer::GlobalAvgPool => {
                let plane = l.input.h * l.input.w;
                for (c, y) in out.iter_mut().enumerate() {
                    let s: f64 = input[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
                    *y = (s / plane as f64) as f32;
                }
            }
        }
        acts.push(out);
    }
    acts
}

fn backward_sample(plan: &[PlannedLayer], params: &[f32], acts: &[Vec<f32>], dlogits: Vec<f32>) -> Vec<f32> {
    let total: usize = plan.iter().map(|l| l.weight_len + l.bias_len).sum();
    let mut grad = vec![0.0f32; total];
    let mut dout = dlogits;
    for (i, l) in plan.iter().enumerate().rev() {
        let input = &acts[i];
        let mut din = vec![0.0f32; l.input.len()];
        match l.layer {
            Layer::Conv { kernel, stride, .. } => {
                let (w, _) = layer_params(l, params);
                let (gw, gb) = grad[l.offset..l.offset + l.weight_len + l.bias_len].split_at_mut(l.weight_len);
                let din = (i > 0).then_some(&mut din[..]);
                conv_backward(input, l.input, l.output, w, kernel, stride, &dout, gw, gb, din);
            }
            Layer::Dense { .. } => {
                let (w, _) = layer_params(l, params);
                let n_in = l.input.len();
                let (gw, gb) = grad[l.offset..l.offset + l.weight_len + l.bias_len].split_at_mut(l.weight_len);
                for (o, &d) in dout.iter().enumerate() {
                    gb[o] = d;
                    let grow = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, &v) in grow.iter_mut().zip(input) {
                        *g = d * v;
                    }
                }
                for (j, dj) in din.iter_mut().enumerate() {
                    let s: f64 = dout
                        .iter()
                        .enumerate()
                        .map(|(o, &d)| w[o * n_in + j] as f64 * d as f64)
                        .sum();
                    *dj = s as f32;
                }
            }
            Layer::Relu => {
                for ((dj, &d), &v) in din.iter_mut().zip(&dout).zip(input) {
                    *dj = if v > 0.0 { d } else { 0.0 };
                }
            }
            Layer::GlobalAvgPool => {
                let plane = l.input.h * l.input.w;
                for (c, &d) in dout.iter().enumerate() {
                    let v = (d as f64 / plane as f64) as f32;
                    din[c * plane..(c + 1) * plane].fill(v);
                }
            }
        }
        dout = din;
    }
    grad
}

fn layer_params<'a>(l: &PlannedLayer, params: &'a [f32]) -> (&'a [f32], &'a [f32]) {
    let w = &params[l.offset..l.offset + l.weight_len];
    let b = &params[l.offset + l.weight_len..l.offset + l.weight_len + l.bias_len];
    (w, b)
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `[0, width)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// Fixed-order dot product with eight f32 lanes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// Patch matrix `[ic * k * k][oh * ow]` with zero padding.
fn im2col(input: &[f32], is: Shape3, os: Shape3, kernel: usize, stride: usize) -> Vec<f32> {
    let pad = kernel / 2;
    let op = os.h * os.w;
    let ip = is.h * is.w;
    let mut col = vec![0.0f32; is.c * kernel * kernel * op];
    for ic in 0..is.c {
        let src = &input[ic * ip..(ic + 1) * ip];
        for ky in 0..kernel {
            let (oy0, oy1) = valid_range(os.h, is.h, ky, pad, stride);
            for kx in 0..kernel {
                let r = (ic * kernel + ky) * kernel + kx;
                let dst = &mut col[r * op..(r + 1) * op];
                let (ox0, ox1) = valid_range(os.w, is.w, kx, pad, stride);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &src[iy * is.w..(iy + 1) * is.w];
                    let drow = &mut dst[oy * os.w..(oy + 1) * os.w];
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(dcol: &[f32], is: Shape3, os: Shape3, kernel: usize, stride: usize, din: &mut [f32]) {
    let pad = kernel / 2;
    let op = os.h * os.w;
    let ip = is.h * is.w;
    for ic in 0..is.c {
        let dst = &mut din[ic * ip..(ic + 1) * ip];
        for ky in 0..kernel {
            let (oy0, oy1) = valid_range(os.h, is.h, ky, pad, stride);
            for kx in 0..kernel {
                let r = (ic * kernel + ky) * kernel + kx;
                let src = &dcol[r * op..(r + 1) * op];
                let (ox0, ox1) = valid_range(os.w, is.w, kx, pad, stride);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &src[oy * os.w..(oy + 1) * os.w];
                    let drow = &mut dst[iy * is.w..(iy + 1) * is.w];
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        axpy(1.0, &srow[ox0..ox1], &mut drow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox * stride + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f32],
    is: Shape3,
    os: Shape3,
    w: &[f32],
    b: &[f32],
    kernel: usize,
    stride: usize,
    out: &mut [f32],
) {
    let op = os.h * os.w;
    let rows = is.c * kernel * kernel;
    let col = im2col(input, is, os, kernel, stride);
    for oc in 0..os.c {
        let plane = &mut out[oc * op..(oc + 1) * op];
        plane.fill(b[oc]);
        let wrow = &w[oc * rows..(oc + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            axpy(wv, &col[r * op..(r + 1) * op], plane);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f32],
    is: Shape3,
    os: Shape3,
    w: &[f32],
    kernel: usize,
    stride: usize,
    dout: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    din: Option<&mut [f32]>,
) {
    let op = os.h * os.w;
    let rows = is.c * kernel * kernel;
    let col = im2col(input, is, os, kernel, stride);
    let need_din = din.is_some();
    let mut dcol = if need_din { vec![0.0f32; rows * op] } else { Vec::new() };
    for oc in 0..os.c {
        let dplane = &dout[oc * op..(oc + 1) * op];
        gb[oc] = dplane.iter().map(|&d| d as f64).sum::<f64>() as f32;
        let wrow = &w[oc * rows..(oc + 1) * rows];
        for r in 0..rows {
            let crow = &col[r * op..(r + 1) * op];
            gw[oc * rows + r] = dot(dplane, crow);
            if need_din {
                axpy(wrow[r], dplane, &mut dcol[r * op..(r + 1) * op]);
            }
        }
    }
    // the network input needs no gradient
    if let Some(din) = din {
        col2im(&dcol, is, os, kernel, stride, din);
    }
}
