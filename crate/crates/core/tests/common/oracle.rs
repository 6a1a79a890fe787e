//! Independent straight-line reference implementations used as test oracles.
//! Nothing here calls into the library's numeric code paths.
#![allow(dead_code)]

use fedkappa::nn::{Layer, ModelSpec};

/// Naive f64 forward pass. Returns logits and every ReLU input sign pattern.
pub fn forward_f64(spec: &ModelSpec, params: &[f64], image: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut c = 1usize;
    let mut h = spec.input_resolution;
    let mut w = spec.input_resolution;
    let mut x: Vec<f64> = image.to_vec();
    let mut off = 0usize;
    let mut signs = Vec::new();
    for layer in &spec.layers {
        match *layer {
            Layer::Conv { out_channels, kernel, stride } => {
                let pad = kernel as isize / 2;
                let oh = (h + 2 * (kernel / 2) - kernel) / stride + 1;
                let ow = (w + 2 * (kernel / 2) - kernel) / stride + 1;
                let wlen = out_channels * c * kernel * kernel;
                let weights = &params[off..off + wlen];
                let bias = &params[off + wlen..off + wlen + out_channels];
                off += wlen + out_channels;
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias[o];
                            for i in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride) as isize + ky as isize - pad;
                                        let ix = (ox * stride) as isize + kx as isize - pad;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let wv = weights[((o * c + i) * kernel + ky) * kernel + kx];
                                        s += wv * x[(i * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                x = y;
                c = out_channels;
                h = oh;
                w = ow;
            }
            Layer::Dense { out_features } => {
                let n_in = x.len();
                let wlen = out_features * n_in;
                let weights = &params[off..off + wlen];
                let bias = &params[off + wlen..off + wlen + out_features];
                off += wlen + out_features;
                x = (0..out_features)
                    .map(|o| bias[o] + (0..n_in).map(|j| weights[o * n_in + j] * x[j]).sum::<f64>())
                    .collect();
                c = out_features;
                h = 1;
                w = 1;
            }
            Layer::Relu => {
                signs.extend(x.iter().map(|&v| v > 0.0));
                x = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            }
            Layer::GlobalAvgPool => {
                let plane = h * w;
                x = (0..c).map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
                h = 1;
                w = 1;
            }
        }
    }
    (x, signs)
}

/// Mean cross-entropy over samples in f64, plus the concatenated ReLU signs.
pub fn loss_f64(spec: &ModelSpec, params: &[f64], images: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut all_signs = Vec::new();
    for (img, &y) in images.iter().zip(labels) {
        let (z, signs) = forward_f64(spec, params, img);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
        all_signs.extend(signs);
    }
    (total / images.len() as f64, all_signs)
}

/// Central finite difference of `loss_f64` for one coordinate. Shrinks the
/// step when the perturbation flips a ReLU (the loss is not differentiable
/// across a kink); returns `None` if no step up to 1e-8 avoids the kink.
pub fn fd_coordinate(
    spec: &ModelSpec,
    params: &[f64],
    images: &[Vec<f64>],
    labels: &[usize],
    j: usize,
    base_signs: &[bool],
) -> Option<f64> {
    let mut eps = 1e-3;
    while eps >= 1e-8 {
        let mut p = params.to_vec();
        p[j] = params[j] + eps;
        let (lp, sp) = loss_f64(spec, &p, images, labels);
        p[j] = params[j] - eps;
        let (lm, sm) = loss_f64(spec, &p, images, labels);
        if sp == base_signs && sm == base_signs {
            return Some((lp - lm) / (2.0 * eps));
        }
        eps /= 10.0;
    }
    None
}

/// Reference Adam (beta1 0.9, beta2 0.999, eps 1e-8, decoupled decay) in f64.
pub fn adam_reference(
    start: &[f64],
    grad_fn: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    lr: f64,
    wd: f64,
) -> Vec<f64> {
    let mut p = start.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for t in 1..=steps {
        let g = grad_fn(&p);
        for i in 0..p.len() {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
            p[i] = p[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    p
}

/// Cohen's weighted kappa straight from the definition:
/// 1 - sum(disagreement * observed) / sum(disagreement * expected).
pub fn kappa_bruteforce(a: &[usize], b: &[usize], classes: usize) -> Option<f64> {
    let n = a.len() as f64;
    let mut observed = vec![vec![0.0; classes]; classes];
    for (&i, &j) in a.iter().zip(b) {
        observed[i][j] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..classes {
        for j in 0..classes {
            let d = (i as f64 - j as f64).abs() / (classes as f64 - 1.0);
            let ri = a.iter().filter(|&&x| x == i).count() as f64;
            let cj = b.iter().filter(|&&x| x == j).count() as f64;
            num += d * observed[i][j] / n;
            den += d * ri * cj / (n * n);
        }
    }
    if den == 0.0 {
        None
    } else {
        Some(1.0 - num / den)
    }
}

/// Bilinear resize with half-pixel centres and edge clamping, written as
/// the textbook four-neighbour weighted sum.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        for x in 0..dw {
            let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| src[yy * sw + xx];
            out[y * dw + x] = (1.0 - ty) * (1.0 - tx) * g(y0, x0)
                + (1.0 - ty) * tx * g(y0, x1)
                + ty * (1.0 - tx) * g(y1, x0)
                + ty * tx * g(y1, x1);
        }
    }
    out
}
