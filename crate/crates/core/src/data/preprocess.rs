use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Min-max normalizes a 2-D image to [0, 1] (constant images become all
/// zeros), then bilinearly resamples it to `target x target`.
pub fn preprocess(image: &[f32], height: usize, width: usize, target: usize) -> Result<Tensor> {
    if image.is_empty() || height == 0 || width == 0 || target == 0 || image.len() != height * width {
        return Err(Error::InvalidShape(format!(
            "image of {} values as {height}x{width} -> {target}",
            image.len()
        )));
    }
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi as f64 - lo as f64;
    let normalized: Vec<f32> = if range > 0.0 {
        image.iter().map(|&v| ((v as f64 - lo as f64) / range) as f32).collect()
    } else {
        vec![0.0; image.len()]
    };
    let data = resize_bilinear(&normalized, height, width, target, target);
    Tensor::new(vec![target, target], data)
}

/// Bilinear resampling with half-pixel centres, clamped at the borders.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let axis = |dst: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let f = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n_src - 1), f - i0 as f64)
    };
    let cols: Vec<_> = (0..dw).map(|x| axis(x, dw, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, ty) = axis(y, dh, sh);
        for &(x0, x1, tx) in &cols {
            let top = src[y0 * sw + x0] as f64 * (1.0 - tx) + src[y0 * sw + x1] as f64 * tx;
            let bottom = src[y1 * sw + x0] as f64 * (1.0 - tx) + src[y1 * sw + x1] as f64 * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_range_image_at_target_is_unchanged() {
        let img: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let out = preprocess(&img, 4, 4, 4).unwrap();
        for (a, b) in out.data().iter().zip(&img) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let out = preprocess(&[3.5; 64], 8, 8, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(preprocess(&[], 0, 0, 4), Err(Error::InvalidShape(_))));
        assert!(matches!(preprocess(&[1.0; 5], 2, 2, 4), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn output_in_unit_range() {
        let img: Vec<f32> = (0..100).map(|i| ((i * 37) % 101) as f32 * 12.0 - 40.0).collect();
        let out = preprocess(&img, 10, 10, 7).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
