use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::Stream;

/// On-the-fly augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub intensity_shift_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_deg: 45.0,
            intensity_shift_range: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            intensity_shift_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.max_rotation_deg >= 0.0
            && self.max_rotation_deg.is_finite()
            && (0.0..=1.0).contains(&self.intensity_shift_range);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid augmentation {self:?}")))
        }
    }
}

/// The random choices for one augmented image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub shift: f64,
}

impl AugmentDraw {
    /// Always consumes four draws, so later samples do not depend on the config.
    pub fn sample(cfg: &AugmentConfig, rng: &mut Stream) -> Self {
        let flip_h = rng.uniform() < cfg.flip_prob;
        let flip_v = rng.uniform() < cfg.flip_prob;
        let angle_deg = cfg.max_rotation_deg * (2.0 * rng.uniform() - 1.0);
        let shift = cfg.intensity_shift_range * (2.0 * rng.uniform() - 1.0);
        AugmentDraw {
            flip_h,
            flip_v,
            angle_deg,
            shift,
        }
    }

    /// Flips, then rotation, then intensity shift with clamping to [0, 1].
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut data = image.data().to_vec();
        if self.flip_h {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.flip_v {
            for y in 0..h / 2 {
                let (top, bottom) = data.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
        if self.angle_deg != 0.0 {
            data = rotate(&data, h, w, self.angle_deg);
        }
        if self.shift != 0.0 {
            for v in &mut data {
                *v = (*v as f64 + self.shift).clamp(0.0, 1.0) as f32;
            }
        }
        Tensor::new(vec![h, w], data).expect("shape preserved")
    }
}

pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut Stream) -> Tensor {
    AugmentDraw::sample(cfg, rng).apply(image)
}

/// Rotates counter-clockwise about the image centre with bilinear
/// resampling; samples falling outside the source read as zero.
pub fn rotate(src: &[f32], h: usize, w: usize, angle_deg: f64) -> Vec<f32> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out[y * w + x] = v as f32;
        }
    }
    out
}
