//! Blob-texture density images.
//!
//! A smooth random field is thresholded at the quantile that leaves the
//! requested fraction of "bright tissue" pixels, then rendered in raw detector
//! units with additive noise. Higher density classes get larger bright
//! fractions, so labels stay ordinal and learnable from image content.

use crate::rng::Stream;

/// Rendering parameters. Raw images are rendered at `oversample` times the
/// output resolution and brought down by `preprocess`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRenderer {
    /// Target bright-tissue fraction per class, strictly increasing.
    pub bright_fraction: [f64; 4],
    /// Per-patient spread of the bright fraction around the class target.
    pub patient_jitter: f64,
    /// Additional per-image spread.
    pub view_jitter: f64,
    /// Blob radius as a fraction of the image side.
    pub blob_scale: f64,
    pub blobs: usize,
    pub oversample: usize,
    /// Reference moments of preprocessed images, used to map a site onto
    /// its own intensity mean and spread.
    pub reference_mean: f64,
    pub reference_std: f64,
}

impl Default for DensityRenderer {
    fn default() -> Self {
        DensityRenderer {
            bright_fraction: [0.10, 0.35, 0.60, 0.85],
            patient_jitter: 0.08,
            view_jitter: 0.03,
            blob_scale: 0.18,
            blobs: 14,
            oversample: 2,
            reference_mean: 0.5,
            reference_std: 0.3,
        }
    }
}

impl DensityRenderer {
    /// Raw image of side `side` with roughly `fraction` bright pixels.
    pub fn render_raw(&self, side: usize, fraction: f64, rng: &mut Stream) -> Vec<f32> {
        let fraction = fraction.clamp(0.02, 0.98);
        let n = side * side;
        let radius = (self.blob_scale * side as f64).max(1.0);
        let mut field = vec![0.0f64; n];
        for _ in 0..self.blobs {
            let cy = rng.uniform() * side as f64;
            let cx = rng.uniform() * side as f64;
            let r = radius * rng.uniform_in(0.6, 1.4);
            let amp = rng.uniform_in(0.5, 1.5);
            let inv = 1.0 / (2.0 * r * r);
            for y in 0..side {
                let dy = y as f64 + 0.5 - cy;
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    field[y * side + x] += amp * (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
        for v in &mut field {
            *v += 0.15 * rng.normal();
        }
        let mut sorted = field.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = ((1.0 - fraction) * n as f64).floor() as usize;
        let threshold = sorted[cut.min(n - 1)];
        let spread = (sorted[n - 1] - sorted[0]).max(1e-9);
        let softness = 0.03 * spread;
        field
            .iter()
            .map(|&f| {
                let tissue = 1.0 / (1.0 + (-(f - threshold) / softness).exp());
                // raw detector counts
                (200.0 + 2400.0 * tissue + 150.0 * rng.normal()).max(0.0) as f32
            })
            .collect()
    }

    /// Maps a preprocessed [0, 1] image onto a site's intensity statistics.
    pub fn apply_site_intensity(&self, image: &mut [f32], mean: f64, std: f64) {
        let gain = std / self.reference_std;
        for v in image.iter_mut() {
            let shifted = mean + gain * (*v as f64 - self.reference_mean);
            *v = shifted.clamp(0.0, 1.0) as f32;
        }
    }
}
