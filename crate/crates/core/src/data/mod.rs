//! Synthetic multi-site imaging datasets.
//!
//! Sites differ in size, class prior and intensity statistics; each image is
//! a blob-texture "density" picture whose bright fraction grows with its
//! ordinal label. Patients group images and are never split across
//! train/val/test.

mod dataset;
mod preprocess;
mod profile;
mod render;

pub use dataset::{
    generate_site, generate_site_with, split_by_patient, SiteDataset, Split, DATASET_MAGIC, DATASET_VERSION,
};
pub use preprocess::{preprocess, resize_bilinear};
pub use profile::{
    default_seven_site_profiles, reseed, ProfilesFile, SiteProfile, DESK_IMAGES_PER_PATIENT, DESK_RESOLUTION,
    MIN_SCALED_COUNT, NUM_CLASSES, REFERENCE_COUNTS,
};
pub use render::DensityRenderer;

use crate::par::Parallelism;
use crate::Result;

/// Generates several sites, in parallel when enabled; output order follows `profiles`.
pub fn generate_sites(par: Parallelism, profiles: &[SiteProfile]) -> Result<Vec<SiteDataset>> {
    par.try_map_range(profiles.len(), |i| generate_site(&profiles[i]))
}
