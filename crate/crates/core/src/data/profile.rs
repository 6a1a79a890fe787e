use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_CLASSES: usize = 4;

/// Generation parameters for one synthetic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_id: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Weights for classes a..d.
    pub class_prior: [f64; NUM_CLASSES],
    pub intensity_mean: f64,
    pub intensity_std: f64,
    pub images_per_patient: f64,
    pub resolution: usize,
    pub seed: u64,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProfile(format!("{}: {m}", self.site_id)));
        if self.class_prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!("class prior {:?} has negative or non-finite mass", self.class_prior));
        }
        let mass: f64 = self.class_prior.iter().sum();
        if mass == 0.0 && self.n_train + self.n_val + self.n_test > 0 {
            return bad("zero prior mass with positive image counts".into());
        }
        if (mass - 1.0).abs() > 1e-9 {
            return bad(format!("class prior sums to {mass}"));
        }
        if self.n_train == 0 {
            return bad("n_train must be >= 1".into());
        }
        if !(self.intensity_mean > 0.0 && self.intensity_mean < 1.0) {
            return bad(format!("intensity_mean {} outside (0, 1)", self.intensity_mean));
        }
        if !(self.intensity_std > 0.0 && self.intensity_std <= 1.0) {
            return bad(format!("intensity_std {} outside (0, 1]", self.intensity_std));
        }
        if !(self.images_per_patient >= 1.0) {
            return bad(format!("images_per_patient {} < 1", self.images_per_patient));
        }
        if self.resolution < 2 || self.resolution > u16::MAX as usize {
            return bad(format!("resolution {}", self.resolution));
        }
        Ok(())
    }
}

/// Training/validation/test image counts of the seven reference sites.
pub const REFERENCE_COUNTS: [(usize, usize, usize); 7] = [
    (22933, 3366, 6534),
    (8365, 1216, 2568),
    (44115, 6336, 12676),
    (7219, 1030, 2069),
    (6023, 983, 1822),
    (6874, 853, 1727),
    (4021, 664, 1288),
];

const PRIORS: [[f64; NUM_CLASSES]; 7] = [
    [0.10, 0.40, 0.38, 0.12],
    [0.08, 0.46, 0.36, 0.10],
    [0.12, 0.38, 0.40, 0.10],
    [0.15, 0.35, 0.35, 0.15],
    [0.05, 0.30, 0.45, 0.20],
    [0.10, 0.42, 0.36, 0.12],
    // site 7: class b nearly absent
    [0.20, 0.01, 0.55, 0.24],
];

// sites 1-3 and 4-7 form two intensity clusters
const INTENSITY: [(f64, f64); 7] = [
    (0.452, 0.16),
    (0.468, 0.20),
    (0.436, 0.14),
    (0.532, 0.22),
    (0.548, 0.18),
    (0.520, 0.15),
    (0.564, 0.24),
];

pub const MIN_SCALED_COUNT: usize = 40;
pub const DESK_RESOLUTION: usize = 32;
pub const DESK_IMAGES_PER_PATIENT: f64 = 2.0;

fn scaled(count: usize, scale: u32) -> usize {
    ((count as f64 / scale as f64).round() as usize).max(MIN_SCALED_COUNT)
}

/// Seven profiles with the reference counts divided by `scale` (rounded,
/// floor of 40), distinct class priors and intensity statistics.
pub fn default_seven_site_profiles(scale: u32) -> Vec<SiteProfile> {
    let scale = scale.max(1);
    (0..7)
        .map(|i| {
            let (tr, va, te) = REFERENCE_COUNTS[i];
            SiteProfile {
                site_id: format!("site{}", i + 1),
                n_train: scaled(tr, scale),
                n_val: scaled(va, scale),
                n_test: scaled(te, scale),
                class_prior: PRIORS[i],
                intensity_mean: INTENSITY[i].0,
                intensity_std: INTENSITY[i].1,
                images_per_patient: DESK_IMAGES_PER_PATIENT,
                resolution: DESK_RESOLUTION,
                seed: i as u64 + 1,
            }
        })
        .collect()
}

/// Rederives every profile's seed from a master seed and its position.
pub fn reseed(profiles: &mut [SiteProfile], master_seed: u64) {
    for (i, p) in profiles.iter_mut().enumerate() {
        // 63 bits so the seed survives TOML integers
        p.seed = rng::derive(master_seed, "site", &[i as u64]) >> 1;
    }
}

/// Profiles file: a TOML document with one `[[site]]` table per profile.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProfilesFile {
    pub site: Vec<SiteProfile>,
}

impl ProfilesFile {
    pub fn parse(text: &str) -> Result<Vec<SiteProfile>> {
        let file: ProfilesFile =
            toml::from_str(text).map_err(|e| Error::InvalidProfile(format!("profiles file: {e}")))?;
        for p in &file.site {
            p.validate()?;
        }
        Ok(file.site)
    }

    pub fn render(profiles: &[SiteProfile]) -> String {
        toml::to_string(&ProfilesFile { site: profiles.to_vec() }).expect("profiles serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_50_counts() {
        let p = default_seven_site_profiles(50);
        assert_eq!(p.len(), 7);
        assert_eq!(p[0].n_train, 459);
        assert_eq!(p[6].n_train, 80);
        assert_eq!(p[6].n_val, 40);
        assert!(p[6].class_prior[1] <= 0.02);
        for q in &p {
            q.validate().unwrap();
        }
    }

    #[test]
    fn profiles_are_distinct() {
        let p = default_seven_site_profiles(50);
        for i in 0..7 {
            for j in i + 1..7 {
                assert_ne!(p[i].class_prior, p[j].class_prior);
                assert_ne!(p[i].intensity_mean, p[j].intensity_mean);
            }
        }
    }

    #[test]
    fn invalid_profiles() {
        let base = default_seven_site_profiles(50).remove(0);
        let mut p = base.clone();
        p.class_prior = [0.0; 4];
        assert!(matches!(p.validate(), Err(Error::InvalidProfile(_))));
        let mut p = base.clone();
        p.class_prior = [0.5, 0.5, 0.5, 0.0];
        assert!(matches!(p.validate(), Err(Error::InvalidProfile(_))));
        let mut p = base;
        p.intensity_mean = 1.0;
        assert!(matches!(p.validate(), Err(Error::InvalidProfile(_))));
    }

    #[test]
    fn profiles_file_round_trip() {
        let p = default_seven_site_profiles(10);
        let text = ProfilesFile::render(&p);
        assert_eq!(ProfilesFile::parse(&text).unwrap(), p);
    }
}
