use std::collections::BTreeMap;
use std::path::Path;

use crate::data::preprocess::preprocess;
use crate::data::profile::{SiteProfile, NUM_CLASSES};
use crate::data::render::DensityRenderer;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn from_u8(v: u8) -> Result<Split> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Malformed(format!("split byte {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One site's images with ordinal labels, patient grouping and split.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: String,
    pub resolution: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<u32>,
    pub splits: Vec<Split>,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Image indices per patient in `split`, patients in ascending id order.
    pub fn patients(&self, split: Split) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in self.indices(split) {
            map.entry(self.patient_ids[i]).or_default().push(i);
        }
        map
    }

    /// Checks the structural invariants (shared resolution, labels in range,
    /// one split per patient).
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.labels.len() != n || self.patient_ids.len() != n || self.splits.len() != n {
            return Err(Error::InvalidShape("dataset columns differ in length".into()));
        }
        for img in &self.images {
            if img.shape() != [self.resolution, self.resolution] {
                return Err(Error::InvalidShape(format!(
                    "image {:?} in a {}px dataset",
                    img.shape(),
                    self.resolution
                )));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel { label: l as usize, classes: NUM_CLASSES });
        }
        let mut seen: BTreeMap<u32, Split> = BTreeMap::new();
        for (&p, &s) in self.patient_ids.iter().zip(&self.splits) {
            if *seen.entry(p).or_insert(s) != s {
                return Err(Error::InvalidShape(format!("patient {p} spans two splits")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a dataset file; the site id is taken from the file stem.
    pub fn load(path: &Path) -> Result<SiteDataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let site_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&bytes, site_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let px = self.resolution * self.resolution;
        let mut out = Vec::with_capacity(12 + self.len() * (6 + 4 * px));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.resolution as u16).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.patient_ids[i].to_le_bytes());
            out.push(self.labels[i]);
            out.push(self.splits[i] as u8);
            for v in self.images[i].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], site_id: String) -> Result<SiteDataset> {
        let truncated = |needed: usize| Error::Truncated { needed, available: bytes.len() };
        if bytes.len() < 4 {
            return Err(truncated(4));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < 12 {
            return Err(truncated(12));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch { got: version, expected: DATASET_VERSION });
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let resolution = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        if resolution == 0 {
            return Err(Error::InvalidShape("zero resolution".into()));
        }
        let px = resolution * resolution;
        let record = 6 + 4 * px;
        let needed = 12 + count * record;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - needed)));
        }
        let mut ds = SiteDataset {
            site_id,
            resolution,
            images: Vec::with_capacity(count),
            labels: Vec::with_capacity(count),
            patient_ids: Vec::with_capacity(count),
            splits: Vec::with_capacity(count),
        };
        for rec in bytes[12..].chunks_exact(record) {
            let label = rec[4];
            if label as usize >= NUM_CLASSES {
                return Err(Error::InvalidLabel { label: label as usize, classes: NUM_CLASSES });
            }
            ds.patient_ids.push(u32::from_le_bytes(rec[..4].try_into().unwrap()));
            ds.labels.push(label);
            ds.splits.push(Split::from_u8(rec[5])?);
            let data = rec[6..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ds.images.push(Tensor::new(vec![resolution, resolution], data)?);
        }
        ds.validate()?;
        Ok(ds)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"FKDS";
pub const DATASET_VERSION: u16 = 1;

/// Generates a site with the default renderer.
pub fn generate_site(profile: &SiteProfile) -> Result<SiteDataset> {
    generate_site_with(profile, &DensityRenderer::default())
}

/// Builds the site patient by patient, split by split, so each split holds
/// exactly the profile's image count. A patient's images share one label
/// drawn from the class prior and one base density.
pub fn generate_site_with(profile: &SiteProfile, renderer: &DensityRenderer) -> Result<SiteDataset> {
    profile.validate()?;
    let res = profile.resolution;
    let raw_side = res * renderer.oversample.max(1);
    let mut patients = Stream::derived(profile.seed, "patients", &[]);
    let mut ds = SiteDataset {
        site_id: profile.site_id.clone(),
        resolution: res,
        images: Vec::new(),
        labels: Vec::new(),
        patient_ids: Vec::new(),
        splits: Vec::new(),
    };
    let mut next_patient: u32 = 1;
    for (split, target) in [
        (Split::Train, profile.n_train),
        (Split::Val, profile.n_val),
        (Split::Test, profile.n_test),
    ] {
        let mut remaining = target;
        while remaining > 0 {
            let views = (1 + patients.poisson(profile.images_per_patient - 1.0) as usize).min(remaining);
            let label = patients.categorical(&profile.class_prior);
            let base = renderer.bright_fraction[label] + renderer.patient_jitter * patients.normal();
            for _ in 0..views {
                let index = ds.images.len() as u64;
                let mut rng = Stream::derived(profile.seed, "image", &[index]);
                let fraction = base + renderer.view_jitter * rng.normal();
                let raw = renderer.render_raw(raw_side, fraction, &mut rng);
                let mut img = preprocess(&raw, raw_side, raw_side, res)?;
                renderer.apply_site_intensity(img.data_mut(), profile.intensity_mean, profile.intensity_std);
                ds.images.push(img);
                ds.labels.push(label as u8);
                ds.patient_ids.push(next_patient);
                ds.splits.push(split);
            }
            next_patient += 1;
            remaining -= views;
        }
    }
    Ok(ds)
}

/// Assigns whole patients to train/val/test so image counts approach
/// `fractions`. Each split with positive fraction receives at least one
/// patient; the rest go, in shuffled order, to the split furthest below
/// its target.
pub fn split_by_patient(patient_ids: &[u32], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in patient_ids {
        *sizes.entry(p).or_default() += 1;
    }
    let wanted: Vec<Split> = Split::ALL.into_iter().filter(|s| fractions[*s as usize] > 0.0).collect();
    if sizes.len() < wanted.len() {
        return Err(Error::TooFewPatients { patients: sizes.len(), splits: wanted.len() });
    }
    let mut order: Vec<u32> = sizes.keys().copied().collect();
    Stream::derived(seed, "split", &[]).shuffle(&mut order);

    let total = patient_ids.len() as f64;
    let mut filled = [0usize; 3];
    let mut assignment: BTreeMap<u32, Split> = BTreeMap::new();
    for (k, &p) in order.iter().enumerate() {
        let split = if k < wanted.len() {
            wanted[k]
        } else {
            *wanted
                .iter()
                .max_by(|a, b| {
                    let da = fractions[**a as usize] * total - filled[**a as usize] as f64;
                    let db = fractions[**b as usize] * total - filled[**b as usize] as f64;
                    // ties go to the earlier split
                    da.total_cmp(&db).then((**b as usize).cmp(&(**a as usize)))
                })
                .unwrap()
        };
        filled[split as usize] += sizes[&p];
        assignment.insert(p, split);
    }
    Ok(patient_ids.iter().map(|p| assignment[p]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::profile::default_seven_site_profiles;

    fn small_profile() -> SiteProfile {
        SiteProfile {
            site_id: "t".into(),
            n_train: 100,
            n_val: 20,
            n_test: 30,
            class_prior: [0.25, 0.25, 0.25, 0.25],
            intensity_mean: 0.5,
            intensity_std: 0.15,
            images_per_patient: 2.0,
            resolution: 16,
            seed: 5,
        }
    }

    #[test]
    fn exact_split_counts() {
        let ds = generate_site(&small_profile()).unwrap();
        assert_eq!(ds.count(Split::Train), 100);
        assert_eq!(ds.count(Split::Val), 20);
        assert_eq!(ds.count(Split::Test), 30);
        ds.validate().unwrap();
    }

    #[test]
    fn degenerate_prior_gives_single_class() {
        let mut p = small_profile();
        p.class_prior = [1.0, 0.0, 0.0, 0.0];
        let ds = generate_site(&p).unwrap();
        assert!(ds.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn pixels_in_unit_range_and_patients_homogeneous() {
        let ds = generate_site(&small_profile()).unwrap();
        assert!(ds.images.iter().all(|im| im.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        let mut label_of = BTreeMap::new();
        for (p, l) in ds.patient_ids.iter().zip(&ds.labels) {
            assert_eq!(*label_of.entry(*p).or_insert(*l), *l);
        }
    }

    #[test]
    fn generation_is_pure() {
        let p = small_profile();
        assert_eq!(generate_site(&p).unwrap().to_bytes(), generate_site(&p).unwrap().to_bytes());
    }

    #[test]
    fn file_errors() {
        let ds = generate_site(&small_profile()).unwrap();
        let bytes = ds.to_bytes();
        let back = SiteDataset::from_bytes(&bytes, "t".into()).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(SiteDataset::from_bytes(&bad, "t".into()), Err(Error::BadMagic(_))));
        assert!(matches!(
            SiteDataset::from_bytes(&bytes[..bytes.len() - 3], "t".into()),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[12 + 4] = 7; // first record's label byte
        assert!(matches!(
            SiteDataset::from_bytes(&bad, "t".into()),
            Err(Error::InvalidLabel { label: 7, .. })
        ));
    }

    #[test]
    fn split_single_patient_is_atomic() {
        let s = split_by_patient(&[9, 9, 9, 9, 9], [1.0, 0.0, 0.0], 1).unwrap();
        assert!(s.iter().all(|&x| x == s[0]));
        assert!(matches!(
            split_by_patient(&[9, 9, 9, 9, 9], [0.7, 0.1, 0.2], 1),
            Err(Error::TooFewPatients { patients: 1, splits: 3 })
        ));
    }

    #[test]
    fn client7_profile_has_nearly_no_class_b() {
        let p = &default_seven_site_profiles(50)[6];
        let ds = generate_site(p).unwrap();
        let b = ds.labels.iter().filter(|&&l| l == 1).count();
        assert!(b as f64 <= 0.05 * ds.len() as f64, "{b}");
    }
}
