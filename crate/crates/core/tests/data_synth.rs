mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::oracle;
use fedkappa::data::{
    default_seven_site_profiles, generate_site, preprocess, split_by_patient, SiteDataset, SiteProfile, Split,
};

fn profile(mean: f64, seed: u64) -> SiteProfile {
    SiteProfile {
        site_id: format!("m{seed}"),
        n_train: 200,
        n_val: 0,
        n_test: 0,
        class_prior: [0.25, 0.25, 0.25, 0.25],
        intensity_mean: mean,
        intensity_std: 0.1,
        images_per_patient: 1.0,
        resolution: 32,
        seed,
    }
}

fn mean_of(ds: &SiteDataset) -> f64 {
    ds.images.iter().map(|i| i.mean()).sum::<f64>() / ds.len() as f64
}

#[test]
fn intensity_mean_offset_is_reproduced() {
    let a = generate_site(&profile(0.3, 1)).unwrap();
    let b = generate_site(&profile(0.5, 1)).unwrap();
    let diff = mean_of(&b) - mean_of(&a);
    assert!((diff - 0.2).abs() <= 0.02, "{diff}");
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && xs[idx[e + 1]] == xs[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn labels_are_learnable_from_image_mean() {
    for p in default_seven_site_profiles(20) {
        let ds = generate_site(&p).unwrap();
        assert!(ds.len() >= 200);
        let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
        let means: Vec<f64> = ds.images.iter().map(|i| i.mean()).collect();
        let rho = pearson(&ranks(&labels), &ranks(&means));
        assert!(rho > 0.8, "{}: spearman {rho}", p.site_id);
        // per-class mean brightness strictly increasing over present classes
        let mut by_class: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for (l, m) in ds.labels.iter().zip(&means) {
            let e = by_class.entry(*l).or_default();
            e.0 += m;
            e.1 += 1;
        }
        let class_means: Vec<f64> = by_class.values().map(|(s, n)| s / *n as f64).collect();
        assert!(class_means.windows(2).all(|w| w[0] < w[1]), "{}: {class_means:?}", p.site_id);
    }
}

#[test]
fn class_prior_fidelity_at_patient_level() {
    let mut p = profile(0.5, 3);
    p.n_train = 2000;
    p.resolution = 8;
    p.class_prior = [0.1, 0.4, 0.3, 0.2];
    let ds = generate_site(&p).unwrap();
    let mut per_patient: BTreeMap<u32, u8> = BTreeMap::new();
    for (pid, l) in ds.patient_ids.iter().zip(&ds.labels) {
        per_patient.insert(*pid, *l);
    }
    let n = per_patient.len() as f64;
    for c in 0..4u8 {
        let k = per_patient.values().filter(|&&l| l == c).count() as f64;
        let q = p.class_prior[c as usize];
        let sigma = (n * q * (1.0 - q)).sqrt();
        assert!((k - n * q).abs() <= 3.0 * sigma, "class {c}: {k} vs {}", n * q);
    }
}

#[test]
fn generation_is_reproducible() {
    let p = &default_seven_site_profiles(50)[6];
    let a = generate_site(p).unwrap();
    let b = generate_site(p).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn patient_split_fractions_and_disjointness() {
    // 1000 patients with 1..=4 images each
    let mut ids = Vec::new();
    for p in 0..1000u32 {
        for _ in 0..1 + (p * 7919) % 4 {
            ids.push(p);
        }
    }
    let splits = split_by_patient(&ids, [0.7, 0.1, 0.2], 42).unwrap();
    let n = ids.len() as f64;
    for (s, target) in [(Split::Train, 0.7), (Split::Val, 0.1), (Split::Test, 0.2)] {
        let frac = splits.iter().filter(|&&x| x == s).count() as f64 / n;
        assert!((frac - target).abs() <= 0.1 * target, "{s:?}: {frac}");
    }
    let mut where_: BTreeMap<u32, BTreeSet<Split>> = BTreeMap::new();
    for (p, s) in ids.iter().zip(&splits) {
        where_.entry(*p).or_default().insert(*s);
    }
    assert!(where_.values().all(|s| s.len() == 1));
}

#[test]
fn ramp_downsample_matches_bilinear_oracle() {
    let ramp: Vec<f32> = (0..64 * 64).map(|i| ((i % 64) + (i / 64)) as f32 / 126.0).collect();
    let out = preprocess(&ramp, 64, 64, 32).unwrap();
    let expected = oracle::bilinear_resize(&ramp.iter().map(|&v| v as f64).collect::<Vec<_>>(), 64, 64, 32, 32);
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = &default_seven_site_profiles(50)[1];
    let ds = generate_site(p).unwrap();
    let path = dir.path().join("site2.fkds");
    ds.save(&path).unwrap();
    let back = SiteDataset::load(&path).unwrap();
    assert_eq!(back.site_id, "site2");
    assert_eq!(back.to_bytes(), ds.to_bytes());
    assert_eq!(back, ds);
}
