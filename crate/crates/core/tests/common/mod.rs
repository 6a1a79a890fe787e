#![allow(dead_code)]

pub mod oracle;

use fedkappa::nn::{Layer, ModelSpec, ParamVector, Tensor};
use fedkappa::rng::Stream;

/// A random small classifier with at most 5k parameters.
pub fn random_small_spec(rng: &mut Stream) -> ModelSpec {
    loop {
        let res = 4 + rng.below(5) as usize;
        let mut layers = Vec::new();
        for _ in 0..1 + rng.below(2) {
            layers.push(Layer::Conv {
                out_channels: 1 + rng.below(4) as usize,
                kernel: if rng.bernoulli(0.7) { 3 } else { 1 },
                stride: 1 + rng.below(2) as usize,
            });
            layers.push(Layer::Relu);
        }
        if rng.bernoulli(0.6) {
            layers.push(Layer::GlobalAvgPool);
        }
        if rng.bernoulli(0.5) {
            layers.push(Layer::Dense { out_features: 2 + rng.below(6) as usize });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out_features: 4 });
        if let Ok(spec) = ModelSpec::new(res, layers, 4) {
            if spec.param_count() <= 5000 {
                return spec;
            }
        }
    }
}

/// Random parameters with small non-zero biases so ReLUs sit away from zero.
pub fn random_params(spec: &ModelSpec, rng: &mut Stream) -> ParamVector {
    let mut p = spec.init_params(rng.next_u64());
    for v in &mut p.values {
        *v += (rng.normal() * 0.05) as f32;
    }
    p
}

pub fn random_batch(b: usize, res: usize, rng: &mut Stream) -> Tensor {
    Tensor::new(vec![b, res, res], (0..b * res * res).map(|_| rng.uniform() as f32).collect()).unwrap()
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central finite differences. Coordinates whose FD step cannot avoid a ReLU
/// kink are counted separately.
pub fn max_grad_rel_error(spec: &ModelSpec, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> (f64, usize) {
    let (_, grad) = fedkappa::nn::loss_and_grad(spec, params, batch, labels).unwrap();
    let p64 = to_f64(&params.values);
    let images: Vec<Vec<f64>> = (0..labels.len()).map(|i| to_f64(batch.row(i))).collect();
    let (_, base_signs) = oracle::loss_f64(spec, &p64, &images, labels);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for j in 0..p64.len() {
        let Some(fd) = oracle::fd_coordinate(spec, &p64, &images, labels, j, &base_signs) else {
            skipped += 1;
            continue;
        };
        let a = grad.values[j] as f64;
        let scale = a.abs().max(fd.abs());
        // below this magnitude both values are f32 round-off of zero
        let rel = if scale < 1e-6 { (a - fd).abs() / 1e-6 } else { (a - fd).abs() / scale };
        worst = worst.max(rel);
    }
    (worst, skipped)
}

/// Reference 7-site cross-evaluation grids (rows train, columns test), local then federated.
pub const REFERENCE_LOCAL: [[f64; 7]; 7] = [
    [0.62, 0.59, 0.44, 0.02, 0.02, -0.01, 0.04],
    [0.15, 0.56, 0.02, -0.01, -0.00, 0.00, -0.01],
    [0.19, 0.01, 0.64, 0.02, 0.07, 0.00, 0.05],
    [0.11, 0.02, -0.00, 0.63, 0.52, 0.61, 0.50],
    [-0.00, -0.01, -0.03, 0.54, 0.62, 0.65, 0.31],
    [0.01, 0.11, -0.02, 0.49, 0.59, 0.71, 0.32],
    [0.03, 0.05, -0.05, 0.40, 0.37, 0.46, 0.69],
];

pub const REFERENCE_FEDERATED: [[f64; 7]; 7] = [
    [0.62, 0.62, 0.48, 0.15, 0.23, 0.24, 0.11],
    [0.22, 0.65, 0.11, 0.04, 0.00, 0.00, -0.01],
    [0.41, 0.17, 0.63, 0.07, -0.00, 0.01, -0.01],
    [0.06, 0.48, -0.02, 0.69, 0.57, 0.65, 0.52],
    [0.24, 0.13, 0.02, 0.64, 0.62, 0.69, 0.52],
    [0.23, 0.01, -0.00, 0.53, 0.68, 0.76, 0.31],
    [0.10, 0.21, 0.13, 0.55, 0.44, 0.52, 0.77],
];

pub const REFERENCE_GLOBAL_ROW: [f64; 7] = [0.51, 0.52, 0.49, 0.31, 0.4852, 0.31, 0.0893];

pub fn reference_matrix(values: &[[f64; 7]; 7], global: Option<&[f64; 7]>) -> fedkappa::eval::KappaMatrix {
    let ids = (1..=7).map(|i| format!("site{i}")).collect();
    let mut m = fedkappa::eval::KappaMatrix::from_values(ids, values.iter().map(|r| r.to_vec()).collect());
    m.global_row = global.map(|g| g.iter().copied().map(Some).collect());
    m
}

/// Random label pair of length 1..=50 over four classes.
pub fn random_label_pair(rng: &mut Stream) -> (Vec<usize>, Vec<usize>) {
    let n = 1 + rng.below(50) as usize;
    let a = (0..n).map(|_| rng.below(4) as usize).collect();
    let b = (0..n).map(|_| rng.below(4) as usize).collect();
    (a, b)
}

/// An 8x8 classifier small enough for multi-round federations in tests.
pub fn tiny_spec() -> ModelSpec {
    use fedkappa::nn::Layer;
    ModelSpec::new(
        8,
        vec![
            Layer::Conv { out_channels: 4, kernel: 3, stride: 2 },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense { out_features: 4 },
        ],
        4,
    )
    .unwrap()
}

pub fn tiny_profiles(k: usize) -> Vec<fedkappa::data::SiteProfile> {
    (0..k)
        .map(|i| fedkappa::data::SiteProfile {
            site_id: format!("site{}", i + 1),
            n_train: 48,
            n_val: 16,
            n_test: 16,
            class_prior: [0.25, 0.25, 0.25, 0.25],
            intensity_mean: 0.4 + 0.05 * i as f64,
            intensity_std: 0.15,
            images_per_patient: 2.0,
            resolution: 8,
            seed: 100 + i as u64,
        })
        .collect()
}

pub fn tiny_sites(k: usize) -> Vec<fedkappa::data::SiteDataset> {
    tiny_profiles(k).iter().map(|p| fedkappa::data::generate_site(p).unwrap()).collect()
}

pub fn tiny_config(k: usize, rounds: u32) -> fedkappa::config::FederationConfig {
    let mut c = fedkappa::config::FederationConfig::default();
    c.rounds = rounds;
    c.seed = 11;
    c.roster = (1..=k).map(|i| format!("site{i}")).collect();
    c.model = tiny_spec();
    c.train.batch_size = 8;
    c.train.schedule.base_lr = 1e-2;
    c.train.finetune_epochs = 3;
    c
}

/// Runs the `fedkappa` binary quietly and returns its output.
pub fn fedkappa(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fedkappa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("fedkappa binary runs")
}

/// Like [`fedkappa`] but panics with stderr on failure.
pub fn fedkappa_ok(args: &[&str]) -> std::process::Output {
    let out = fedkappa(args);
    assert!(out.status.success(), "fedkappa {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn write_config(path: &std::path::Path, rounds: u32, seed: u64, k: usize) {
    let roster: Vec<String> = (1..=k).map(|i| format!("\"site{i}\"")).collect();
    let text = format!("rounds = {rounds}\nseed = {seed}\nroster = [{}]\n", roster.join(", "));
    std::fs::write(path, text).unwrap();
}

pub fn path_str(p: &std::path::Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
