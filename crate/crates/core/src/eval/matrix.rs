use serde::{Deserialize, Serialize};

use crate::data::{SiteDataset, Split};
use crate::error::{Error, Result};
use crate::eval::kappa::weighted_kappa;
use crate::nn::{predict_proba, ModelSpec, ParamVector, Tensor};
use crate::par::Parallelism;

/// Mean of the probability vectors, then argmax; ties go to the lower class.
pub fn patient_prediction(probs: &[Vec<f64>]) -> usize {
    let c = probs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0f64; c];
    for p in probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let mut best = 0;
    for k in 1..c {
        if mean[k] > mean[best] {
            best = k;
        }
    }
    best
}

/// One patient's ground truth and averaged prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatientPrediction {
    pub patient_id: u32,
    pub truth: usize,
    pub predicted: usize,
}

/// Patient-level predictions for every patient in `split`, by ascending id.
pub fn patient_level_predict(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    site: &SiteDataset,
    split: Split,
) -> Result<Vec<PatientPrediction>> {
    let idx = site.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(format!("{} {}", site.site_id, split.name())));
    }
    let batch = Tensor::stack(&idx.iter().map(|&i| site.images[i].clone()).collect::<Vec<_>>())?;
    let probs = predict_proba(par, spec, params, &batch)?;
    let mut pos = vec![usize::MAX; site.len()];
    for (k, &i) in idx.iter().enumerate() {
        pos[i] = k;
    }
    Ok(site
        .patients(split)
        .into_iter()
        .map(|(pid, images)| {
            let ps: Vec<Vec<f64>> = images.iter().map(|&i| probs[pos[i]].clone()).collect();
            PatientPrediction {
                patient_id: pid,
                truth: site.labels[images[0]] as usize,
                predicted: patient_prediction(&ps),
            }
        })
        .collect())
}

/// Linear weighted kappa of patient-level predictions on one split.
pub fn site_kappa(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    site: &SiteDataset,
    split: Split,
) -> Result<f64> {
    let preds = patient_level_predict(par, spec, params, site, split)?;
    let truth: Vec<usize> = preds.iter().map(|p| p.truth).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    weighted_kappa(&truth, &pred)
}

/// Kappa for model `i` (row) evaluated on site `j`'s test split (column).
/// `None` marks a cell whose kappa is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaMatrix {
    pub site_ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub global_row: Option<Vec<Option<f64>>>,
}

impl KappaMatrix {
    pub fn from_values(site_ids: Vec<String>, values: Vec<Vec<f64>>) -> Self {
        KappaMatrix {
            site_ids,
            values: values.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
            global_row: None,
        }
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.k()).map(|i| self.values[i][i]).collect()
    }

    fn check(&self) -> Result<()> {
        let k = self.k();
        if self.site_ids.len() != k || self.values.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidShape(format!("kappa matrix is not {k}x{k}")));
        }
        if let Some(g) = &self.global_row {
            if g.len() != k {
                return Err(Error::InvalidShape("global row length".into()));
            }
        }
        Ok(())
    }
}

fn kappa_cell(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateMarginals) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates every model on every site's test split. Cells are computed in
/// parallel and written to their own slot.
pub fn cross_site_matrix(
    par: Parallelism,
    spec: &ModelSpec,
    models: &[ParamVector],
    sites: &[SiteDataset],
    global: Option<&ParamVector>,
) -> Result<KappaMatrix> {
    let k = sites.len();
    if models.len() != k {
        return Err(Error::InvalidShape(format!("{} models for {k} sites", models.len())));
    }
    let cells = par.try_map_range(k * k, |cell| {
        let (i, j) = (cell / k, cell % k);
        kappa_cell(site_kappa(Parallelism::Sequential, spec, &models[i], &sites[j], Split::Test))
    })?;
    let values = cells.chunks(k).map(|r| r.to_vec()).collect();
    let global_row = match global {
        Some(g) => Some(par.try_map_range(k, |j| {
            kappa_cell(site_kappa(Parallelism::Sequential, spec, g, &sites[j], Split::Test))
        })?),
        None => None,
    };
    Ok(KappaMatrix {
        site_ids: sites.iter().map(|s| s.site_id.clone()).collect(),
        values,
        global_row,
    })
}

/// Diagonal and off-diagonal means, optionally relative to a baseline.
/// Undefined cells are left out of the means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    pub rel_improvement_diag: Option<f64>,
    pub rel_improvement_offdiag: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn summarize(matrix: &KappaMatrix, baseline: Option<&KappaMatrix>) -> Result<SummaryStats> {
    matrix.check()?;
    let k = matrix.k();
    let diag = |m: &KappaMatrix| mean((0..k).map(|i| m.values[i][i]));
    let off = |m: &KappaMatrix| mean((0..k * k).filter(|c| c / k != c % k).map(|c| m.values[c / k][c % k]));
    let diag_mean = diag(matrix);
    let offdiag_mean = off(matrix);
    let (rel_d, rel_o) = match baseline {
        Some(b) => {
            b.check()?;
            if b.k() != k {
                return Err(Error::InvalidShape(format!("baseline is {}x{0}, matrix {k}x{k}", b.k())));
            }
            let bd = diag(b);
            let bo = off(b);
            (Some((diag_mean - bd) / bd), Some((offdiag_mean - bo) / bo))
        }
        None => (None, None),
    };
    Ok(SummaryStats {
        diag_mean,
        offdiag_mean,
        rel_improvement_diag: rel_d,
        rel_improvement_offdiag: rel_o,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging_examples() {
        assert_eq!(patient_prediction(&[vec![0.6, 0.4, 0.0, 0.0], vec![0.2, 0.8, 0.0, 0.0]]), 1);
        assert_eq!(patient_prediction(&[vec![0.1, 0.2, 0.6, 0.1]]), 2);
        assert_eq!(patient_prediction(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]), 0);
    }

    #[test]
    fn summary_means_and_shape_errors() {
        let m = KappaMatrix::from_values(vec!["a".into(), "b".into()], vec![vec![0.8, 0.2], vec![0.4, 0.6]]);
        let s = summarize(&m, None).unwrap();
        assert!((s.diag_mean - 0.7).abs() < 1e-15);
        assert!((s.offdiag_mean - 0.3).abs() < 1e-15);
        let b = KappaMatrix::from_values(vec!["a".into()], vec![vec![0.5]]);
        assert!(matches!(summarize(&m, Some(&b)), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn undefined_cells_are_skipped() {
        let mut m = KappaMatrix::from_values(vec!["a".into(), "b".into()], vec![vec![0.8, 0.2], vec![0.4, 0.6]]);
        m.values[0][1] = None;
        let s = summarize(&m, None).unwrap();
        assert!((s.offdiag_mean - 0.4).abs() < 1e-15);
    }
}
