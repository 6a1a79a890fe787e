use crate::error::{Error, Result};

/// Agreement weighting between ordinal classes `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `1 - |i - j| / (C - 1)`
    #[default]
    Linear,
    /// `1 - (i - j)^2 / (C - 1)^2`
    Quadratic,
    /// exact agreement only
    Unweighted,
}

impl Weighting {
    /// Integer disagreement between classes; the agreement weight is
    /// `1 - disagreement / max_disagreement`.
    fn disagreement(self, i: usize, j: usize) -> u64 {
        let d = i.abs_diff(j) as u64;
        match self {
            Weighting::Linear => d,
            Weighting::Quadratic => d * d,
            Weighting::Unweighted => u64::from(d != 0),
        }
    }
}

/// Counts with ground truth on rows and predictions on columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() || y_true.is_empty() {
            return Err(Error::InvalidShape(format!(
                "label sequences of length {} and {}",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for l in [t, p] {
                if l >= classes {
                    return Err(Error::InvalidLabel { label: l, classes });
                }
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(p_o - p_e) / (1 - p_e)`, evaluated as `1 - n * sum(d * O) / sum(d * r * c)`
    /// over integer counts so that rational cases come out exact.
    pub fn kappa(&self, weighting: Weighting) -> Result<f64> {
        let c = self.counts.len();
        let n = self.total();
        if n == 0 {
            return Err(Error::InvalidShape("empty confusion matrix".into()));
        }
        let rows: Vec<u128> = self.counts.iter().map(|r| r.iter().map(|&x| x as u128).sum()).collect();
        let cols: Vec<u128> = (0..c).map(|j| self.counts.iter().map(|r| r[j] as u128).sum()).collect();
        let mut observed = 0u128;
        let mut expected = 0u128;
        for i in 0..c {
            for j in 0..c {
                let d = weighting.disagreement(i, j) as u128;
                observed += d * self.counts[i][j] as u128;
                expected += d * rows[i] * cols[j];
            }
        }
        if expected == 0 {
            return Err(Error::DegenerateMarginals);
        }
        let k = 1.0 - (n as u128 * observed) as f64 / expected as f64;
        Ok(k.clamp(-1.0, 1.0))
    }
}

/// Cohen's linear weighted kappa over four ordinal classes.
pub fn weighted_kappa(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    weighted_kappa_with(y_true, y_pred, 4, Weighting::Linear)
}

pub fn weighted_kappa_with(y_true: &[usize], y_pred: &[usize], classes: usize, weighting: Weighting) -> Result<f64> {
    ConfusionMatrix::from_labels(y_true, y_pred, classes)?.kappa(weighting)
}
