use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Class-balanced mini-batches for one epoch.
///
/// Each batch holds `batch_size / present` samples of every present class.
/// The epoch has `ceil(majority / per_class)` batches, so every sample of the
/// largest class is seen once; smaller classes cycle through fresh
/// permutations and therefore repeat.
pub fn balanced_batches(labels: &[usize], batch_size: usize, rng: &mut Stream) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::EmptySplit("no training samples".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let present = by_class.len();
    let per_class = batch_size / present;
    if per_class == 0 {
        return Err(Error::InvalidConfig(format!("batch size {batch_size} below {present} present classes")));
    }
    let majority = by_class.values().map(Vec::len).max().unwrap_or(0);
    let n_batches = majority.div_ceil(per_class);
    let need = n_batches * per_class;
    let streams: Vec<Vec<usize>> = by_class
        .values()
        .map(|members| {
            let mut out = Vec::with_capacity(need);
            while out.len() < need {
                let mut perm = members.clone();
                rng.shuffle(&mut perm);
                out.extend(perm);
            }
            out.truncate(need);
            out
        })
        .collect();
    Ok((0..n_batches)
        .map(|b| {
            streams
                .iter()
                .flat_map(|s| s[b * per_class..(b + 1) * per_class].iter().copied())
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_classes_give_eight_each() {
        let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
        let batches = balanced_batches(&labels, 32, &mut Stream::new(3)).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            for c in 0..4 {
                assert_eq!(b.iter().filter(|&&i| labels[i] == c).count(), 8);
            }
        }
    }

    #[test]
    fn minority_class_repeats() {
        let mut labels = vec![0usize; 40];
        labels.extend([1, 1]);
        let batches = balanced_batches(&labels, 32, &mut Stream::new(4)).unwrap();
        let ones: Vec<usize> = batches.concat().into_iter().filter(|&i| labels[i] == 1).collect();
        assert!(ones.len() > 2);
        assert!(ones.iter().all(|&i| i == 40 || i == 41));
    }

    #[test]
    fn absent_class_balances_over_the_rest() {
        let labels: Vec<usize> = (0..90).map(|i| [0, 2, 3][i % 3]).collect();
        let batches = balanced_batches(&labels, 32, &mut Stream::new(5)).unwrap();
        for b in &batches {
            assert_eq!(b.len(), 30);
            for c in [0, 2, 3] {
                assert_eq!(b.iter().filter(|&&i| labels[i] == c).count(), 10);
            }
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(balanced_batches(&[], 32, &mut Stream::new(0)), Err(Error::EmptySplit(_))));
    }
}
