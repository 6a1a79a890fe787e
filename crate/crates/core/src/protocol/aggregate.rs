use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// A client's contribution to one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub delta: ParamVector,
    /// Local optimizer steps taken; the aggregation weight.
    pub n_k: u64,
}

/// Iteration-weighted average of the client models `global_prev + delta_k`.
///
/// Updates are folded in the given order as a running weighted mean in f64,
/// `m += (n_k / N_k) * (x_k - m)` with `N_k` the cumulative weight. Weights
/// enter only through the ratios `n_k / N_k`, so scaling every `n_k` by the
/// same integer changes nothing, and identical client models reproduce
/// that model exactly.
pub fn aggregate(global_prev: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::NoUpdates);
    }
    for u in updates {
        global_prev.check_compatible(&u.delta)?;
        if u.n_k == 0 {
            return Err(Error::Malformed(format!("client {} reported zero iterations", u.client_id)));
        }
    }
    let mut mean: Vec<f64> = global_prev
        .values
        .iter()
        .zip(&updates[0].delta.values)
        .map(|(&p, &d)| p as f64 + d as f64)
        .collect();
    let mut cumulative = updates[0].n_k as u128;
    for u in &updates[1..] {
        cumulative += u.n_k as u128;
        let w = u.n_k as f64 / cumulative as f64;
        for ((m, &p), &d) in mean.iter_mut().zip(&global_prev.values).zip(&u.delta.values) {
            let x = p as f64 + d as f64;
            *m += w * (x - *m);
        }
    }
    Ok(ParamVector {
        values: mean.into_iter().map(|m| m as f32).collect(),
        spec_hash: global_prev.spec_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f32]) -> ParamVector {
        ParamVector { values: v.to_vec(), spec_hash: [0; 32] }
    }

    fn upd(id: &str, d: &[f32], n: u64) -> ClientUpdate {
        ClientUpdate { client_id: id.into(), delta: pv(d), n_k: n }
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(aggregate(&pv(&[0.5]), &[upd("a", &[0.1], 10)]).unwrap().values, [0.6]);
        let two = aggregate(&pv(&[0.0, 0.0]), &[upd("a", &[0.2, 0.4], 5), upd("b", &[0.4, 0.0], 5)]).unwrap();
        assert_eq!(two.values, [0.3, 0.2]);
        let weighted = aggregate(&pv(&[1.0]), &[upd("a", &[0.4], 1), upd("b", &[0.0], 3)]).unwrap();
        assert_eq!(weighted.values, [1.1]);
    }

    #[test]
    fn errors() {
        assert!(matches!(aggregate(&pv(&[0.0]), &[]), Err(Error::NoUpdates)));
        assert!(matches!(aggregate(&pv(&[0.0]), &[upd("a", &[0.0, 1.0], 1)]), Err(Error::SpecMismatch(_))));
    }
}
