//! Flow-estimation metrics and the stay-in-place baseline.

use serde::{Deserialize, Serialize};

use crate::dense::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};

/// Per-state neighbor sets restricting which transitions are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborStructure {
    neighbors: Vec<Vec<usize>>,
    convention: String,
}

impl NeighborStructure {
    /// Moore neighborhood plus the cell itself on a `width x width` grid.
    pub fn moore(width: usize) -> Self {
        let w = width as i64;
        let neighbors = (0..w * w)
            .map(|s| {
                let (r, c) = (s / w, s % w);
                let mut list = Vec::with_capacity(9);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < w && cc < w {
                            list.push((rr * w + cc) as usize);
                        }
                    }
                }
                list
            })
            .collect();
        NeighborStructure {
            neighbors,
            convention: "moore+self (8-connected grid cells including the cell itself)".into(),
        }
    }

    /// Every state neighbors every other state.
    pub fn complete(states: usize) -> Self {
        NeighborStructure {
            neighbors: vec![(0..states).collect(); states],
            convention: "all pairs".into(),
        }
    }

    /// Custom lists; each must contain its own state and membership must be symmetric.
    pub fn from_lists(mut neighbors: Vec<Vec<usize>>, convention: impl Into<String>) -> Result<Self> {
        let n = neighbors.len();
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        for (i, list) in neighbors.iter().enumerate() {
            if list.binary_search(&i).is_err() {
                return Err(Error::InvalidInput(format!("state {i} is missing from its own neighbor set")));
            }
            for &j in list {
                if j >= n || neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidInput(format!("neighbor relation not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(NeighborStructure {
            neighbors,
            convention: convention.into(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, state: usize) -> &[usize] {
        &self.neighbors[state]
    }

    pub fn convention(&self) -> &str {
        &self.convention
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmaeReport {
    pub nmae: f64,
    pub per_step: Vec<f64>,
    pub neighborhood: String,
}

/// NMAE with per-step breakdown. Each estimated step is rescaled to the
/// truth's total mass for that step before comparison.
pub fn nmae_report(estimate: &[DenseMatrix], truth: &[DenseMatrix], nbrs: &NeighborStructure) -> Result<NmaeReport> {
    if estimate.len() != truth.len() {
        return Err(Error::shape(
            format!("{} steps", truth.len()),
            format!("{} estimated steps", estimate.len()),
        ));
    }
    let s = nbrs.num_states();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_step = Vec::with_capacity(truth.len());
    for (t, (est, tru)) in estimate.iter().zip(truth).enumerate() {
        if est.shape() != (s, s) || tru.shape() != (s, s) {
            return Err(Error::shape(
                format!("{s}x{s} flows"),
                format!("estimate {:?}, truth {:?} at step {t}", est.shape(), tru.shape()),
            ));
        }
        let est_total = est.sum();
        let scale = if est_total > 0.0 { tru.sum() / est_total } else { 0.0 };
        let (mut n_t, mut d_t) = (0.0, 0.0);
        for i in 0..s {
            for &j in nbrs.neighbors(i) {
                n_t += (scale * est.get(i, j) - tru.get(i, j)).abs();
                d_t += tru.get(i, j);
            }
        }
        per_step.push(if d_t > 0.0 { n_t / d_t } else { f64::NAN });
        num += n_t;
        den += d_t;
    }
    if !(den > 0.0) {
        return Err(Error::Domain("truth has no neighbor-restricted mass".into()));
    }
    Ok(NmaeReport {
        nmae: num / den,
        per_step,
        neighborhood: nbrs.convention().to_string(),
    })
}

/// `Σ_t Σ_i Σ_{j∈N_i} |M̂_ij − M̄_ij| / Σ_t Σ_i Σ_{j∈N_i} M̄_ij`.
pub fn nmae(estimate: &[DenseMatrix], truth: &[DenseMatrix], nbrs: &NeighborStructure) -> Result<f64> {
    nmae_report(estimate, truth, nbrs).map(|r| r.nmae)
}

/// Everyone stays put: `M_t = diag(μ_t)` for each interval.
pub fn stay_baseline(marginals: &[DenseVector]) -> Vec<DenseMatrix> {
    marginals
        .iter()
        .take(marginals.len().saturating_sub(1))
        .map(|m| {
            let n = m.len();
            DenseMatrix::from_fn(n, n, |i, j| if i == j { m[i] } else { 0.0 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stay_example() {
        let m = vec![DenseVector::new(vec![0.3, 0.7]).unwrap(); 2];
        let stay = stay_baseline(&m);
        assert_eq!(stay.len(), 1);
        assert_eq!(stay[0].to_rows(), vec![vec![0.3, 0.0], vec![0.0, 0.7]]);
    }

    #[test]
    fn hand_computed_two_state_case() {
        let truth = vec![DenseMatrix::from_rows(vec![vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap()];
        let stay = stay_baseline(&[
            DenseVector::new(vec![3.0, 1.0]).unwrap(),
            DenseVector::new(vec![2.0, 2.0]).unwrap(),
        ]);
        let nbrs = NeighborStructure::complete(2);
        assert!((nmae(&stay, &truth, &nbrs).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(nmae(&truth, &truth, &nbrs).unwrap(), 0.0);
        assert_eq!(nmae(&[DenseMatrix::zeros(2, 2)], &truth, &nbrs).unwrap(), 1.0);
    }

    #[test]
    fn moore_neighborhood_sizes() {
        let n = NeighborStructure::moore(3);
        assert_eq!(n.neighbors(0), &[0, 1, 3, 4]);
        assert_eq!(n.neighbors(4).len(), 9);
        assert!(NeighborStructure::from_lists(vec![vec![0, 1], vec![1]], "x").is_err());
    }

    #[test]
    fn zero_denominator_rejected() {
        let z = vec![DenseMatrix::zeros(2, 2)];
        assert!(nmae(&z, &z, &NeighborStructure::complete(2)).is_err());
    }
}
