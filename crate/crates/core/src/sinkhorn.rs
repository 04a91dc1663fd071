//! Two-marginal Sinkhorn scaling, the inner solver of the cost-learning loops.

use crate::dense::{l1_distance, DenseMatrix};
use crate::error::{Error, Result};

/// Scaling vectors `u`, `v` with plan `diag(u) K diag(v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scalings {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Scalings {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Scalings {
            u: vec![1.0; rows],
            v: vec![1.0; cols],
        }
    }

    pub fn plan(&self, kernel: &DenseMatrix) -> DenseMatrix {
        let cols = kernel.cols();
        let data = kernel
            .as_slice()
            .chunks_exact(cols)
            .zip(&self.u)
            .flat_map(|(row, &ui)| row.iter().zip(&self.v).map(move |(k, vj)| ui * k * vj))
            .collect();
        DenseMatrix::from_raw(kernel.rows(), cols, data)
    }

    /// Dual potentials `ε ln u`, `ε ln v` (`−∞` where a scaling vanishes).
    pub fn duals(&self, eps: f64) -> (Vec<f64>, Vec<f64>) {
        (
            self.u.iter().map(|x| eps * x.ln()).collect(),
            self.v.iter().map(|x| eps * x.ln()).collect(),
        )
    }
}

/// Column scalings read off a plan assumed to have the form `diag(u) K diag(v)`,
/// using its heaviest row. A good warm start when the plan came from `K`.
pub fn scalings_from_plan(kernel: &DenseMatrix, plan: &DenseMatrix) -> Scalings {
    let rows = plan.row_sums();
    let r = (0..rows.len()).fold(0, |best, i| if rows[i] > rows[best] { i } else { best });
    let v = plan
        .row(r)
        .iter()
        .zip(kernel.row(r))
        .map(|(p, k)| {
            let x = p / k;
            if x.is_finite() {
                x
            } else {
                1.0
            }
        })
        .collect();
    Scalings {
        u: vec![1.0; kernel.rows()],
        v,
    }
}

fn ratio(mass: f64, denom: f64) -> f64 {
    if mass == 0.0 {
        0.0
    } else {
        mass / denom
    }
}

/// One pass: `u ← μ / (K v)`, then `v ← ν / (Kᵀ u)`. Returns the ℓ1 gap of the
/// row marginal measured before the pass (the column marginal is exact after it).
pub fn sinkhorn_pass(kernel: &DenseMatrix, mu: &[f64], nu: &[f64], s: &mut Scalings) -> f64 {
    let mut kv = vec![0.0; kernel.rows()];
    kernel.matvec(&s.v, &mut kv);
    let row_gap: f64 = s.u.iter().zip(&kv).zip(mu).map(|((u, k), m)| (u * k - m).abs()).sum();
    for ((u, k), &m) in s.u.iter_mut().zip(&kv).zip(mu) {
        *u = ratio(m, *k);
    }
    let mut ktu = vec![0.0; kernel.cols()];
    kernel.matvec_t(&s.u, &mut ktu);
    for ((v, k), &n) in s.v.iter_mut().zip(&ktu).zip(nu) {
        *v = ratio(n, *k);
    }
    row_gap
}

/// Row-marginal ℓ1 gap of the current plan; its column marginal is exact
/// after a [`sinkhorn_pass`].
pub fn marginal_gap(kernel: &DenseMatrix, mu: &[f64], s: &Scalings) -> f64 {
    let mut kv = vec![0.0; kernel.rows()];
    kernel.matvec(&s.v, &mut kv);
    let row: Vec<f64> = s.u.iter().zip(&kv).map(|(u, k)| u * k).collect();
    l1_distance(&row, mu)
}

/// Runs passes until the row-marginal gap is at most `tol`.
pub fn sinkhorn(
    kernel: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    tol: f64,
    max_iters: usize,
    warm: Option<Scalings>,
) -> Result<(Scalings, usize)> {
    let (rows, cols) = kernel.shape();
    if mu.len() != rows || nu.len() != cols {
        return Err(Error::shape(
            format!("marginals of length {rows} and {cols}"),
            format!("{} and {}", mu.len(), nu.len()),
        ));
    }
    let mut s = match warm {
        Some(w) if w.u.len() == rows && w.v.len() == cols && w.v.iter().all(|x| x.is_finite()) => w,
        _ => Scalings::ones(rows, cols),
    };
    // A vanishing warm scaling would pin the plan to zero where it must not be.
    for (v, &n) in s.v.iter_mut().zip(nu) {
        if n > 0.0 && *v == 0.0 {
            *v = 1.0;
        }
    }
    let mut gap = f64::INFINITY;
    for iter in 1..=max_iters {
        sinkhorn_pass(kernel, mu, nu, &mut s);
        gap = marginal_gap(kernel, mu, &s);
        if !gap.is_finite() || s.u.iter().chain(&s.v).any(|x| !x.is_finite()) {
            return Err(Error::Underflow { edge: 0, value: 0.0 });
        }
        if gap <= tol {
            return Ok((s, iter));
        }
    }
    Err(Error::NotConverged {
        solver: "Sinkhorn",
        iterations: max_iters,
        residual: gap,
    })
}
