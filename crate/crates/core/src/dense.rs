//! Dense numerical primitives shared by every solver.
//!
//! Masses are plain `f64`s. [`DenseVector`] enforces nonnegativity (it holds
//! marginals, observations and scalings); [`DenseMatrix`] only requires
//! finite entries since it also holds costs, which may be negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonnegative, finite vector of masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Domain(format!(
                "vector entry {i} = {v} is not a finite nonnegative mass"
            )));
        }
        Ok(DenseVector(values))
    }

    pub fn uniform(len: usize) -> Self {
        DenseVector(vec![1.0 / len as f64; len])
    }

    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Rescales to unit total mass. Fails on a zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let total = self.sum();
        if total <= 0.0 {
            return Err(Error::Domain("cannot normalize a vector with zero mass".into()));
        }
        Ok(DenseVector(self.0.iter().map(|v| v / total).collect()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        DenseVector::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        DenseVector::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "matrix entry ({}, {}) is not finite",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds a matrix from `f(i, j)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite matrix entry at ({i}, {j})");
                data.push(v);
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != m) {
            return Err(Error::shape(
                format!("{m} columns"),
                format!("row {bad} with {} columns", rows[bad].len()),
            ));
        }
        DenseMatrix::new(n, m, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Element-wise map; the caller guarantees finite output.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `selfᵀ * x`.
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += xi * a;
            }
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &DenseMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l1_diff(&self, other: &DenseMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }


    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }
}

impl Serialize for DenseMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        DenseMatrix::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Entropy-regularization weight ε > 0.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Epsilon(value))
        } else {
            Err(Error::InvalidInput(format!("epsilon must be positive, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Epsilon::new(v)
    }
}

impl From<Epsilon> for f64 {
    fn from(e: Epsilon) -> f64 {
        e.0
    }
}

/// Anything that can be viewed as a shaped array of entries.
pub trait Entries {
    fn shape(&self) -> (usize, usize);
    fn entries(&self) -> &[f64];
}

impl Entries for DenseVector {
    fn shape(&self) -> (usize, usize) {
        (self.len(), 1)
    }
    fn entries(&self) -> &[f64] {
        &self.0
    }
}

impl Entries for DenseMatrix {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    fn entries(&self) -> &[f64] {
        &self.data
    }
}

impl Entries for [f64] {
    fn shape(&self) -> (usize, usize) {
        (self.len(), 1)
    }
    fn entries(&self) -> &[f64] {
        self
    }
}

impl Entries for Vec<f64> {
    fn shape(&self) -> (usize, usize) {
        (self.len(), 1)
    }
    fn entries(&self) -> &[f64] {
        self
    }
}

/// `p ln p` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Generalized KL divergence `H(p | q) = Σ pᵢ ln(pᵢ/qᵢ) − pᵢ + qᵢ`.
pub fn kl_divergence<P: Entries + ?Sized, Q: Entries + ?Sized>(p: &P, q: &Q) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", q.shape())));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.entries().iter().zip(q.entries()).enumerate() {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::Domain(format!("negative entry at {i}")));
        }
        if pi == 0.0 {
            total += qi;
        } else if qi == 0.0 {
            return Err(Error::Domain(format!(
                "q vanishes at entry {i} where p = {pi} > 0"
            )));
        } else {
            total += pi * (pi / qi).ln() - pi + qi;
        }
    }
    Ok(total)
}

/// Negative entropy `H(p) = H(p | 1) = Σ pᵢ ln pᵢ − pᵢ + 1`.
pub fn neg_entropy<P: Entries + ?Sized>(p: &P) -> f64 {
    p.entries().iter().map(|&v| xlogx(v) - v + 1.0).sum()
}

/// Gibbs kernel `K = exp(−C/ε)`.
pub fn gibbs_kernel(cost: &DenseMatrix, eps: Epsilon) -> DenseMatrix {
    let inv = 1.0 / eps.value();
    cost.map(|c| (-c * inv).exp())
}

/// `−C/ε`, the log of the Gibbs kernel, without exponentiating.
pub fn log_gibbs_kernel(cost: &DenseMatrix, eps: Epsilon) -> DenseMatrix {
    let inv = 1.0 / eps.value();
    cost.map(|c| -c * inv)
}

/// Stable `log Σ exp(xᵢ)`; `−∞` for an empty or all-`−∞` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `out[i] = log Σⱼ exp(logK[i, j] + logv[j])`.
///
/// `logK` is a raw log-kernel and may hold `−∞` entries (masked transitions),
/// so it is passed as rows of a plain slice rather than a [`DenseMatrix`].
pub fn logsumexp_matvec_into(log_k: &[f64], cols: usize, log_v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(log_v.len(), cols);
    debug_assert_eq!(log_k.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(log_k.chunks_exact(cols)) {
        let mut m = f64::NEG_INFINITY;
        for (a, b) in row.iter().zip(log_v) {
            m = m.max(a + b);
        }
        if m == f64::NEG_INFINITY {
            *o = m;
            continue;
        }
        let s: f64 = row.iter().zip(log_v).map(|(a, b)| (a + b - m).exp()).sum();
        *o = m + s.ln();
    }
}

/// Transposed variant: `out[j] = log Σᵢ exp(logK[i, j] + logv[i])`.
pub fn logsumexp_matvec_t_into(log_k: &[f64], cols: usize, log_v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), cols);
    debug_assert_eq!(log_k.len(), log_v.len() * cols);
    let mut m = vec![f64::NEG_INFINITY; cols];
    for (row, &lv) in log_k.chunks_exact(cols).zip(log_v) {
        for (mj, a) in m.iter_mut().zip(row) {
            *mj = mj.max(a + lv);
        }
    }
    let mut s = vec![0.0; cols];
    for (row, &lv) in log_k.chunks_exact(cols).zip(log_v) {
        if lv == f64::NEG_INFINITY {
            continue;
        }
        for ((sj, a), &mj) in s.iter_mut().zip(row).zip(&m) {
            if mj != f64::NEG_INFINITY {
                *sj += (a + lv - mj).exp();
            }
        }
    }
    for ((o, sj), mj) in out.iter_mut().zip(s).zip(m) {
        *o = if mj == f64::NEG_INFINITY { mj } else { mj + sj.ln() };
    }
}

/// Log-domain matrix-vector product over a `rows x cols` log-kernel.
pub fn logsumexp_matvec(log_k: &[f64], rows: usize, cols: usize, log_v: &[f64]) -> Result<Vec<f64>> {
    if log_k.len() != rows * cols || log_v.len() != cols {
        return Err(Error::shape(
            format!("{rows}x{cols} kernel with length-{cols} vector"),
            format!("{} kernel entries, length-{} vector", log_k.len(), log_v.len()),
        ));
    }
    let mut out = vec![0.0; rows];
    logsumexp_matvec_into(log_k, cols, log_v, &mut out);
    Ok(out)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn normalize_in_place(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    s
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
