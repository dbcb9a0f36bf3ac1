use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFn;

/// Observation times, the rows `h_j` of `H`, the covariance `R` and the data.
///
/// `(H y)_j = <h_j, y>` and `H* z = sum_j z_j h_j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ObservationSetRaw", into = "ObservationSetRaw")]
pub struct ObservationSet {
    times: Vec<f64>,
    rows: Vec<GridFn>,
    r_cov: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    data: Vec<Vec<f64>>,
    data_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSetRaw {
    pub times: Vec<f64>,
    pub rows: Vec<GridFn>,
    pub r_cov: Vec<Vec<f64>>,
    pub data: Vec<Vec<f64>>,
    pub data_bound: Option<f64>,
}

impl TryFrom<ObservationSetRaw> for ObservationSet {
    type Error = Error;
    fn try_from(raw: ObservationSetRaw) -> Result<Self> {
        ObservationSet::new(raw.times, raw.rows, raw.r_cov, raw.data, raw.data_bound)
    }
}

impl From<ObservationSet> for ObservationSetRaw {
    fn from(o: ObservationSet) -> Self {
        let q = o.r_cov.nrows();
        ObservationSetRaw {
            r_cov: (0..q)
                .map(|i| (0..q).map(|j| o.r_cov[(i, j)]).collect())
                .collect(),
            times: o.times,
            rows: o.rows,
            data: o.data,
            data_bound: Some(o.data_bound),
        }
    }
}

fn euclid(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl ObservationSet {
    /// Validates and assembles an observation set. When `data_bound` is `None`
    /// the bound is taken as the largest `|z_i|`.
    pub fn new(
        times: Vec<f64>,
        rows: Vec<GridFn>,
        r_cov: Vec<Vec<f64>>,
        data: Vec<Vec<f64>>,
        data_bound: Option<f64>,
    ) -> Result<Self> {
        let q = rows.len();
        if q == 0 {
            return Err(Error::InvalidObservations("H needs at least one row".into()));
        }
        if rows.iter().any(|h| !h.same_grid(&rows[0]) || !h.is_finite()) {
            return Err(Error::InvalidObservations(
                "rows must be finite and share one grid".into(),
            ));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidObservations(
                "observation times must be finite and positive".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidObservations(
                "observation times must be strictly increasing".into(),
            ));
        }
        if data.len() != times.len() {
            return Err(Error::InvalidObservations(format!(
                "{} data vectors for {} times",
                data.len(),
                times.len()
            )));
        }
        if data.iter().any(|z| z.len() != q || z.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidObservations(format!(
                "every datum must be a finite vector of length q = {q}"
            )));
        }
        if r_cov.len() != q || r_cov.iter().any(|row| row.len() != q) {
            return Err(Error::InvalidObservations(format!("R must be {q}x{q}")));
        }
        let r = DMatrix::from_fn(q, q, |i, j| r_cov[i][j]);
        let asym = (&r - r.transpose()).abs().max();
        if asym > 1e-12 * r.abs().max().max(1.0) {
            return Err(Error::InvalidObservations("R is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(r.clone());
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidObservations(format!(
                "R is not positive definite (smallest eigenvalue {min_eig:e})"
            )));
        }
        let r_inv = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidObservations("R Cholesky failed".into()))?
            .inverse();
        let max_norm = data.iter().map(|z| euclid(z)).fold(0.0, f64::max);
        let data_bound = match data_bound {
            Some(d) => {
                if !(d >= 0.0) || max_norm > d * (1.0 + 1e-12) {
                    return Err(Error::InvalidObservations(format!(
                        "data bound D = {d} is smaller than max |z_i| = {max_norm}"
                    )));
                }
                d
            }
            None => max_norm,
        };
        Ok(ObservationSet {
            times,
            rows,
            r_cov: r,
            r_inv,
            data,
            data_bound,
        })
    }

    /// Scalar covariance `R = r I`.
    pub fn with_scalar_covariance(
        times: Vec<f64>,
        rows: Vec<GridFn>,
        r: f64,
        data: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let q = rows.len();
        let cov = (0..q)
            .map(|i| (0..q).map(|j| if i == j { r } else { 0.0 }).collect())
            .collect();
        ObservationSet::new(times, rows, cov, data, None)
    }

    /// No observation times at all; `J` reduces to the prior term.
    pub fn empty(m: usize) -> Self {
        ObservationSet::new(
            Vec::new(),
            vec![GridFn::sine_mode(m, 1)],
            vec![vec![1.0]],
            Vec::new(),
            Some(0.0),
        )
        .expect("empty observation set is valid")
    }

    /// Same operator and times, new data (bound recomputed).
    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        let q = self.q();
        ObservationSet::new(
            self.times.clone(),
            self.rows.clone(),
            (0..q)
                .map(|i| (0..q).map(|j| self.r_cov[(i, j)]).collect())
                .collect(),
            data,
            None,
        )
    }

    pub fn with_data_bound(mut self, d: f64) -> Result<Self> {
        let max_norm = self.data.iter().map(|z| euclid(z)).fold(0.0, f64::max);
        if !(d >= 0.0) || max_norm > d * (1.0 + 1e-12) {
            return Err(Error::InvalidObservations(format!(
                "data bound D = {d} is smaller than max |z_i| = {max_norm}"
            )));
        }
        self.data_bound = d;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn rows(&self) -> &[GridFn] {
        &self.rows
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn data_bound(&self) -> f64 {
        self.data_bound
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn q(&self) -> usize {
        self.rows.len()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.r_cov
    }

    pub fn covariance_inverse(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    pub fn observe(&self, y: &GridFn) -> Vec<f64> {
        self.rows.iter().map(|h| h.dot(y)).collect()
    }

    /// `H y - z_i`.
    pub fn residual(&self, y: &GridFn, i: usize) -> Vec<f64> {
        self.observe(y)
            .iter()
            .zip(&self.data[i])
            .map(|(a, b)| a - b)
            .collect()
    }

    /// `|R^{-1/2} e|^2 = e^T R^{-1} e`.
    pub fn weighted_sq(&self, e: &[f64]) -> f64 {
        let v = DVector::from_column_slice(e);
        v.dot(&(&self.r_inv * &v))
    }

    /// `<R^{-1} a, b>` in `R^q`.
    pub fn weighted_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let va = DVector::from_column_slice(a);
        let vb = DVector::from_column_slice(b);
        vb.dot(&(&self.r_inv * &va))
    }

    pub fn adjoint_apply(&self, z: &[f64]) -> GridFn {
        let mut out = GridFn::zeros(self.rows[0].interior_len());
        for (h, zj) in self.rows.iter().zip(z) {
            out.add_scaled(*zj, h);
        }
        out
    }

    /// Adjoint jump `H* R^{-1} (H y - z_i)` at observation `i`.
    pub fn jump(&self, y: &GridFn, i: usize) -> GridFn {
        let e = DVector::from_vec(self.residual(y, i));
        let w = &self.r_inv * e;
        self.adjoint_apply(w.as_slice())
    }

    /// Gram matrix `G_jk = <h_j, h_k>`.
    pub fn gram(&self) -> DMatrix<f64> {
        let q = self.q();
        DMatrix::from_fn(q, q, |i, j| self.rows[i].dot(&self.rows[j]))
    }

    /// `||H||` as an operator from discrete `L^2` to `R^q`.
    pub fn h_op_norm(&self) -> f64 {
        SymmetricEigen::new(self.gram())
            .eigenvalues
            .max()
            .max(0.0)
            .sqrt()
    }

    /// `||H* R^{-1}||` as an operator from `R^q` to discrete `L^2`.
    pub fn h_adjoint_rinv_op_norm(&self) -> f64 {
        let m = &self.r_inv * self.gram() * &self.r_inv;
        let sym = (&m + m.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.max().max(0.0).sqrt()
    }
}
