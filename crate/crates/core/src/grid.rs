//! Nodal functions on the uniform grid `x_j = j/(M+1)` with homogeneous
//! Dirichlet endpoints, plus the discrete norms and the Dirichlet Laplacian.
//!
//! Inner products use the trapezoid rule, which reduces to `dx * sum` because
//! the endpoint values vanish. The `V` norm is `||u_x||` with forward
//! differences, so `<u, w>_V = <-Lap u, w>` holds exactly by summation by parts.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFn {
    values: Vec<f64>,
}

impl GridFn {
    /// The zero function with `m` interior nodes.
    pub fn zeros(m: usize) -> Self {
        GridFn {
            values: vec![0.0; m + 2],
        }
    }

    /// Wraps nodal values including both endpoints.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least one interior node, got {} values",
                values.len()
            )));
        }
        let last = values.len() - 1;
        if values[0] != 0.0 || values[last] != 0.0 {
            return Err(Error::InvalidGrid("endpoint values must vanish".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite value".into()));
        }
        Ok(GridFn { values })
    }

    /// Builds from interior values; endpoints are set to zero.
    pub fn from_interior(interior: &[f64]) -> Self {
        let mut values = Vec::with_capacity(interior.len() + 2);
        values.push(0.0);
        values.extend_from_slice(interior);
        values.push(0.0);
        GridFn { values }
    }

    /// Samples `g` at the interior nodes.
    pub fn from_fn(m: usize, g: impl Fn(f64) -> f64) -> Self {
        let dx = 1.0 / (m + 1) as f64;
        let mut out = GridFn::zeros(m);
        for j in 1..=m {
            out.values[j] = g(j as f64 * dx);
        }
        out
    }

    /// `sin(n pi x)` on the grid.
    pub fn sine_mode(m: usize, n: usize) -> Self {
        GridFn::from_fn(m, |x| (n as f64 * PI * x).sin())
    }

    pub fn interior_len(&self) -> usize {
        self.values.len() - 2
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interior(&self) -> &[f64] {
        let n = self.values.len();
        &self.values[1..n - 1]
    }

    pub(crate) fn interior_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        &mut self.values[1..n - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &GridFn) -> bool {
        self.values.len() == other.values.len()
    }

    fn check_same(&self, other: &GridFn) {
        assert!(
            self.same_grid(other),
            "grid size mismatch: {} vs {}",
            self.values.len(),
            other.values.len()
        );
    }

    pub fn dot(&self, other: &GridFn) -> f64 {
        self.check_same(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.dx()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot_v(&self, other: &GridFn) -> f64 {
        self.check_same(other);
        let dx = self.dx();
        self.values
            .windows(2)
            .zip(other.values.windows(2))
            .map(|(a, b)| (a[1] - a[0]) * (b[1] - b[0]))
            .sum::<f64>()
            / dx
    }

    pub fn norm_v(&self) -> f64 {
        self.dot_v(self).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `||u||_{L^4}^2 = ||u^2||`.
    pub fn l4_sq(&self) -> f64 {
        let dx = self.dx();
        (self.values.iter().map(|v| v.powi(4)).sum::<f64>() * dx).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn scale(&self, s: f64) -> GridFn {
        GridFn {
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &GridFn) -> GridFn {
        self.check_same(other);
        GridFn {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &GridFn) {
        self.check_same(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &GridFn) -> GridFn {
        self.check_same(other);
        GridFn {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Centered difference `(u_{j+1} - u_{j-1}) / 2dx`, zero at the endpoints.
    pub fn centered_derivative(&self) -> GridFn {
        let n = self.values.len();
        let inv = 1.0 / (2.0 * self.dx());
        let mut out = vec![0.0; n];
        for j in 1..n - 1 {
            out[j] = (self.values[j + 1] - self.values[j - 1]) * inv;
        }
        GridFn { values: out }
    }

    /// Discrete Dirichlet Laplacian `(u_{j+1} - 2u_j + u_{j-1}) / dx^2`.
    pub fn laplacian(&self) -> GridFn {
        let n = self.values.len();
        let inv = 1.0 / (self.dx() * self.dx());
        let mut out = vec![0.0; n];
        for j in 1..n - 1 {
            out[j] = (self.values[j + 1] - 2.0 * self.values[j] + self.values[j - 1]) * inv;
        }
        GridFn { values: out }
    }

    /// Solves `Lap w = self` with homogeneous Dirichlet data.
    pub fn inverse_laplacian(&self) -> GridFn {
        let m = self.interior_len();
        let inv = 1.0 / (self.dx() * self.dx());
        let tri = Tridiagonal::constant(m, inv, -2.0 * inv, inv);
        let mut out = GridFn::zeros(m);
        tri.solve_into(self.interior(), out.interior_mut());
        out
    }
}

impl Add for &GridFn {
    type Output = GridFn;
    fn add(self, rhs: &GridFn) -> GridFn {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &GridFn {
    type Output = GridFn;
    fn sub(self, rhs: &GridFn) -> GridFn {
        self.axpy(-1.0, rhs)
    }
}

impl Mul<f64> for &GridFn {
    type Output = GridFn;
    fn mul(self, rhs: f64) -> GridFn {
        self.scale(rhs)
    }
}

/// Constant-coefficient tridiagonal matrix, solved with the Thomas algorithm.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    n: usize,
    lower: f64,
    upper: f64,
    // Forward-elimination multipliers and pivots, precomputed once.
    c_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl Tridiagonal {
    pub fn constant(n: usize, lower: f64, diag: f64, upper: f64) -> Self {
        let mut c_prime = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            let pivot = diag - lower * prev;
            assert!(pivot.abs() > 1e-300, "zero pivot at row {i}");
            inv_pivot[i] = 1.0 / pivot;
            c_prime[i] = upper * inv_pivot[i];
            prev = c_prime[i];
        }
        Tridiagonal {
            n,
            lower,
            upper,
            c_prime,
            inv_pivot,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn solve_into(&self, rhs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(rhs.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        let n = self.n;
        if n == 0 {
            return;
        }
        let mut prev = 0.0;
        for i in 0..n {
            let d = (rhs[i] - self.lower * prev) * self.inv_pivot[i];
            out[i] = d;
            prev = d;
        }
        for i in (0..n - 1).rev() {
            out[i] -= self.c_prime[i] * out[i + 1];
        }
    }

    /// `out = T x`.
    pub fn apply_into(&self, diag: f64, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = diag * x[i];
            if i > 0 {
                s += self.lower * x[i - 1];
            }
            if i + 1 < n {
                s += self.upper * x[i + 1];
            }
            out[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sine_norms() {
        let m = 63;
        let s = GridFn::sine_mode(m, 1);
        // Discrete sine orthogonality makes the L2 value exact.
        assert!((s.dot(&s) - 0.5).abs() < 1e-14);
        let dx = s.dx();
        let lam = 4.0 / (dx * dx) * (PI * dx / 2.0).sin().powi(2);
        assert!((s.dot_v(&s) - 0.5 * lam).abs() < 1e-10);
        assert!((s.dot_v(&s) - PI * PI / 2.0).abs() < 1e-3);
    }

    #[test]
    fn dirichlet_enforced() {
        assert!(GridFn::from_values(vec![1.0, 0.0, 0.0]).is_err());
        assert!(GridFn::from_values(vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(GridFn::from_values(vec![0.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn inverse_laplacian_of_sine() {
        let m = 127;
        let s = GridFn::sine_mode(m, 2);
        let w = s.inverse_laplacian();
        let back = w.laplacian();
        assert!((&back - &s).sup_norm() < 1e-10);
        let dx = s.dx();
        let lam = 4.0 / (dx * dx) * (2.0 * PI * dx / 2.0).sin().powi(2);
        assert!((&w + &s.scale(1.0 / lam)).sup_norm() < 1e-10);
    }

    #[test]
    fn thomas_matches_dense() {
        let tri = Tridiagonal::constant(4, -1.0, 4.0, 2.0);
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut b = [0.0; 4];
        tri.apply_into(4.0, &x, &mut b);
        let mut sol = [0.0; 4];
        tri.solve_into(&b, &mut sol);
        for (a, e) in sol.iter().zip(x) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn summation_by_parts(vals in proptest::collection::vec(-3.0f64..3.0, 2 * 20)) {
            let u = GridFn::from_interior(&vals[..20]);
            let w = GridFn::from_interior(&vals[20..]);
            let lhs = u.dot_v(&w);
            let rhs = -u.laplacian().dot(&w);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn sup_bounded_by_v_norm(vals in proptest::collection::vec(-3.0f64..3.0, 15)) {
            let u = GridFn::from_interior(&vals);
            prop_assert!(u.sup_norm() <= u.norm_v() + 1e-12);
        }
    }
}
