use log::debug;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Problem;
use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::pde::{solve_tangent, Trajectory};

/// Hessian of `J` restricted to the span of the first `m` sine modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HessianReport {
    /// Basis directions, V-orthonormal on the grid.
    pub modes: Vec<GridFn>,
    /// Row-major `m x m` matrix `D^2 J(u)(v_i, v_j)`.
    pub matrix: Vec<Vec<f64>>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub morse_index: usize,
    /// Eigenvalues below `-tol` count as negative.
    pub tol: f64,
    /// Discrete `||sin(n pi x)||_V^2` before normalization.
    pub v_norm_sq: Vec<f64>,
    /// Discrete `||sin(n pi x)||_{L2}^2` before normalization.
    pub l2_norm_sq: Vec<f64>,
}

impl HessianReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn dim(&self) -> usize {
        self.modes.len()
    }
}

fn sum_trajectories(a: &Trajectory, b: &Trajectory) -> Trajectory {
    Trajectory {
        states: a.states.iter().zip(&b.states).map(|(x, y)| x + y).collect(),
        mesh: a.mesh.clone(),
    }
}

/// Assemble the Hessian on the first `m_modes` sine modes at `u` by
/// polarization of the quadratic form.
pub fn assemble_hessian(problem: &Problem, u: &GridFn, m_modes: usize) -> Result<HessianReport> {
    let mm = problem.grid_size();
    let max = mm / 2;
    if m_modes == 0 || m_modes > max {
        return Err(Error::TooManyModes {
            requested: m_modes,
            max,
        });
    }
    let y = problem.forward(u)?;
    let adj = problem.adjoint(&y)?;

    let raw: Vec<GridFn> = (1..=m_modes).map(|n| GridFn::sine_mode(mm, n)).collect();
    let v_norm_sq: Vec<f64> = raw.iter().map(|s| s.dot_v(s)).collect();
    let l2_norm_sq: Vec<f64> = raw.iter().map(|s| s.dot(s)).collect();
    for (n, (v2, l2)) in v_norm_sq.iter().zip(&l2_norm_sq).enumerate() {
        debug!("mode {}: ||sin||_V^2 = {v2:.6e}, ||sin||_L2^2 = {l2:.6e}", n + 1);
    }
    let modes: Vec<GridFn> = raw
        .iter()
        .zip(&v_norm_sq)
        .map(|(s, v2)| s.scale(1.0 / v2.sqrt()))
        .collect();

    let tangents: Vec<Trajectory> = modes
        .par_iter()
        .map(|v| solve_tangent(&problem.model, &y, v))
        .collect::<Result<_>>()?;
    let diag: Vec<f64> = modes
        .par_iter()
        .zip(&tangents)
        .map(|(v, eta)| problem.hessian_terms_from(&y, &adj, eta, v).total())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..m_modes)
        .flat_map(|i| ((i + 1)..m_modes).map(move |j| (i, j)))
        .collect();
    let off: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let v = &modes[i] + &modes[j];
            let eta = sum_trajectories(&tangents[i], &tangents[j]);
            let q = problem.hessian_terms_from(&y, &adj, &eta, &v).total();
            0.5 * (q - diag[i] - diag[j])
        })
        .collect();

    let mut a = DMatrix::<f64>::zeros(m_modes, m_modes);
    for (i, d) in diag.iter().enumerate() {
        a[(i, i)] = *d;
    }
    for (&(i, j), &val) in pairs.iter().zip(&off) {
        a[(i, j)] = val;
        a[(j, i)] = val;
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { time: 0.0 });
    }
    let eig = SymmetricEigen::new(a.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|p, q| p.total_cmp(q));
    let scale = eigenvalues.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let tol = 1e-8 * scale;
    let morse_index = eigenvalues.iter().filter(|&&e| e < -tol).count();
    debug!("hessian eigenvalues {eigenvalues:?}, morse index {morse_index}");

    let matrix = (0..m_modes)
        .map(|i| (0..m_modes).map(|j| a[(i, j)]).collect())
        .collect();
    Ok(HessianReport {
        modes,
        matrix,
        eigenvalues,
        morse_index,
        tol,
        v_norm_sq,
        l2_norm_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilation::{ObservationSet, PriorSpec};
    use crate::model::{make_model, ModelKind};
    use crate::pde::TimeMesh;

    fn pure_prior(kind: ModelKind, m: usize, sigma: f64) -> Problem {
        let model = make_model(kind).unwrap();
        let prior = PriorSpec::new(GridFn::zeros(m), sigma).unwrap();
        let mesh = TimeMesh::new(&[], 0.1, 1e-3).unwrap();
        Problem::new(model, ObservationSet::empty(m), prior, mesh).unwrap()
    }

    #[test]
    fn heat_without_observations_is_scaled_identity() {
        let p = pure_prior(ModelKind::Heat, 31, 0.5);
        let h = assemble_hessian(&p, &GridFn::sine_mode(31, 1), 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 4.0 } else { 0.0 };
                assert!((h.matrix[i][j] - want).abs() < 1e-10, "{i},{j}: {}", h.matrix[i][j]);
            }
        }
        assert_eq!(h.morse_index, 0);
        assert!((h.l2_norm_sq[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn too_many_modes_rejected() {
        let p = pure_prior(ModelKind::Heat, 15, 1.0);
        assert!(matches!(
            assemble_hessian(&p, &GridFn::zeros(15), 8),
            Err(Error::TooManyModes { requested: 8, max: 7 })
        ));
        assert!(assemble_hessian(&p, &GridFn::zeros(15), 7).is_ok());
    }

    #[test]
    fn matrix_is_symmetric_and_matches_form_on_combinations() {
        let m = 31;
        let model = make_model(ModelKind::BoundedReaction { c: 2.0 }).unwrap();
        let obs = ObservationSet::with_scalar_covariance(
            vec![0.05, 0.1],
            vec![GridFn::sine_mode(m, 1)],
            1.0,
            vec![vec![3.0], vec![-2.0]],
        )
        .unwrap();
        let prior = PriorSpec::new(GridFn::zeros(m), 1.0).unwrap();
        let mesh = TimeMesh::new(&[0.05, 0.1], 0.1, 1e-3).unwrap();
        let p = Problem::new(model, obs, prior, mesh).unwrap();
        let u = GridFn::sine_mode(m, 1).scale(0.7);
        let h = assemble_hessian(&p, &u, 3).unwrap();
        let c = [0.3, -1.1, 0.5];
        let v = h.modes.iter().zip(c).fold(GridFn::zeros(m), |acc, (e, s)| acc.axpy(s, e));
        let direct = p.hessian_form(&u, &v).unwrap();
        let mut via = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                via += c[i] * c[j] * h.matrix[i][j];
                assert_eq!(h.matrix[i][j], h.matrix[j][i]);
            }
        }
        assert!((direct - via).abs() < 1e-9 * direct.abs().max(1.0));
    }
}
