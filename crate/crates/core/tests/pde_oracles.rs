use std::f64::consts::PI;

use fourdvar::model::{make_model, ModelKind};
use fourdvar::pde::{solve_forward, solve_second_variation, solve_tangent, TimeMesh};
use fourdvar::verify::{loglog_slope, taylor_remainders};
use fourdvar::GridFn;

/// L2 distance after restricting `fine` to the nodes of `coarse`.
fn restricted_distance(coarse: &GridFn, fine: &GridFn) -> f64 {
    let (mc, mf) = (coarse.interior_len() + 1, fine.interior_len() + 1);
    assert_eq!(mf % mc, 0);
    let stride = mf / mc;
    let diff: Vec<f64> = (1..mc)
        .map(|j| coarse.values()[j] - fine.values()[j * stride])
        .collect();
    (coarse.dx() * diff.iter().map(|d| d * d).sum::<f64>()).sqrt()
}

fn burgers_at(m: usize, dt: f64, t: f64) -> GridFn {
    let model = make_model(ModelKind::Burgers).unwrap();
    let mesh = TimeMesh::new(&[], t, dt).unwrap();
    let u = GridFn::from_fn(m, |x| (PI * x).sin());
    solve_forward(&model, &u, &mesh).unwrap().last().clone()
}

#[test]
fn burgers_matches_refined_reference() {
    let dt = 1e-3;
    let coarse = burgers_at(127, dt, 0.1);
    let reference = burgers_at(1023, dt / 16.0, 0.1);
    let err = restricted_distance(&coarse, &reference);
    assert!(err <= 1e-3, "L2 gap to reference {err:e}");
}

#[test]
fn forward_self_convergence_rate() {
    // dt tied to dx^2 so the spatial error dominates.
    let ms = [15, 31, 63, 127, 255];
    let sols: Vec<GridFn> = ms
        .iter()
        .map(|&m| {
            let dx = 1.0 / (m + 1) as f64;
            burgers_at(m, 0.05 * dx * dx, 0.1)
        })
        .collect();
    let errs: Vec<f64> = sols.windows(2).map(|w| restricted_distance(&w[0], &w[1])).collect();
    let hs: Vec<f64> = ms[..ms.len() - 1].iter().map(|&m| 1.0 / (m + 1) as f64).collect();
    let rate = loglog_slope(&hs, &errs);
    assert!(rate >= 1.8, "rate {rate}, errors {errs:?}");
}

#[test]
fn heat_mode_decays_exponentially() {
    let model = make_model(ModelKind::Heat).unwrap();
    let mesh = TimeMesh::new(&[], 0.1, 1e-4).unwrap();
    for n in 1..=3 {
        let u = GridFn::sine_mode(127, n);
        let y = solve_forward(&model, &u, &mesh).unwrap();
        let exact = u.scale((-((n * n) as f64) * PI * PI * 0.1).exp());
        let err = (y.last() - &exact).norm();
        assert!(err <= 1e-3, "mode {n}: {err:e}");
    }
}

#[test]
fn zero_is_an_equilibrium() {
    let mesh = TimeMesh::new(&[0.05], 0.1, 1e-3).unwrap();
    for kind in [ModelKind::Heat, ModelKind::Burgers, ModelKind::BoundedReaction { c: 2.0 }] {
        let model = make_model(kind).unwrap();
        let y = solve_forward(&model, &GridFn::zeros(31), &mesh).unwrap();
        assert!(y.states.iter().all(|s| s.sup_norm() == 0.0));
    }
}

#[test]
fn taylor_remainder_is_second_order() {
    let model = make_model(ModelKind::Burgers).unwrap();
    let mesh = TimeMesh::new(&[0.05], 0.1, 1e-3).unwrap();
    let u = GridFn::from_fn(63, |x| (PI * x).sin() + 0.5 * (3.0 * PI * x).sin());
    let v = GridFn::from_fn(63, |x| x * (1.0 - x) * (1.0 + 2.0 * x));
    let eps = [1e-1, 1e-2, 1e-3, 1e-4];
    let rem = taylor_remainders(&model, &mesh, &u, &v, &eps).unwrap();
    let slope = loglog_slope(&eps, &rem);
    assert!((1.9..=2.1).contains(&slope), "slope {slope}, remainders {rem:?}");
}

#[test]
fn linear_models_have_no_second_variation() {
    let model = make_model(ModelKind::Linear {
        advection: 0.7,
        reaction: -1.5,
    })
    .unwrap();
    let mesh = TimeMesh::new(&[0.05], 0.1, 1e-3).unwrap();
    let u = GridFn::sine_mode(31, 2);
    let y = solve_forward(&model, &u, &mesh).unwrap();
    let eta = solve_tangent(&model, &y, &GridFn::sine_mode(31, 1)).unwrap();
    let omega = solve_second_variation(&model, &y, &eta).unwrap();
    assert!(omega.states.iter().all(|s| s.sup_norm() == 0.0));
}
