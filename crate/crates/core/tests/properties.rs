use fourdvar::assimilation::{ObservationSet, PriorSpec, Problem};
use fourdvar::bayes::KLExpansion;
use fourdvar::certificates::pointwise_bound;
use fourdvar::model::{make_model, ModelKind};
use fourdvar::optimize::{CatalogEntry, CriticalPointCatalog};
use fourdvar::pde::{solve_forward, TimeMesh};
use fourdvar::verify::gradient_check;
use fourdvar::GridFn;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const M: usize = 31;

fn grid_fn() -> impl Strategy<Value = GridFn> {
    prop::collection::vec(-2.0..2.0f64, M).prop_map(|v| GridFn::from_interior(&v))
}

fn smooth_fn(max_amp: f64) -> impl Strategy<Value = GridFn> {
    prop::collection::vec(-max_amp..max_amp, 4).prop_map(|c| {
        c.iter()
            .enumerate()
            .fold(GridFn::zeros(M), |acc, (n, a)| acc.axpy(a / (n + 1) as f64, &GridFn::sine_mode(M, n + 1)))
    })
}

fn entry(point: GridFn, cost: f64) -> CatalogEntry {
    CatalogEntry {
        point,
        cost,
        grad_norm: 1e-9,
        hessian_min_eig: None,
        hits: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn v_product_is_summation_by_parts(u in grid_fn(), v in grid_fn()) {
        let a = u.dot_v(&v);
        let b = -u.laplacian().dot(&v);
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        prop_assert!((a - v.dot_v(&u)).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!(u.dot_v(&u) >= 0.0);
    }

    #[test]
    fn inverse_laplacian_inverts(u in grid_fn()) {
        let back = u.inverse_laplacian().laplacian();
        prop_assert!((&back - &u).sup_norm() <= 1e-9 * (1.0 + u.sup_norm()));
    }

    #[test]
    fn kl_coefficients_recover_the_draw(seed in any::<u64>(), sigma in 0.1..3.0f64) {
        let kl = KLExpansion::new(GridFn::sine_mode(M, 2), sigma, Some(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = kl.sample_prior(&mut rng);
        let rebuilt = kl
            .coefficients(&u)
            .iter()
            .zip(&kl.modes)
            .fold(kl.mean.clone(), |acc, (c, e)| acc.axpy(*c, e));
        prop_assert!((&rebuilt - &u).sup_norm() <= 1e-10);
    }

    #[test]
    fn merge_is_symmetric_and_idempotent(
        a in prop::collection::vec(0u8..6, 0..6),
        b in prop::collection::vec(0u8..6, 0..6),
    ) {
        let build = |ks: &[u8]| {
            let mut c = CriticalPointCatalog::new(1e-4);
            for &k in ks {
                c.insert(entry(GridFn::sine_mode(M, 1).scale(k as f64), k as f64));
            }
            c
        };
        let (ca, cb) = (build(&a), build(&b));
        let pts = |c: &CriticalPointCatalog| c.points.iter().map(|e| e.point.clone()).collect::<Vec<_>>();
        let ab = ca.merge(&cb);
        prop_assert_eq!(pts(&ab), pts(&cb.merge(&ca)));
        prop_assert_eq!(pts(&ab.merge(&ab)), pts(&ab));
        for (i, p) in ab.points.iter().enumerate() {
            for q in &ab.points[i + 1..] {
                prop_assert!((&p.point - &q.point).norm_v() >= ab.delta_merge);
            }
        }
    }

    #[test]
    fn pointwise_bound_dominates_solution(u in smooth_fn(2.0), c in 0.2..2.0f64) {
        let model = make_model(ModelKind::BoundedReaction { c }).unwrap();
        let mesh = TimeMesh::new(&[0.05], 0.1, 1e-3).unwrap();
        let y = solve_forward(&model, &u, &mesh).unwrap();
        let a = u.norm_v();
        let bound = pointwise_bound(&model, a, 0.1).unwrap();
        let sup = y.states.iter().fold(0.0_f64, |m, s| m.max(s.sup_norm()));
        prop_assert!(sup <= bound.b * (1.0 + 1e-8), "sup {} bound {}", sup, bound.b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adjoint_gradient_matches_finite_differences(
        u in smooth_fn(1.5),
        v in smooth_fn(1.0),
        sigma in 0.3..3.0f64,
        burgers in any::<bool>(),
    ) {
        let kind = if burgers { ModelKind::Burgers } else { ModelKind::Heat };
        let model = make_model(kind).unwrap();
        let rows: Vec<GridFn> = (1..=3).map(|n| GridFn::sine_mode(M, n)).collect();
        let data = vec![vec![0.3, -0.1, 0.05], vec![0.2, 0.0, -0.02]];
        let obs = ObservationSet::with_scalar_covariance(vec![0.02, 0.05], rows, 0.05, data).unwrap();
        let mesh = TimeMesh::new(obs.times(), 0.05, 1e-3).unwrap();
        let prior = PriorSpec::new(GridFn::zeros(M), sigma).unwrap();
        let p = Problem::new(model, obs, prior, mesh).unwrap();
        prop_assume!(v.norm_v() > 1e-3);
        let err = gradient_check(&p, &u, &v, 1e-5).unwrap();
        prop_assert!(err <= 1e-6, "relative error {:e}", err);
    }
}
