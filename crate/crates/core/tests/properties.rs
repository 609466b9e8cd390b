use datapc::data::IoData;
use datapc::lfr::build_open_lfr;
use datapc::linalg::{self, Mat, Vector};
use datapc::model::StructuredModel;
use datapc::mpcdesign::{compress_lifted, sigma_j_bar, sigma_j_lifted, stochastic_tightening, tube_factors, ConstraintSpec};
use datapc::sim::chain_model;
use datapc::uq::{chi2_quantile, UncertaintyEllipsoid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

fn spd(n: usize) -> impl Strategy<Value = Mat> {
    mat(n, n).prop_map(move |a| &a * a.transpose() + linalg::eye(n) * 0.1)
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1..5usize, 1..5usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unvec_inverts_vec(m in dims().prop_flat_map(|(r, c)| mat(r, c))) {
        let v = linalg::vec(&m);
        prop_assert_eq!(linalg::unvec(&v, m.nrows(), m.ncols()), m.clone());
    }

    #[test]
    fn commutation_maps_vec_to_vec_of_transpose(m in dims().prop_flat_map(|(r, c)| mat(r, c))) {
        let k = linalg::commutation(m.nrows(), m.ncols());
        prop_assert_eq!(k * linalg::vec(&m), linalg::vec(&m.transpose()));
    }

    #[test]
    fn symmetric_half_vectorization_round_trips(s in (1..5usize).prop_flat_map(spd)) {
        let v = linalg::vech(&s);
        let back = linalg::unvech_sym(v.as_slice(), s.nrows());
        prop_assert!((back - &s).abs().max() < 1e-14);
    }

    #[test]
    fn dlyap_solves_the_stein_equation(a in mat(3, 3), q in spd(3)) {
        let a = &a / (1.25 * linalg::spectral_radius(&a).max(1e-3));
        let x = linalg::dlyap(&a, &q).unwrap();
        let res = &a * &x * a.transpose() - &x + &q;
        prop_assert!(res.abs().max() < 1e-9 * x.abs().max().max(1.0));
        prop_assert!(linalg::min_eig(&x) > 0.0);
    }

    #[test]
    fn chi2_quantile_is_monotone(k in 1..30usize, p in 0.01..0.98f64, dp in 0.001..0.01f64) {
        prop_assert!(chi2_quantile(k, p).unwrap() < chi2_quantile(k, p + dp).unwrap());
    }

    #[test]
    fn ellipsoid_samples_respect_the_set(s in spd(3), c in mat(3, 1), seed in any::<u64>(), delta in 0.05..0.99f64) {
        let ell = UncertaintyEllipsoid::from_covariance(c.column(0).into_owned(), s, delta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(ell.quadratic_form(&ell.sample_inside(&mut rng)) <= 1.0 + 1e-9);
            prop_assert!((ell.quadratic_form(&ell.sample_boundary(&mut rng)) - 1.0).abs() < 1e-9);
            prop_assert!(ell.quadratic_form(&ell.sample_boundary_biased(&mut rng)) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn ellipsoids_are_nested_in_delta(s in spd(2), seed in any::<u64>(), d1 in 0.05..0.9f64, gap in 0.01..0.09f64) {
        let small = UncertaintyEllipsoid::from_covariance(Vector::zeros(2), s, d1).unwrap();
        let big = small.with_delta(d1 + gap).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(big.contains(&small.sample_boundary(&mut rng)));
        }
    }

    #[test]
    fn lfr_reproduces_the_model_dynamics(seed in any::<u64>(), scale in 0.01..1.0f64) {
        let model = chain_model(2, 0.1);
        let n = model.ntheta();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = Vector::from_fn(n, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let ell = UncertaintyEllipsoid::from_covariance(centre, linalg::eye(n) * scale, 0.9).unwrap();
        let lfr = build_open_lfr(&model, &ell).unwrap();
        for _ in 0..5 {
            let th = ell.sample_inside(&mut rng);
            let (a, b) = lfr.dynamics(&th);
            let (a0, b0) = model.assemble_dynamics(&th).unwrap();
            prop_assert!((a - a0).abs().max() < 1e-12);
            prop_assert!((b - b0).abs().max() < 1e-12);
        }
    }

    #[test]
    fn dynamics_parametrization_round_trips(c in mat(2, 3), th in prop::collection::vec(-2.0..2.0f64, 15)) {
        let model = StructuredModel::unstructured(c, 2);
        let th = Vector::from_vec(th);
        let (a, b) = model.assemble_dynamics(&th).unwrap();
        prop_assert!((model.theta_from_dynamics(&a, &b) - th).abs().max() < 1e-10);
    }

    #[test]
    fn sigma_j_bar_matches_the_lifted_compression(p in spd(3), bp in mat(3, 2), s in spd(4), seed in any::<u64>()) {
        // nw = 2, nz = 2, so J maps 4 parameters onto vec of a 2x2 Γ
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = Mat::from_fn(4, 4, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let half = linalg::cholesky(&s).unwrap();
        let direct = sigma_j_bar(&tube_factors(&p, &bp, &j, &half, 2));
        let lifted = compress_lifted(&sigma_j_lifted(&p, &bp, &j, &s, 2), 3);
        prop_assert!((direct - &lifted).abs().max() < 1e-9 * lifted.abs().max().max(1.0));
    }

    #[test]
    fn stochastic_tightening_grows_with_level_and_covariance(s in spd(3), extra in spd(3), h in mat(3, 1), p in 0.5..0.95f64) {
        let xi = linalg::eye(3);
        let h = h.column(0) / (1e3 * h.norm().max(1e-6));
        let lo = ConstraintSpec::new(vec![h.clone()], vec![p]).unwrap();
        let hi = ConstraintSpec::new(vec![h], vec![p + 0.04]).unwrap();
        let a = stochastic_tightening(&[s.clone(), &s + extra], &xi, &lo).unwrap();
        let b = stochastic_tightening(&[s], &xi, &hi).unwrap();
        prop_assert!(a[0][0] <= a[0][1]);
        prop_assert!(a[0][0] < b[0][0]);
        prop_assert!(a[0][0] >= 0.0);
    }

    #[test]
    fn io_csv_round_trip_is_exact(u in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 2), 1..20), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<Vector> = u.iter().map(|_| Vector::from_fn(3, |_, _| rand::Rng::gen_range(&mut rng, -1e-3..1e3))).collect();
        let d = IoData { u: u.into_iter().map(Vector::from_vec).collect(), y };
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        prop_assert_eq!(IoData::read_csv(buf.as_slice()).unwrap(), d);
    }
}
