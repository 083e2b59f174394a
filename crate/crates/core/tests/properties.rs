use ortho_kit::ate::{ATEModel, ATEModelSpec, SweepConfig};
use ortho_kit::estimating::{
    canonical_directions, check_neyman, forward_verify, negative_identity_check, nuisance_gateaux,
    reverse_verify, EstimatingFunction, ParameterPair,
};
use ortho_kit::functional::{
    compute_eif, compute_eif_with_step, nuisance_tangent_basis, verify_influence,
    NuisanceFunctional, ScalarFunctional,
};
use ortho_kit::model::{center, inner_product};
use ortho_kit::submodel::{
    ddt_expectation_fixed, default_qmd_grid, linear_tilt, tilt_score_rank, verify_qmd,
};
use ortho_kit::{Distribution, RealFunction, SampleSpace, ScoreFunction, Tolerances};
use proptest::prelude::*;

fn weights(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.05f64..1.0, k)
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
    let head: f64 = p[..p.len() - 1].iter().sum();
    *p.last_mut().unwrap() = 1.0 - head;
    p
}

fn dist(w: &[f64]) -> Distribution {
    Distribution::new(SampleSpace::indexed(w.len()).unwrap(), normalized(w)).unwrap()
}

fn score(d: &Distribution, raw: Vec<f64>) -> ScoreFunction {
    center(d, &RealFunction::new(d.space().clone(), raw).unwrap()).unwrap()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn space_and_function(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..max_k).prop_flat_map(|k| (weights(k), proptest::collection::vec(-1.0f64..1.0, k)))
}

fn ate_spec() -> impl Strategy<Value = ATEModelSpec> {
    (2usize..4, 2usize..4).prop_flat_map(|(nx, ny)| {
        (
            weights(nx),
            proptest::collection::vec(0.2f64..0.8, nx),
            proptest::collection::vec(weights(ny), nx),
            proptest::collection::vec(weights(ny), nx),
        )
            .prop_map(move |(x, pi, a1, a0)| ATEModelSpec {
                x_probs: normalized(&x),
                pi,
                y_support: (0..ny).map(|j| j as f64).collect(),
                y_cond_a1: a1.iter().map(|r| normalized(r)).collect(),
                y_cond_a0: a0.iter().map(|r| normalized(r)).collect(),
                epsilon: None,
                c_y: None,
                sigma2_min: None,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tilt_paths_stay_valid((w, g) in space_and_function(50)) {
        let p0 = dist(&w);
        let g = score(&p0, g);
        prop_assume!(g.sup_norm() > 1e-6);
        let sub = linear_tilt(&p0, &g).unwrap();
        let m = g.sup_norm();
        for i in 0..=20 {
            let t = -0.9 / m + 1.8 / m * f64::from(i) / 20.0;
            let pt = sub.density_at(t).unwrap();
            prop_assert!(pt.density().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn tilts_are_qmd_with_their_direction((w, g) in space_and_function(50)) {
        let p0 = dist(&w);
        let g = score(&p0, g);
        prop_assume!(g.sup_norm() > 1e-3);
        let sub = linear_tilt(&p0, &g).unwrap();
        let r = verify_qmd(&sub, &g, &default_qmd_grid(sub.t_limit()), &Tolerances::default()).unwrap();
        prop_assert!(r.pass, "slope {} residual {}", r.slope, r.smallest_residual());
    }

    #[test]
    fn expectation_derivative_is_inner_product_with_score(
        (w, g, f) in (2usize..30).prop_flat_map(|k| (
            weights(k),
            proptest::collection::vec(-1.0f64..1.0, k),
            proptest::collection::vec(-5.0f64..5.0, k),
        ))
    ) {
        let p0 = dist(&w);
        let g = score(&p0, g);
        prop_assume!(g.sup_norm() > 1e-3);
        let sub = linear_tilt(&p0, &g).unwrap();
        let f = RealFunction::new(p0.space().clone(), f).unwrap();
        let d = ddt_expectation_fixed(&sub, &f, &Tolerances::default()).unwrap();
        prop_assert!(d.pass, "{} vs {}", d.numeric, d.predicted);
    }

    #[test]
    fn eif_verifies_on_random_scores(
        (w, f, raw) in (2usize..12).prop_flat_map(|k| (
            weights(k),
            proptest::collection::vec(-3.0f64..3.0, k),
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, k), 10),
        ))
    ) {
        let p0 = dist(&w);
        let tol = Tolerances::default();
        let scores: Vec<ScoreFunction> = raw.into_iter().map(|r| score(&p0, r)).collect();
        let f = RealFunction::new(p0.space().clone(), f).unwrap();
        for beta in [ScalarFunctional::mean(f), ScalarFunctional::sum_of_squares()] {
            let phi = compute_eif(&beta, &p0).unwrap();
            let r = verify_influence(&beta, &phi.clone().into(), &scores, &tol).unwrap();
            prop_assert!(r.pass, "{}: max error {}", beta.name(), r.max_error());
            for b in nuisance_tangent_basis(&beta, &p0).unwrap() {
                prop_assert!(inner_product(&p0, phi.function(), b.function()).unwrap().abs() <= 1e-10);
            }
            let coarse = compute_eif_with_step(&beta, &p0, 2e-3).unwrap();
            prop_assert!(sup_diff(phi.values(), coarse.values()) <= 1e-6);
        }
    }

    /// Pathwise derivatives along the centered indicators pin down a passing
    /// candidate uniquely.
    #[test]
    fn influence_function_is_unique((w, shift) in space_and_function(10)) {
        let p0 = dist(&w);
        let beta = ScalarFunctional::sum_of_squares();
        let phi = compute_eif(&beta, &p0).unwrap();
        let shift = score(&p0, shift);
        prop_assume!(shift.norm() > 1e-3);
        let indicators: Vec<ScoreFunction> = (0..p0.len())
            .map(|k| center(&p0, &RealFunction::indicator(p0.space().clone(), k)).unwrap())
            .collect();
        let tol = Tolerances::default();
        let other = ScoreFunction::new(&p0, phi.function().add(shift.scale(1e-3).function()).unwrap()).unwrap();
        let r = verify_influence(&beta, &other.clone().into(), &indicators, &tol).unwrap();
        if r.pass {
            prop_assert!(sup_diff(phi.values(), other.values()) <= 1e-8);
        }
    }

    #[test]
    fn ate_eif_and_forward_phi_agree(spec in ate_spec()) {
        let built = ATEModel::build(&spec);
        prop_assume!(built.is_ok());
        let (model, _) = built.unwrap();
        let tol = Tolerances::default();
        let p0 = model.p0();
        let beta = model.beta_functional();
        let eif = compute_eif(&beta, p0).unwrap();
        prop_assert!(sup_diff(eif.values(), model.phi().unwrap().values()) <= 1e-8);
        let m = model.estimating_function();
        let scores: Vec<ScoreFunction> = (0..10)
            .map(|i| score(p0, (0..p0.len()).map(|k| ((i * 7 + k * 3) as f64).sin()).collect()))
            .collect();
        let r = forward_verify(&m, p0, &beta, &model.eta_functional(), &scores, &tol).unwrap();
        prop_assert!(r.pass, "{:?}", r.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
        prop_assert!(sup_diff(r.phi.values(), eif.values()) <= 1e-8);
    }

    #[test]
    fn ate_master_identity_on_coordinates(spec in ate_spec()) {
        let built = ATEModel::build(&spec);
        prop_assume!(built.is_ok());
        let (model, _) = built.unwrap();
        let r = reverse_verify(
            &model.estimating_function(),
            model.p0(),
            &model.beta_functional(),
            &model.eta_functional(),
            &model.beta_coordinate_submodel().unwrap(),
            &model.canonical_eta_coordinates().unwrap(),
            &Tolerances::default(),
        ).unwrap();
        prop_assert!(r.pass, "{:?}", r.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
        prop_assert!((r.jacobian + 1.0).abs() <= 1e-6);
        prop_assert!(r.identity_residuals.iter().all(|v| v.abs() <= 1e-6));
    }
}

#[test]
fn tilt_scores_saturate() {
    for k in 2..=20 {
        let w: Vec<f64> = (0..k)
            .map(|i| 1.0 + (i as f64 * 0.37).sin().abs())
            .collect();
        let p0 = dist(&w);
        let dirs: Vec<ScoreFunction> = (0..k)
            .map(|j| center(&p0, &RealFunction::indicator(p0.space().clone(), j)).unwrap())
            .collect();
        assert_eq!(tilt_score_rank(&p0, &dirs).unwrap(), k - 1, "k = {k}");
    }
}

#[test]
fn counterexample_suite() {
    let p0 = dist(&[0.7, 0.3]);
    let beta = ScalarFunctional::sum_of_squares();
    let eta = NuisanceFunctional::density(vec!["p0".into(), "p1".into()]);
    let m = EstimatingFunction::density_counterexample(2);
    let tol = Tolerances::default();
    let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();

    let phi = center(&p0, &m.values(&p0, pair.beta0, &pair.eta0).unwrap()).unwrap();
    let indicators: Vec<ScoreFunction> = (0..2)
        .map(|k| center(&p0, &RealFunction::indicator(p0.space().clone(), k)).unwrap())
        .collect();
    assert!(
        verify_influence(&beta, &phi.into(), &indicators, &tol)
            .unwrap()
            .pass
    );
    assert!(
        !check_neyman(&m, &p0, &pair, &canonical_directions(2), eta.labels(), &tol)
            .unwrap()
            .pass
    );
    let g = negative_identity_check(&m, &p0, &beta, &eta).unwrap();
    assert!((g + 1.0).abs() > 0.5);
    assert!((nuisance_gateaux(&m, &p0, &pair, &[0.1, -0.1]).unwrap() - 0.08).abs() <= 1e-8);
}

#[test]
fn sampled_sweep_ignores_thread_count() {
    let (model, _) = ATEModel::build(&ATEModelSpec::sweep_reference()).unwrap();
    let config = SweepConfig {
        eps: vec![0.2, 0.1],
        n: 200,
        reps: 8,
        seed: 11,
        population: false,
        direction: None,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let table = pool.install(|| model.bias_sweep(&config).unwrap());
        format!("{table:?}")
    };
    assert_eq!(run(1), run(4));
}
