//! Cross-module integration checks: equivalence of the likelihood fit and the
//! person-period GLM under a perfect test, scaling/location invariances of
//! the calibration correction, and gradient symmetry.

use survcalib::calibration::{correct_beta, fit_calibration, CorrectionMatrix};
use survcalib::data::{
    Cohort, CoefficientVector, FollowUpMode, OutcomeErrorModel, SubjectRecord, SurvivalCurve,
    TimeGrid,
};
use survcalib::glm::{expand_person_period, fit_cloglog};
use survcalib::likelihood::{
    log_likelihood, log_likelihood_gradient, LikelihoodMode, LikelihoodSpec,
};
use survcalib::mle::{default_initial_curves, fit, FitOptions};
use survcalib::pipeline::{fit_naive_glm, naive_method_fit};
use survcalib::sim::{generate_cohort, presets};

fn perfect_test_cohort(rep: u64) -> Cohort {
    let mut cfg = presets::preset("table1-se80-sp90-d60-cr55").unwrap();
    cfg.n = 400;
    cfg.n_c = 100;
    cfg.se = 1.0;
    cfg.sp = 1.0;
    cfg.stop_after_first_positive = true;
    cfg.rng_seed = 314;
    generate_cohort(&cfg, rep).observed
}

#[test]
fn perfect_test_likelihood_equals_glm_likelihood() {
    let cohort = perfect_test_cohort(0);
    let table = expand_person_period(&cohort).unwrap();
    let glm = fit_cloglog(&table, true, false).unwrap();
    let glm_loglik = -0.5 * glm.deviance;

    let err = OutcomeErrorModel::perfect();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let layout = spec.layout();
    let init = CoefficientVector::from_slice(&glm.beta(), 1);
    let mle = fit(&spec, &init, &default_initial_curves(&layout), &FitOptions::default()).unwrap();
    assert!(mle.converged);
    // Same model in different parameterizations: optima coincide.
    assert!(
        (mle.loglik - glm_loglik).abs() <= 1e-6 * glm_loglik.abs(),
        "mle loglik {} vs glm loglik {}",
        mle.loglik,
        glm_loglik
    );
    for (a, b) in mle.beta_hat.packed().iter().zip(glm.beta()) {
        assert!((a - b).abs() < 1e-4, "beta mismatch: {a} vs {b}");
    }
}

#[test]
fn glm_intercepts_map_to_survival_parameters() {
    let cohort = perfect_test_cohort(1);
    let table = expand_person_period(&cohort).unwrap();
    let glm = fit_cloglog(&table, true, false).unwrap();

    let err = OutcomeErrorModel::perfect();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let layout = spec.layout();
    let init = CoefficientVector::from_slice(&glm.beta(), 1);
    let mle = fit(&spec, &init, &default_initial_curves(&layout), &FitOptions::default()).unwrap();
    assert!(mle.converged);

    let s_hat = mle.survival_hat[0].values();
    for ((_, interval), ratio) in glm.survival_ratios() {
        let mle_ratio = s_hat[interval + 1] / s_hat[interval];
        assert!(
            (ratio - mle_ratio).abs() < 1e-4,
            "interval {interval}: glm ratio {ratio} vs mle {mle_ratio}"
        );
    }
}

#[test]
fn rescaling_error_prone_covariate_leaves_corrected_beta_invariant() {
    let mut cfg = presets::preset("table1-se80-sp90-d60-cr90").unwrap();
    cfg.n = 600;
    cfg.n_c = 300;
    cfg.rng_seed = 2024;
    let base = generate_cohort(&cfg, 0).observed;

    let scale = 3.0;
    let scaled_subjects: Vec<SubjectRecord> = base
        .subjects()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.x_star[0] *= scale;
            s
        })
        .collect();
    let scaled = Cohort::from_parts(base.grid().clone(), scaled_subjects, base.follow_up_mode());

    let fit_corrected = |cohort: &Cohort| -> (f64, Vec<f64>) {
        let calib = fit_calibration(cohort).unwrap();
        let naive = naive_method_fit(cohort, false).unwrap();
        let corr = CorrectionMatrix::from_calibration(&calib).unwrap();
        let corrected =
            correct_beta(&CoefficientVector::from_slice(&naive.beta, 1), &corr).unwrap();
        (calib.delta1[0][0], corrected.packed())
    };
    let (d1_base, beta_base) = fit_corrected(&base);
    let (d1_scaled, beta_scaled) = fit_corrected(&scaled);

    // delta1 rescales by 1/c; the corrected coefficients do not move.
    assert!(
        (d1_scaled - d1_base / scale).abs() < 1e-10,
        "delta1: {d1_scaled} vs {}",
        d1_base / scale
    );
    for (a, b) in beta_base.iter().zip(&beta_scaled) {
        assert!((a - b).abs() < 1e-10, "corrected beta moved: {a} vs {b}");
    }
}

#[test]
fn beta_gradient_vanishes_for_balanced_columns_at_null() {
    // All subjects share one schedule and outcome vector; the covariate
    // columns sum to zero, so at beta = 0 the score for beta vanishes.
    let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
    let subjects: Vec<SubjectRecord> = (0..10)
        .map(|i| SubjectRecord {
            id: format!("s{i}"),
            y: vec![0, 1],
            t: vec![1.0, 2.0],
            x_star: vec![if i % 2 == 0 { 1.0 } else { -1.0 }],
            z: vec![(i as f64) - 4.5],
            stratum: "all".into(),
            in_calibration_subset: false,
            x_double_star: None,
        })
        .collect();
    let cohort = Cohort::from_parts(grid, subjects, FollowUpMode::FullSchedule);
    let err = OutcomeErrorModel::new(0.8, 0.9, 1.0).unwrap();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let curve = SurvivalCurve::new(vec![1.0, 0.8, 0.55], false).unwrap();
    let grad = log_likelihood_gradient(&spec, &[curve], &CoefficientVector::zeros(1, 1)).unwrap();
    let beta_grad = grad.rows(2, 2);
    assert!(beta_grad[0].abs() < 1e-12, "beta_x score = {}", beta_grad[0]);
    assert!(beta_grad[1].abs() < 1e-12, "beta_z score = {}", beta_grad[1]);
}

#[test]
fn saturated_perfect_fit_has_stationary_gradient() {
    let cohort = perfect_test_cohort(2);
    let err = OutcomeErrorModel::perfect();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let layout = spec.layout();
    let glm = fit_naive_glm(&cohort, false).unwrap();
    let init = CoefficientVector::from_slice(&glm.beta(), 1);
    let mle = fit(&spec, &init, &default_initial_curves(&layout), &FitOptions::default()).unwrap();
    assert!(mle.converged);
    let grad = log_likelihood_gradient(&spec, &mle.survival_hat, &mle.beta_hat).unwrap();
    // Interior optimum: the raw gradient itself is below tolerance.
    assert!(grad.amax() <= 1e-5, "gradient at optimum: {:?}", grad);
}

#[test]
fn ascent_from_default_start() {
    let cohort = perfect_test_cohort(3);
    let err = OutcomeErrorModel::new(0.9, 0.95, 1.0).unwrap();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let layout = spec.layout();
    let init_curves = default_initial_curves(&layout);
    let init_beta = CoefficientVector::zeros(1, 2);
    let l0 = log_likelihood(&spec, &init_curves, &init_beta).unwrap();
    let mle = fit(&spec, &init_beta, &init_curves, &FitOptions::default()).unwrap();
    assert!(mle.loglik >= l0, "no ascent: {} -> {}", l0, mle.loglik);
}

#[test]
fn perfect_test_type_one_error_near_nominal() {
    // Null exposure effect and an error-free test: the proposed Wald test
    // should reject at close to the nominal 5% level.
    let mut cfg = presets::preset("table5-se80-sp90-d60-cr55").unwrap();
    cfg.se = 1.0;
    cfg.sp = 1.0;
    cfg.n = 1000;
    cfg.replications = 200;
    cfg.rng_seed = 4242;
    let rate = survcalib::sim::type_one_error(&cfg, &survcalib::sim::RunOptions::default()).unwrap();
    // Binomial(200, 0.05) three-sigma window.
    assert!(
        (0.004..=0.096).contains(&rate),
        "perfect-test type I error {rate} far from 0.05"
    );
}

#[test]
fn non_normal_error_attenuation_targets() {
    // Mean fitted attenuation coefficient for the heavy-tailed and mixture
    // error settings; the targets pin down the variance conventions of the
    // generators.
    for (preset, target) in [
        ("table3-se80-sp90-t4-cr90", 0.27),
        ("table3-se80-sp90-mix-cr90", 0.21),
    ] {
        let mut cfg = presets::preset(preset).unwrap();
        cfg.rng_seed = 99;
        let mut sum = 0.0;
        let reps = 120u64;
        for rep in 0..reps {
            let sim = generate_cohort(&cfg, rep);
            sum += fit_calibration(&sim.observed).unwrap().delta1[0][0];
        }
        let mean = sum / reps as f64;
        assert!(
            (mean - target).abs() < 0.02,
            "{preset}: mean delta1 {mean}, expected about {target}"
        );
    }
}

#[test]
fn likelihood_gradient_matches_packed_direction() {
    // The curve-facing gradient wrapper must agree with finite differences of
    // the curve-facing value function through the transform.
    let cohort = perfect_test_cohort(4);
    let err = OutcomeErrorModel::new(0.85, 0.9, 1.0).unwrap();
    let spec = LikelihoodSpec::from_cohort(&cohort, &err, LikelihoodMode::Standard).unwrap();
    let curve = SurvivalCurve::new(vec![1.0, 0.9, 0.75, 0.6, 0.5], false).unwrap();
    let beta = CoefficientVector::new(vec![0.3], vec![-0.2, 0.1]);
    let grad = log_likelihood_gradient(&spec, &[curve.clone()], &beta).unwrap();
    // Check the beta block against direct finite differences in beta.
    let h = 1e-6;
    for r in 0..3 {
        let mut bp = beta.packed();
        let mut bm = beta.packed();
        bp[r] += h;
        bm[r] -= h;
        let fp = log_likelihood(
            &spec,
            &[curve.clone()],
            &CoefficientVector::from_slice(&bp, 1),
        )
        .unwrap();
        let fm = log_likelihood(
            &spec,
            &[curve.clone()],
            &CoefficientVector::from_slice(&bm, 1),
        )
        .unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let idx = 4 + r;
        assert!(
            ((grad[idx] - fd) / grad[idx].abs().max(1.0)).abs() < 1e-6,
            "beta[{r}]: {} vs {fd}",
            grad[idx]
        );
    }
}
