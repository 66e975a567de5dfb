use super::objective::Level;
use super::*;
use crate::densities::DensityKernel;
use crate::models::{simulate, HierarchicalPriors, HierarchicalTruth, NormalLocation, Term};
use crate::quadrature::{integrate_line, AdaptiveOptions};
use approx::assert_relative_eq;
use proptest::prelude::*;

fn conjugate() -> (NormalLocation, ContaminatedPrior) {
    let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
    let prior =
        ContaminatedPrior::new(DensityKernel::standard_normal(), DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(), 0.0)
            .unwrap();
    (model, prior)
}

fn small_hierarchical(fixed: bool) -> HierarchicalModel {
    let data = simulate(&HierarchicalTruth::default(), 3, 36, 4).unwrap();
    let priors = HierarchicalPriors::default();
    if fixed {
        HierarchicalModel::with_fixed_noise(data, [[1.0, 0.3], [0.3, 0.5]], priors, vec![4.0, 3.0, 5.0]).unwrap()
    } else {
        HierarchicalModel::new(data, [[1.0, 0.3], [0.3, 0.5]], priors).unwrap()
    }
}

/// `log ∫ exp(Σ quadratic terms)` plus a Gaussian prior block, in closed form.
fn gaussian_log_normalizer(model: &dyn Model, prior_mean: &[f64], prior_var: f64) -> f64 {
    let d = model.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut c = 0.0;
    for t in model.terms() {
        let Term::Quadratic { coords, a: ta, b: tb, c: tc } = t else { panic!("quadratic model") };
        for (p, &i) in coords.iter().enumerate() {
            b[i] += tb[p];
            for (q, &j) in coords.iter().enumerate() {
                a[(i, j)] += ta[(p, q)];
            }
        }
        c += tc;
    }
    for (k, &i) in model.prior_coords().iter().enumerate() {
        a[(i, i)] += 1.0 / prior_var;
        b[i] += prior_mean[k] / prior_var;
        c -= 0.5 * prior_mean[k] * prior_mean[k] / prior_var + 0.5 * (LN_2PI + prior_var.ln());
    }
    let chol = a.cholesky().unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v: &f64| v.ln()).sum::<f64>();
    c + 0.5 * b.dot(&chol.solve(&b)) + 0.5 * d as f64 * LN_2PI - 0.5 * log_det
}

#[test]
fn conjugate_fit_recovers_posterior() {
    let (model, prior) = conjugate();
    let family = VariationalFamily::mean_field(1);
    let state = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    assert!(state.converged);
    assert!(state.kl_gradient_norm < 1e-8);
    let cov = state.covariance().unwrap();
    assert!((state.mean()[0] - 1.0).abs() < 1e-6);
    assert!((cov[(0, 0)] - 0.5).abs() < 1e-6);
    let log_evidence = (1.0 / (4.0 * std::f64::consts::PI).sqrt()).ln() - 1.0;
    let kl = state.objective + log_evidence;
    assert!(kl.abs() < 1e-10, "KL = {kl}");
}

#[test]
fn neg_elbo_at_exact_posterior_is_minus_log_evidence() {
    let (model, prior) = conjugate();
    let family = VariationalFamily::mean_field(1);
    let objective = Objective::new(&model, &prior, &family, &ExpectationPolicy::default()).unwrap();
    let eta = vec![1.0, 0.5f64.sqrt().ln()];
    let log_evidence = (1.0 / (4.0 * std::f64::consts::PI).sqrt()).ln() - 1.0;
    assert!((objective.value(&eta).unwrap() + log_evidence).abs() < 1e-6);
}

#[test]
fn standard_gaussian_target_hessian() {
    // KL(N(m, s²) ‖ N(0, 1)) = ½(m² + s² − 1 − 2 log s) has Hessian diag(1, 2) at the optimum.
    let model = NormalLocation::scalar(&[0.0], 1e12).unwrap();
    let prior =
        ContaminatedPrior::new(DensityKernel::standard_normal(), DensityKernel::standard_normal(), 0.0).unwrap();
    let family = VariationalFamily::mean_field(1);
    let objective = Objective::new(&model, &prior, &family, &ExpectationPolicy::default()).unwrap();
    let h = objective.hessian(&[0.0, 0.0]).unwrap();
    assert!((h[(0, 0)] - 1.0).abs() < 1e-10);
    assert!((h[(1, 1)] - 2.0).abs() < 1e-10);
    assert!(h[(0, 1)].abs() < 1e-12);
}

#[test]
fn full_covariance_recovers_gaussian_hierarchical_posterior() {
    let model = small_hierarchical(true);
    let prior = HierarchicalPriors::default().contaminated(0.0).unwrap();
    let family = VariationalFamily::full_covariance(model.dim());
    let state = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    assert!(state.converged);
    let kl = state.objective + gaussian_log_normalizer(&model, &[0.0, 0.0], 1.0 / 0.111);
    assert!(kl.abs() < 1e-8, "KL = {kl}");
}

#[test]
fn objective_trace_is_monotone() {
    let model = small_hierarchical(false);
    let prior = HierarchicalPriors::default().contaminated(0.3).unwrap();
    let family = VariationalFamily::hierarchical(&model);
    let state = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    assert!(state.converged);
    for w in state.trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn fit_is_deterministic_and_order_invariant() {
    let model = small_hierarchical(false);
    let prior = HierarchicalPriors::default().contaminated(0.0).unwrap();
    let family = VariationalFamily::hierarchical(&model);
    let a = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    let b = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    assert_eq!(a.eta, b.eta);
    let mut opts = FitOptions::default();
    opts.policy.node_permutation = Some(99);
    let c = fit(&model, &prior, &family, &opts).unwrap();
    for (x, y) in a.eta.iter().zip(&c.eta) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn warm_start_at_optimum_stays_put() {
    let (model, prior) = conjugate();
    let family = VariationalFamily::mean_field(1);
    let first = fit(&model, &prior, &family, &FitOptions::default()).unwrap();
    let opts = FitOptions { initial_eta: Some(first.eta.clone()), ..Default::default() };
    let second = fit(&model, &prior, &family, &opts).unwrap();
    assert_eq!(second.iterations, 0);
    assert_eq!(first.eta, second.eta);
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let model = small_hierarchical(false);
    let prior = HierarchicalPriors::default().contaminated(0.0).unwrap();
    let family = VariationalFamily::hierarchical(&model);
    let opts = FitOptions { max_iterations: 2, ..Default::default() };
    let state = fit(&model, &prior, &family, &opts).unwrap();
    assert!(!state.converged);
    assert!(state.kl_gradient_norm >= opts.gradient_tolerance);
}

fn check_derivatives(model: &dyn Model, prior: &ContaminatedPrior, family: &VariationalFamily, eta: &[f64]) {
    let objective = Objective::new(model, prior, family, &ExpectationPolicy::default()).unwrap();
    let (_, g) = objective.gradient(eta).unwrap();
    let h = objective.hessian(eta).unwrap();
    let step = 1e-5;
    for i in 0..eta.len() {
        let mut up = eta.to_vec();
        let mut dn = eta.to_vec();
        up[i] += step;
        dn[i] -= step;
        let fd = (objective.value(&up).unwrap() - objective.value(&dn).unwrap()) / (2.0 * step);
        assert!((g[i] - fd).abs() < 1e-5 * fd.abs().max(1.0), "gradient {i}: {} vs {fd}", g[i]);
        let gu = objective.gradient(&up).unwrap().1;
        let gd = objective.gradient(&dn).unwrap().1;
        for j in 0..eta.len() {
            let fd2 = (gu[j] - gd[j]) / (2.0 * step);
            assert!((h[(j, i)] - fd2).abs() < 1e-5 * fd2.abs().max(1.0), "hessian ({j},{i}): {} vs {fd2}", h[(j, i)]);
        }
    }
}

#[test]
fn derivatives_match_finite_differences_blockwise() {
    let model = small_hierarchical(false);
    let prior = HierarchicalPriors::default().contaminated(0.4).unwrap();
    let family = VariationalFamily::hierarchical(&model);
    let mut eta = initial_eta(&model, &prior, &family);
    // correlate the blocks a little
    for e in family.entries().iter().filter(|e| !e.is_diagonal()) {
        eta[e.eta] = 0.05;
    }
    eta[0] = 10.0;
    eta[1] = 11.0;
    check_derivatives(&model, &prior, &family, &eta);
}

#[test]
fn derivatives_match_finite_differences_full_covariance() {
    let model =
        NormalLocation::new(vec![vec![1.0, 2.0], vec![0.0, 1.5]], DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]))
            .unwrap();
    let prior = ContaminatedPrior::new(
        DensityKernel::product(vec![DensityKernel::normal(0.0, 2.0).unwrap(); 2]).unwrap(),
        DensityKernel::product(vec![DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(); 2]).unwrap(),
        0.3,
    )
    .unwrap();
    let family = VariationalFamily::full_covariance(2);
    check_derivatives(&model, &prior, &family, &[0.4, 1.2, -0.5, 0.2, -0.9]);
}

#[test]
fn score_vanishes_in_mean_block_at_mean() {
    let family = VariationalFamily::mean_field(3);
    let state = VariationalState::new(family, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.2]).unwrap();
    let score = state.q_score(&[0.5, -1.0, 2.0]).unwrap();
    assert_eq!(&score[..3], &[0.0, 0.0, 0.0]);
    // log-scale entries give −1 at the mean
    for s in &score[3..] {
        assert_relative_eq!(*s, -1.0, epsilon = 1e-15);
    }
}

#[test]
fn score_integrates_to_zero() {
    let state = VariationalState::new(VariationalFamily::mean_field(1), vec![0.7, 0.4f64.ln()]).unwrap();
    let opts = AdaptiveOptions::default();
    for k in 0..2 {
        let r = integrate_line(
            |t| state.q_score(&[t]).unwrap()[k] * state.log_density(&[t]).unwrap().exp(),
            0.7,
            0.4 * 12.0,
            1e-12,
            &opts,
        )
        .unwrap();
        assert!(r.value.abs() < 1e-6, "component {k}: {}", r.value);
    }
}

#[test]
fn marginal_score_rejects_mixed_blocks() {
    let state = VariationalState::new(VariationalFamily::full_covariance(3), vec![0.0; 9]).unwrap();
    assert!(MarginalScore::new(&state, &[0, 1]).is_ok());
    assert!(matches!(MarginalScore::new(&state, &[2]), Err(Error::Unsupported(_))));
}

#[test]
fn moment_eta_round_trip() {
    let family = VariationalFamily::blockwise(3, vec![vec![2, 0], vec![1]]).unwrap();
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.5, 0.0, 1.5]);
    let mean = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let eta = family.eta_from_gaussian(&mean, &cov).unwrap();
    let q = GaussianQ::from_eta(&family, &eta).unwrap();
    assert!((q.covariance() - cov).amax() < 1e-12);
    assert_eq!(q.mean, mean);
}

#[test]
fn objective_rejects_custom_prior_kernels() {
    let (model, _) = conjugate();
    let prior = ContaminatedPrior::new(
        DensityKernel::custom(1, false, |x| -x[0] * x[0]),
        DensityKernel::standard_normal(),
        0.0,
    )
    .unwrap();
    let r = Objective::new(&model, &prior, &VariationalFamily::mean_field(1), &ExpectationPolicy::default());
    assert!(matches!(r, Err(Error::Unsupported(_))));
}

#[test]
fn expectation_of_smooth_function_uses_quadrature() {
    struct Cube;
    impl crate::models::SmoothFunction for Cube {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            x[0].powi(3)
        }
        fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> f64 {
            g[0] = 3.0 * x[0] * x[0];
            h[0] = 6.0 * x[0];
            x[0].powi(3)
        }
    }
    let (model, prior) = conjugate();
    let family = VariationalFamily::mean_field(1);
    let objective = Objective::new(&model, &prior, &family, &ExpectationPolicy::default()).unwrap();
    let (m, s) = (0.5f64, 1.3f64);
    let v = objective.expect_function(&[m, s.ln()], &[0], std::sync::Arc::new(Cube), Level::Gradient).unwrap();
    assert_relative_eq!(v.value, m.powi(3) + 3.0 * m * s * s, epsilon = 1e-12);
    let g = v.gradient.unwrap();
    assert_relative_eq!(g[0], 3.0 * m * m + 3.0 * s * s, epsilon = 1e-12);
    assert_relative_eq!(g[1], 6.0 * m * s * s, epsilon = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn score_matches_finite_differences(
        eta in proptest::collection::vec(-1.0f64..1.0, 5),
        theta in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        let family = VariationalFamily::full_covariance(2);
        let state = VariationalState::new(family.clone(), eta.clone()).unwrap();
        let score = state.q_score(&theta).unwrap();
        let step = 1e-5;
        for i in 0..eta.len() {
            let mut up = eta.clone();
            let mut dn = eta.clone();
            up[i] += step;
            dn[i] -= step;
            let lu = VariationalState::new(family.clone(), up).unwrap().log_density(&theta).unwrap();
            let ld = VariationalState::new(family.clone(), dn).unwrap().log_density(&theta).unwrap();
            let fd = (lu - ld) / (2.0 * step);
            prop_assert!((score[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {} vs {fd}", score[i]);
        }
    }
}
