//! Linear response for variational fits: the KL Hessian in η, the moment
//! Jacobian of a tracked function, and the variational influence function
//! built from them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::densities::{clamped_exp, ContaminatedPrior, DensityKernel};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::models::Model;
use crate::quadrature::gauss_hermite_tensor;
use crate::sampling::{vb_importance_sensitivity, Estimate, ImportanceSampler, InfluenceValue};
use crate::variational::{ExpectationPolicy, MarginalScore, Objective, VariationalState};

/// Smallest admissible KL Hessian eigenvalue.
pub const MIN_EIGENVALUE: f64 = 1e-10;
/// Step for the finite-difference Hessian fallback.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

/// `∂²KL(q‖p_ε^x)/∂η∂ηᵀ` at the fitted η.
pub fn kl_hessian(
    state: &VariationalState,
    model: &dyn Model,
    prior: &ContaminatedPrior,
    policy: &ExpectationPolicy,
) -> Result<DMatrix<f64>> {
    if !state.converged {
        return Err(Error::Validation("KL Hessian requested at a non-converged fit".into()));
    }
    if state.epsilon != prior.epsilon {
        return Err(Error::Validation(format!(
            "state was fitted at epsilon {} but the prior has {}",
            state.epsilon, prior.epsilon
        )));
    }
    let objective = Objective::new(model, prior, &state.family, policy)?;
    let h = match objective.hessian(&state.eta) {
        Ok(h) => h,
        Err(Error::Unsupported(_)) => kl_hessian_fd(&objective, &state.eta, FD_HESSIAN_STEP)?,
        Err(e) => return Err(e),
    };
    let min = min_eigenvalue(&h);
    if !(min > MIN_EIGENVALUE) {
        return Err(Error::IllConditioned { min_eigenvalue: min });
    }
    Ok(h)
}

/// Central differences of the analytic KL gradient, Richardson-extrapolated once.
pub fn kl_hessian_fd(objective: &Objective, eta: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let n = eta.len();
    let column = |j: usize, h: f64| -> Result<DVector<f64>> {
        let mut up = eta.to_vec();
        let mut dn = eta.to_vec();
        up[j] += h;
        dn[j] -= h;
        Ok((objective.gradient(&up)?.1 - objective.gradient(&dn)?.1) / (2.0 * h))
    };
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let c = (column(j, 0.5 * step)? * 4.0 - column(j, step)?) / 3.0;
        out.set_column(j, &c);
    }
    Ok((&out + out.transpose()) * 0.5)
}

pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigen().eigenvalues.min()
}

/// `E_q[g]` and its gradient in η. Polynomial functionals are exact; custom
/// ones use the expectation policy's nodes over the latent directions that
/// reach their support.
pub fn moment_with_jacobian(
    state: &VariationalState,
    g: &Functional,
    policy: &ExpectationPolicy,
) -> Result<(f64, DVector<f64>)> {
    let family = &state.family;
    let d = family.dim_theta;
    if let Some(j) = g.max_index() {
        if j >= d {
            return Err(Error::Dimension { expected: d, got: j + 1 });
        }
    }
    let n = family.dim_eta();
    let eta = &state.eta;
    let entries = family.entries();
    let mut jac = DVector::zeros(n);
    let value = match g {
        Functional::Coordinate(i) => {
            jac[*i] = 1.0;
            eta[*i]
        }
        Functional::Square(i) => {
            let mut v = eta[*i] * eta[*i];
            jac[*i] = 2.0 * eta[*i];
            for e in entries.iter().filter(|e| e.row == *i) {
                let l = if e.is_diagonal() { eta[e.eta].exp() } else { eta[e.eta] };
                v += l * l;
                jac[e.eta] = if e.is_diagonal() { 2.0 * l * l } else { 2.0 * l };
            }
            v
        }
        Functional::Linear { coefficients, offset } => {
            for (j, c) in coefficients.iter().enumerate() {
                jac[j] = *c;
            }
            offset + coefficients.iter().zip(eta).map(|(c, m)| c * m).sum::<f64>()
        }
        Functional::Constant(c) => *c,
        Functional::Sum(parts) => {
            let mut v = 0.0;
            for (w, part) in parts {
                let (pv, pj) = moment_with_jacobian(state, part, policy)?;
                v += w * pv;
                jac += pj * *w;
            }
            v
        }
        Functional::Custom { .. } => return custom_moment(state, g, policy),
    };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("E_q[g] is not finite ({value})")));
    }
    Ok((value, jac))
}

fn custom_moment(state: &VariationalState, g: &Functional, policy: &ExpectationPolicy) -> Result<(f64, DVector<f64>)> {
    let family = &state.family;
    let q = state.gaussian()?;
    let support = g.support();
    let entries: Vec<_> = family.entries().into_iter().filter(|e| support.contains(&e.row)).collect();
    let mut cols: Vec<usize> = entries.iter().map(|e| e.col).collect();
    cols.sort_unstable();
    cols.dedup();

    let (nodes, weights) = if cols.len() <= policy.max_quadrature_dim {
        gauss_hermite_tensor(cols.len(), policy.gh_nodes)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        let z: Vec<Vec<f64>> =
            (0..policy.mc_draws).map(|_| (0..cols.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        (z, vec![1.0 / policy.mc_draws as f64; policy.mc_draws])
    };

    let mut value = 0.0;
    let mut jac = DVector::zeros(family.dim_eta());
    let mut theta: Vec<f64> = q.mean.iter().copied().collect();
    for (z, w) in nodes.iter().zip(&weights) {
        for &r in &support {
            theta[r] = q.mean[r] + cols.iter().enumerate().map(|(k, &c)| q.l[(r, c)] * z[k]).sum::<f64>();
        }
        let v = g.value(&theta);
        let grad = g.gradient(&theta);
        if !v.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("g is not finite at {theta:?}")));
        }
        value += w * v;
        for &r in &support {
            jac[r] += w * grad[r];
        }
        for e in &entries {
            let k = cols.iter().position(|&c| c == e.col).expect("column listed");
            let dl = if e.is_diagonal() { q.l[(e.row, e.col)] } else { 1.0 };
            jac[e.eta] += w * grad[e.row] * z[k] * dl;
        }
    }
    Ok((value, jac))
}

/// `∂E_q[g]/∂η`.
pub fn moment_jacobian(state: &VariationalState, g: &Functional) -> Result<DVector<f64>> {
    Ok(moment_with_jacobian(state, g, &ExpectationPolicy::default())?.1)
}

/// Everything needed to evaluate the variational influence of one tracked function.
#[derive(Debug, Clone)]
pub struct LinearResponseBundle {
    pub eta_star: Vec<f64>,
    pub kl_hessian: DMatrix<f64>,
    pub moment_jacobian: DVector<f64>,
    pub hessian_min_eigenvalue: f64,
    /// `H⁻¹ g_η`.
    pub response: DVector<f64>,
    pub prior: ContaminatedPrior,
    pub prior_coords: Vec<usize>,
    marginal: MarginalScore,
}

impl LinearResponseBundle {
    pub fn new(
        model: &dyn Model,
        prior: &ContaminatedPrior,
        state: &VariationalState,
        g: &Functional,
        policy: &ExpectationPolicy,
    ) -> Result<Self> {
        let h = kl_hessian(state, model, prior, policy)?;
        Self::from_hessian(state, prior, &model.prior_coords(), h, g, policy)
    }

    /// Reuse a KL Hessian across tracked functions.
    pub fn from_hessian(
        state: &VariationalState,
        prior: &ContaminatedPrior,
        prior_coords: &[usize],
        kl_hessian: DMatrix<f64>,
        g: &Functional,
        policy: &ExpectationPolicy,
    ) -> Result<Self> {
        let n = state.family.dim_eta();
        if kl_hessian.nrows() != n || kl_hessian.ncols() != n {
            return Err(Error::Dimension { expected: n, got: kl_hessian.nrows() });
        }
        if prior_coords.len() != prior.dim() {
            return Err(Error::Dimension { expected: prior_coords.len(), got: prior.dim() });
        }
        let min = min_eigenvalue(&kl_hessian);
        let chol = kl_hessian.clone().cholesky().ok_or(Error::IllConditioned { min_eigenvalue: min })?;
        if !(min > MIN_EIGENVALUE) {
            return Err(Error::IllConditioned { min_eigenvalue: min });
        }
        let (_, jac) = moment_with_jacobian(state, g, policy)?;
        let response = chol.solve(&jac);
        Ok(Self {
            eta_star: state.eta.clone(),
            kl_hessian,
            moment_jacobian: jac,
            hessian_min_eigenvalue: min,
            response,
            prior: prior.clone(),
            prior_coords: prior_coords.to_vec(),
            marginal: MarginalScore::new(state, prior_coords)?,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.prior.epsilon
    }

    /// `‖H (H⁻¹g_η) − g_η‖∞`.
    pub fn solve_residual(&self) -> f64 {
        (&self.kl_hessian * &self.response - &self.moment_jacobian).amax()
    }

    /// Variational influence at a point of the prior block:
    /// `q(θ)/p(θ|ε) · ∂log q/∂ηᵀ H⁻¹ g_η / (1 − ε)`, so that its integral
    /// against `p_c` is the ε-derivative of `E_q[g]`.
    pub fn influence(&self, theta: &[f64]) -> Result<InfluenceValue> {
        let eps = self.prior.epsilon;
        if eps >= 1.0 {
            return Err(Error::Domain("influence against p_c is undefined at epsilon = 1".into()));
        }
        let log_q = self.marginal.log_density(theta)?;
        let log_p = self.prior.log_mixture(theta)?;
        if log_p == f64::NEG_INFINITY {
            return Err(Error::PriorPositivity { point: theta.to_vec() });
        }
        let (ratio, saturated) = clamped_exp(log_q - log_p);
        if ratio == 0.0 {
            return Ok(InfluenceValue { value: 0.0, saturated });
        }
        let score = self.marginal.score(theta)?;
        let dot: f64 = score.iter().zip(self.response.iter()).map(|(a, b)| a * b).sum();
        Ok(InfluenceValue { value: ratio * dot / (1.0 - eps), saturated })
    }
}

pub fn influence_vb(bundle: &LinearResponseBundle, theta: &[f64]) -> Result<InfluenceValue> {
    bundle.influence(theta)
}

/// Importance-sampled `∫ I^q(θ) p_c(θ) dθ`.
pub fn sensitivity_vb(
    bundle: &LinearResponseBundle,
    pc: &DensityKernel,
    sampler: &ImportanceSampler,
) -> Result<Estimate> {
    Ok(vb_importance_sensitivity(bundle, pc, sampler)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NormalLocation;
    use crate::variational::{fit, FitOptions, VariationalFamily};
    use proptest::prelude::*;

    fn gaussian_target() -> (NormalLocation, ContaminatedPrior) {
        // Prior N(0, 2) and one observation at 0 with noise variance 2 give N(0, 1).
        let model = NormalLocation::scalar(&[0.0], 2.0).unwrap();
        let prior = ContaminatedPrior::new(
            DensityKernel::normal(0.0, 2.0).unwrap(),
            DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(),
            0.0,
        )
        .unwrap();
        (model, prior)
    }

    #[test]
    fn hessian_of_standard_normal_target() {
        let (model, prior) = gaussian_target();
        let state = fit(&model, &prior, &VariationalFamily::mean_field(1), &FitOptions::default()).unwrap();
        let h = kl_hessian(&state, &model, &prior, &ExpectationPolicy::default()).unwrap();
        assert!((h[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((h[(1, 1)] - 2.0).abs() < 1e-8);
        assert!(h[(0, 1)].abs() < 1e-8);
        let objective = Objective::new(&model, &prior, &state.family, &ExpectationPolicy::default()).unwrap();
        let fd = kl_hessian_fd(&objective, &state.eta, FD_HESSIAN_STEP).unwrap();
        assert!((fd - &h).amax() < 1e-8);
    }

    #[test]
    fn unconverged_state_is_rejected() {
        let (model, prior) = gaussian_target();
        let state = VariationalState::new(VariationalFamily::mean_field(1), vec![0.0, 0.0]).unwrap();
        assert!(matches!(kl_hessian(&state, &model, &prior, &ExpectationPolicy::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn jacobians_of_first_and_second_moments() {
        let family = VariationalFamily::mean_field(1);
        let m: f64 = 0.7;
        let s: f64 = 1.3;
        let state = VariationalState::new(family, vec![m, s.ln()]).unwrap();
        let j1 = moment_jacobian(&state, &Functional::Coordinate(0)).unwrap();
        assert_eq!(j1.as_slice(), &[1.0, 0.0]);
        let j2 = moment_jacobian(&state, &Functional::Square(0)).unwrap();
        assert!((j2[0] - 2.0 * m).abs() < 1e-14);
        assert!((j2[1] - 2.0 * s * s).abs() < 1e-12);
    }

    fn fd_jacobian(state: &VariationalState, g: &Functional) -> DVector<f64> {
        let p = ExpectationPolicy::default();
        let h = 1e-5;
        DVector::from_fn(state.eta.len(), |j, _| {
            let mut up = state.clone();
            let mut dn = state.clone();
            up.eta[j] += h;
            dn.eta[j] -= h;
            (moment_with_jacobian(&up, g, &p).unwrap().0 - moment_with_jacobian(&dn, g, &p).unwrap().0) / (2.0 * h)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn jacobian_matches_finite_differences(
            eta in proptest::collection::vec(-0.8f64..0.8, 7)
        ) {
            let family = VariationalFamily::blockwise(3, vec![vec![0, 1], vec![2]]).unwrap();
            let state = VariationalState::new(family, eta).unwrap();
            let cubic = Functional::custom(
                vec![0, 1],
                |t| t[0].powi(3) + t[0] * t[1].sin(),
                |t| vec![3.0 * t[0] * t[0] + t[1].sin(), t[0] * t[1].cos(), 0.0],
            );
            let gs = [
                Functional::Square(1),
                Functional::Linear { coefficients: vec![0.5, -1.0, 2.0], offset: 1.0 },
                Functional::combine(2.0, Functional::Square(2), -1.0, Functional::Coordinate(0)),
                cubic,
            ];
            for g in &gs {
                let a = moment_jacobian(&state, g).unwrap();
                let b = fd_jacobian(&state, g);
                prop_assert!((a - b).amax() < 1e-6, "{:?}", g);
            }
        }
    }
}
