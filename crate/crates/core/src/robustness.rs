//! Sensitivity of posterior expectations to ε-contamination of the prior:
//! the covariance form of the local slope, the influence function, the
//! evidence-ratio link to full replacement, the slope bound, and the
//! mean-value extrapolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{pmv_from_logs, ContaminatedPrior};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::linear_response::{moment_with_jacobian, LinearResponseBundle};
use crate::oracle::{posterior_quadrature, QuadraturePosterior};
use crate::sampling::{plugin_covariance, Estimate, ImportanceSampler, InfluenceCache, SampleSet};
use crate::variational::{ExpectationPolicy, VariationalState};

/// Draws used for expectations under a variational posterior that have no closed form.
pub const VB_EXPECTATION_DRAWS: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Quadrature,
    Mcmc,
    Vb,
}

/// A variational posterior with fixed draws for Monte Carlo expectations.
#[derive(Debug, Clone)]
pub struct VbPosterior {
    pub state: VariationalState,
    pub prior_coords: Vec<usize>,
    draws: Vec<Vec<f64>>,
}

impl VbPosterior {
    pub fn new(state: VariationalState, prior_coords: Vec<usize>, seed: u64) -> Result<Self> {
        let q = state.gaussian()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..VB_EXPECTATION_DRAWS).map(|_| q.sample(&mut rng)).collect();
        Ok(Self { state, prior_coords, draws })
    }
}

/// A posterior `p_ε^x` that can at least compute expectations.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum PosteriorHandle<'a> {
    Quadrature(QuadraturePosterior<'a>),
    Mcmc(SampleSet),
    Vb(VbPosterior),
}

fn block(theta: &[f64], coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&c| theta[c]).collect()
}

impl PosteriorHandle<'_> {
    pub fn kind(&self) -> PosteriorKind {
        match self {
            Self::Quadrature(_) => PosteriorKind::Quadrature,
            Self::Mcmc(_) => PosteriorKind::Mcmc,
            Self::Vb(_) => PosteriorKind::Vb,
        }
    }

    pub fn expectation(&self, g: &Functional) -> Result<f64> {
        match self {
            Self::Quadrature(p) => p.expectation(g),
            Self::Mcmc(s) => Ok(crate::stats::mean(&s.values(g))),
            Self::Vb(v) => Ok(moment_with_jacobian(&v.state, g, &ExpectationPolicy::default())?.0),
        }
    }

    /// `E[f(θ)]`; Monte Carlo for the sample-based kinds.
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<f64> {
        match self {
            Self::Quadrature(p) => p.expect(f),
            Self::Mcmc(s) => Ok(s.draws.iter().map(|t| f(t)).sum::<f64>() / s.len() as f64),
            Self::Vb(v) => Ok(v.draws.iter().map(|t| f(t)).sum::<f64>() / v.draws.len() as f64),
        }
    }

    pub fn density(&self, theta: &[f64]) -> Result<f64> {
        match self {
            Self::Quadrature(p) => Ok(p.log_density(theta)?.exp()),
            Self::Mcmc(_) => Err(Error::Unsupported("sample-based posteriors have no density".into())),
            Self::Vb(v) => Ok(v.state.log_density(theta)?.exp()),
        }
    }
}

fn finite_or_divergent(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergent { detail: format!("{what} is not finite"), partial: value })
    }
}

/// `Cov_{p_ε^x}(g, d log p(θ|ε)/dε)`, the local slope `dE[g]/dε`.
pub fn sensitivity_exact(post: &PosteriorHandle, prior: &ContaminatedPrior, g: &Functional) -> Result<f64> {
    if prior.is_trivial() {
        return Ok(0.0);
    }
    match post {
        PosteriorHandle::Quadrature(p) => {
            // p_ε^x · (p_c − p₀)/p(θ|ε) = p(x|θ)(p_c − p₀)/C_ε, free of the ratio's overflow.
            let mean = p.expectation(g)?;
            let model = p.model();
            let log_c = p.log_normalizer();
            let s = p.integrate(|t| {
                let lr = model.log_rest(t) - log_c;
                (g.value(t) - mean) * ((lr + prior.pc.log_density(t)).exp() - (lr + prior.p0.log_density(t)).exp())
            })?;
            finite_or_divergent(s, "covariance")
        }
        PosteriorHandle::Mcmc(s) => finite_or_divergent(plugin_covariance(s, prior, g)?, "covariance"),
        PosteriorHandle::Vb(v) => {
            let mean = post.expectation(g)?;
            let mut acc = 0.0;
            for (i, t) in v.draws.iter().enumerate() {
                let d = prior.dlog_mixture_deps(&block(t, &v.prior_coords))?;
                let term = (g.value(t) - mean) * d;
                if !term.is_finite() {
                    return Err(Error::Divergent {
                        detail: format!("ratio term overflows at draw {i}"),
                        partial: acc / i.max(1) as f64,
                    });
                }
                acc += term;
            }
            Ok(acc / v.draws.len() as f64)
        }
    }
}

/// Influence function of the exact posterior for one tracked function:
/// `p_ε^x(θ)/p(θ|ε) · (g(θ) − E[g]) / (1 − ε)`, so that integrating it
/// against `p_c` gives the local slope.
#[derive(Debug, Clone)]
pub struct ExactInfluence<'p, 'a> {
    posterior: &'p QuadraturePosterior<'a>,
    g: Functional,
    mean: f64,
}

impl<'p, 'a> ExactInfluence<'p, 'a> {
    pub fn new(posterior: &'p QuadraturePosterior<'a>, g: &Functional) -> Result<Self> {
        if posterior.epsilon() >= 1.0 {
            return Err(Error::Domain("influence against p_c is undefined at epsilon = 1".into()));
        }
        Ok(Self { posterior, g: g.clone(), mean: posterior.expectation(g)? })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let lr = self.posterior.log_likelihood_ratio(theta);
        lr.exp() * (self.g.value(theta) - self.mean) / (1.0 - self.posterior.epsilon())
    }

    /// `∫ I(θ) exp(log_density(θ)) dθ`, evaluated on the posterior's windows.
    pub fn integrate_against<F: Fn(&[f64]) -> f64>(&self, log_density: F) -> Result<f64> {
        let eps = self.posterior.epsilon();
        self.posterior.integrate(|t| {
            let lp = log_density(t);
            if lp == f64::NEG_INFINITY {
                return 0.0;
            }
            (self.posterior.log_likelihood_ratio(t) + lp).exp() * (self.g.value(t) - self.mean) / (1.0 - eps)
        })
    }
}

/// Pointwise exact influence. Each call recomputes `E[g]`; build an
/// [`ExactInfluence`] to evaluate many points.
pub fn influence_exact(post: &PosteriorHandle, g: &Functional, theta: &[f64]) -> Result<f64> {
    match post {
        PosteriorHandle::Quadrature(p) => Ok(ExactInfluence::new(p, g)?.value(theta)),
        PosteriorHandle::Mcmc(_) => {
            Err(Error::Unsupported("influence needs a posterior density; use importance reweighting of draws".into()))
        }
        PosteriorHandle::Vb(_) => Err(Error::Unsupported(
            "the influence of a variational posterior comes from the linear response bundle".into(),
        )),
    }
}

/// Full replacement `Δ = E₁[g] − E₀[g]` next to the evidence ratio `C₀/C₁`
/// and the local slope at ε = 0, which satisfy `Δ = (C₀/C₁)·S₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRelation {
    pub delta: f64,
    pub ratio: f64,
    pub slope_at_zero: f64,
    pub log_c0: f64,
    pub log_c1: f64,
}

pub fn evidence_ratio_relation(
    post0: &PosteriorHandle,
    prior: &ContaminatedPrior,
    g: &Functional,
) -> Result<EvidenceRelation> {
    let PosteriorHandle::Quadrature(p0) = post0 else {
        return Err(Error::Unsupported("evidence ratio needs normalizing constants from quadrature".into()));
    };
    if p0.epsilon() != 0.0 {
        return Err(Error::Validation(format!("base posterior must be at epsilon 0, got {}", p0.epsilon())));
    }
    let at_zero = prior.with_epsilon(0.0)?;
    let p1 = posterior_quadrature(p0.model(), &prior.with_epsilon(1.0)?)?;
    let (log_c0, log_c1) = (p0.log_normalizer(), p1.log_normalizer());
    if !log_c0.is_finite() || !log_c1.is_finite() {
        return Err(Error::Numerical(format!("normalizing constants underflow (log C0 {log_c0}, log C1 {log_c1})")));
    }
    let slope_at_zero = sensitivity_exact(post0, &at_zero, g)?;
    Ok(EvidenceRelation {
        delta: p1.expectation(g)? - p0.expectation(g)?,
        ratio: (log_c0 - log_c1).exp(),
        slope_at_zero,
        log_c0,
        log_c1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    /// `max(1/ε, 1/(1−ε)) · E|g − E g|`; infinite at ε ∈ {0, 1}.
    pub value: f64,
    pub vacuous: bool,
    pub mean_absolute_deviation: f64,
}

pub fn sensitivity_bound(post: &PosteriorHandle, g: &Functional, epsilon: f64) -> Result<SensitivityBound> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Validation(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let mean = post.expectation(g)?;
    let mad = post.expect(|t| (g.value(t) - mean).abs())?;
    if epsilon == 0.0 || epsilon == 1.0 {
        return Ok(SensitivityBound { value: f64::INFINITY, vacuous: true, mean_absolute_deviation: mad });
    }
    let factor = (1.0 / epsilon).max(1.0 / (1.0 - epsilon));
    Ok(SensitivityBound { value: factor * mad, vacuous: false, mean_absolute_deviation: mad })
}

/// Where the ε = 0 influence comes from.
pub enum InfluenceSource<'s, 'a> {
    Exact { posterior: &'s QuadraturePosterior<'a>, g: &'s Functional },
    Vb { bundle: &'s LinearResponseBundle, sampler: &'s ImportanceSampler },
}

/// Mean-value extrapolation `∫ I₀(θ) p_mv(θ) dθ` of the full replacement of
/// `p₀` by `p_c`.
pub fn sensitivity_mv(source: &InfluenceSource, prior: &ContaminatedPrior) -> Result<Estimate> {
    match source {
        InfluenceSource::Exact { posterior, g } => {
            if posterior.epsilon() != 0.0 {
                return Err(Error::Validation("mean-value extrapolation starts from the epsilon 0 posterior".into()));
            }
            if prior.is_trivial() {
                return Ok(Estimate { value: 0.0, standard_error: 0.0, ess: f64::INFINITY, saturated: 0 });
            }
            let influence = ExactInfluence::new(posterior, g)?;
            let value = influence.integrate_against(|t| {
                pmv_from_logs(prior.p0.log_density(t), prior.pc.log_density(t)).map_or(f64::NAN, |p| p.log_value)
            })?;
            let value = finite_or_divergent(value, "mean-value integral")?;
            Ok(Estimate { value, standard_error: 0.0, ess: f64::INFINITY, saturated: 0 })
        }
        InfluenceSource::Vb { bundle, sampler } => {
            if bundle.epsilon() != 0.0 {
                return Err(Error::Validation("mean-value extrapolation starts from the epsilon 0 fit".into()));
            }
            let cache = sampler.cache(|t| bundle.influence(t))?;
            sensitivity_mv_cached(&cache, prior)
        }
    }
}

/// Mean-value extrapolation from influence values already evaluated at importance draws.
pub fn sensitivity_mv_cached(cache: &InfluenceCache, prior: &ContaminatedPrior) -> Result<Estimate> {
    cache.estimate_with(|t| prior.pmv_density(t).map(|p| p.log_value))
}

/// Standard errors attached to a [`SensitivityReport`]; zero for quadrature values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub s_local: f64,
    pub s_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub epsilon: f64,
    pub s_local: f64,
    pub s_mv: f64,
    pub s_bound: f64,
    pub bound_vacuous: bool,
    pub delta_refit: Option<f64>,
    pub evidence_ratio: Option<f64>,
    pub standard_errors: StandardErrors,
}

impl SensitivityReport {
    /// All measures by quadrature for a model of dimension at most two.
    pub fn exact(model: &dyn crate::models::Model, prior: &ContaminatedPrior, g: &Functional) -> Result<Self> {
        let post_eps = PosteriorHandle::Quadrature(posterior_quadrature(model, prior)?);
        let s_local = sensitivity_exact(&post_eps, prior, g)?;
        let bound = sensitivity_bound(&post_eps, g, prior.epsilon)?;
        let q0 = posterior_quadrature(model, &prior.with_epsilon(0.0)?)?;
        let s_mv = sensitivity_mv(&InfluenceSource::Exact { posterior: &q0, g }, prior)?.value;
        let rel = evidence_ratio_relation(&PosteriorHandle::Quadrature(q0), prior, g)?;
        Ok(Self {
            epsilon: prior.epsilon,
            s_local,
            s_mv,
            s_bound: bound.value,
            bound_vacuous: bound.vacuous,
            delta_refit: Some(rel.delta),
            evidence_ratio: Some(rel.ratio),
            standard_errors: StandardErrors::default(),
        })
    }

    /// `|s_local| ≤ s_bound` whenever the bound is informative.
    pub fn is_consistent(&self) -> bool {
        self.bound_vacuous || self.s_local.abs() <= self.s_bound * (1.0 + 1e-9)
    }
}
