//! Random-walk Metropolis, self-normalized reweighting of posterior draws
//! across ε, and importance sampling of influence functions from a widened
//! variational proposal.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::densities::{ContaminatedPrior, DensityKernel};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::linear_response::LinearResponseBundle;
use crate::models::{check_prior, Model};
use crate::stats::{batch_means_se, effective_sample_size};
use crate::variational::VariationalState;

/// Below this effective sample size estimates are refused.
pub const ESS_FLOOR: f64 = 10.0;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
pub const DEFAULT_INFLATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub draws: Vec<Vec<f64>>,
    pub log_posterior_values: Vec<f64>,
    pub seed: u64,
    pub acceptance_rate: f64,
    /// Coordinates of each draw the prior applies to.
    pub prior_coords: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn values(&self, g: &Functional) -> Vec<f64> {
        self.draws.iter().map(|t| g.value(t)).collect()
    }

    /// Sample mean of `g` with a 50-batch batch-means standard error.
    pub fn mean_and_se(&self, g: &Functional) -> (f64, f64) {
        let v = self.values(g);
        (crate::stats::mean(&v), batch_means_se(&v, 50))
    }

    fn prior_block(&self, i: usize) -> Vec<f64> {
        self.prior_coords.iter().map(|&c| self.draws[i][c]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetropolisConfig {
    /// Draws kept after burn-in and thinning.
    pub draws: usize,
    pub burn_in: usize,
    /// Steps between proposal updates during burn-in.
    pub adaptation_window: usize,
    pub thin: usize,
    pub seed: u64,
    pub initial: Option<Vec<f64>>,
    pub initial_scale: Option<Vec<f64>>,
    /// Starting proposal shape, e.g. a fitted q's covariance; adaptation continues from it.
    pub proposal_covariance: Option<Vec<Vec<f64>>>,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        Self {
            draws: 50_000,
            burn_in: 50_000,
            adaptation_window: 500,
            thin: 1,
            seed: 0,
            initial: None,
            initial_scale: None,
            proposal_covariance: None,
        }
    }
}

/// Sample the posterior of `model` under `prior`.
pub fn metropolis(model: &dyn Model, prior: &ContaminatedPrior, config: &MetropolisConfig) -> Result<SampleSet> {
    check_prior(model, prior)?;
    let (center, scale) = model.reference_point();
    let start = config.initial.clone().unwrap_or(center);
    let scale = config.initial_scale.clone().unwrap_or(scale);
    let target = |t: &[f64]| model.log_joint(prior, t).unwrap_or(f64::NEG_INFINITY);
    let mut set = metropolis_target(&target, start, &scale, config)?;
    set.prior_coords = model.prior_coords();
    Ok(set)
}

/// Gaussian random-walk Metropolis on an arbitrary log density. The proposal
/// covariance tracks the burn-in draws and is frozen afterwards.
pub fn metropolis_target(
    log_target: &dyn Fn(&[f64]) -> f64,
    start: Vec<f64>,
    scale: &[f64],
    config: &MetropolisConfig,
) -> Result<SampleSet> {
    let d = start.len();
    if scale.len() != d {
        return Err(Error::Dimension { expected: d, got: scale.len() });
    }
    if config.draws == 0 || config.thin == 0 || config.adaptation_window == 0 {
        return Err(Error::Validation("draws, thin and adaptation_window must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = DVector::from_vec(start);
    let mut lp = log_target(x.as_slice());
    if !lp.is_finite() {
        return Err(Error::Sampler(format!("log density is not finite at the start {:?}", x.as_slice())));
    }
    let base = 2.38 / (d as f64).sqrt();
    let goal = 0.234 + 0.206 / d as f64;
    let mut chol = match &config.proposal_covariance {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Dimension { expected: d, got: rows.len() });
            }
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
                .cholesky()
                .ok_or_else(|| Error::Validation("proposal covariance is not positive definite".into()))?
                .l()
        }
        None => DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| scale[i].abs().max(1e-8))),
    };
    let mut log_s = 0.0f64;

    let mut history: Vec<DVector<f64>> = Vec::with_capacity(config.burn_in);
    let mut window_accepts = 0usize;
    let mut accepts = 0usize;
    let total = config.burn_in + config.draws * config.thin;
    let mut draws = Vec::with_capacity(config.draws);
    let mut values = Vec::with_capacity(config.draws);

    for step in 0..total {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x + &chol * z * (base * log_s.exp());
        let lq = log_target(y.as_slice());
        let u: f64 = rng.random();
        let accept = lq.is_finite() && u.ln() < lq - lp;
        if accept {
            x = y;
            lp = lq;
        }
        if step < config.burn_in {
            window_accepts += accept as usize;
            history.push(x.clone());
            if (step + 1) % config.adaptation_window == 0 {
                let rate = window_accepts as f64 / config.adaptation_window as f64;
                log_s += rate - goal;
                window_accepts = 0;
                // Covariance of the later half of burn-in so far.
                let recent = &history[history.len() / 2..];
                if recent.len() > 2 * d + 10 {
                    let n = recent.len() as f64;
                    let mean = recent.iter().fold(DVector::zeros(d), |a, v| a + v) / n;
                    let mut cov = DMatrix::zeros(d, d);
                    for v in recent {
                        let c = v - &mean;
                        cov += &c * c.transpose();
                    }
                    cov /= n - 1.0;
                    let jitter = 1e-10 * cov.diagonal().amax().max(1e-300);
                    for i in 0..d {
                        cov[(i, i)] += jitter;
                    }
                    if let Some(c) = cov.cholesky() {
                        if c.l().diagonal().iter().all(|v| *v > 0.0) {
                            chol = c.l();
                            log_s = log_s.min(1.0);
                        }
                    }
                }
            }
        } else {
            accepts += accept as usize;
            if (step - config.burn_in + 1).is_multiple_of(config.thin) {
                draws.push(x.iter().copied().collect());
                values.push(lp);
            }
        }
    }
    let acceptance_rate = accepts as f64 / (config.draws * config.thin) as f64;
    if accepts == 0 {
        return Err(Error::Sampler("no proposal accepted after adaptation".into()));
    }
    if !(0.1..=0.6).contains(&acceptance_rate) {
        warn!("acceptance rate {acceptance_rate:.3} outside [0.1, 0.6]");
    }
    Ok(SampleSet {
        draws,
        log_posterior_values: values,
        seed: config.seed,
        acceptance_rate,
        prior_coords: (0..d).collect(),
    })
}

/// Point estimate with a Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
    pub ess: f64,
    /// Draws whose influence value hit the exponent clamp.
    pub saturated: usize,
}

fn check_ess(ess: f64, n: usize) -> Result<()> {
    if !(ess >= ESS_FLOOR) {
        return Err(Error::Unreliable { ess, threshold: ESS_FLOOR });
    }
    if ess < n as f64 / 100.0 {
        warn!("effective sample size {ess:.1} is below 1% of {n} draws");
    }
    Ok(())
}

/// Per-draw `log p₀`, `log p_c` on the prior block.
fn component_logs(samples: &SampleSet, prior: &ContaminatedPrior) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Validation("empty sample set".into()));
    }
    if samples.prior_coords.len() != prior.dim() {
        return Err(Error::Dimension { expected: samples.prior_coords.len(), got: prior.dim() });
    }
    Ok((0..samples.len())
        .map(|i| {
            let t = samples.prior_block(i);
            (prior.p0.log_density(&t), prior.pc.log_density(&t))
        })
        .collect())
}

/// Self-normalized weights `ω̃ ∝ p(θ|ε)/p₀(θ)`.
fn normalized_weights(logs: &[(f64, f64)], prior: &ContaminatedPrior) -> Result<Vec<f64>> {
    let lw: Vec<f64> = logs.iter().map(|&(a, b)| prior.log_mixture_from(a, b) - a).collect();
    if let Some(i) = lw.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Divergent { detail: format!("weight undefined at draw {i}"), partial: f64::NAN });
    }
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Unreliable { ess: 0.0, threshold: ESS_FLOOR });
    }
    let w: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Self-normalized estimate of `E_{p_ε^x}[g]` from draws of the ε = 0
/// posterior, with a bootstrap standard error.
pub fn is_reweight(samples: &SampleSet, prior: &ContaminatedPrior, g: &Functional) -> Result<Estimate> {
    let logs = component_logs(samples, prior)?;
    let w = normalized_weights(&logs, prior)?;
    let ess = effective_sample_size(&w);
    check_ess(ess, w.len())?;
    let gv = samples.values(g);
    let value: f64 = w.iter().zip(&gv).map(|(a, b)| a * b).sum();

    let n = w.len();
    let mut rng = ChaCha8Rng::seed_from_u64(samples.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            num += w[i] * gv[i];
            den += w[i];
        }
        boots.push(num / den);
    }
    Ok(Estimate { value, standard_error: crate::stats::variance(&boots).sqrt(), ess, saturated: 0 })
}

fn weights_and_slopes(samples: &SampleSet, prior: &ContaminatedPrior) -> Result<(Vec<f64>, Vec<f64>)> {
    let logs = component_logs(samples, prior)?;
    let w = normalized_weights(&logs, prior)?;
    let mut d = Vec::with_capacity(logs.len());
    for (i, &(a, b)) in logs.iter().enumerate() {
        match prior.dlog_deps_from(a, b) {
            Some(v) if v.is_finite() => d.push(v),
            _ => {
                return Err(Error::Divergent {
                    detail: format!("d log p(θ|ε)/dε overflows at draw {i}"),
                    partial: f64::NAN,
                })
            }
        }
    }
    Ok((w, d))
}

/// `Σᵢ (dω̃ᵢ/dε) g(θᵢ)`, the derivative of [`is_reweight`] in ε on fixed draws.
pub fn is_weight_derivative(samples: &SampleSet, prior: &ContaminatedPrior, g: &Functional) -> Result<f64> {
    if prior.is_trivial() {
        return Ok(0.0);
    }
    let (w, d) = weights_and_slopes(samples, prior)?;
    let d_bar: f64 = w.iter().zip(&d).map(|(a, b)| a * b).sum();
    Ok(samples.draws.iter().zip(w.iter().zip(&d)).map(|(t, (wi, di))| wi * (di - d_bar) * g.value(t)).sum())
}

/// Weighted covariance of `g` with `d log p(θ|ε)/dε` over the same draws.
pub fn plugin_covariance(samples: &SampleSet, prior: &ContaminatedPrior, g: &Functional) -> Result<f64> {
    let (w, d) = weights_and_slopes(samples, prior)?;
    let gv = samples.values(g);
    let egd: f64 = (0..w.len()).map(|i| w[i] * gv[i] * d[i]).sum();
    let eg: f64 = w.iter().zip(&gv).map(|(a, b)| a * b).sum();
    let ed: f64 = w.iter().zip(&d).map(|(a, b)| a * b).sum();
    Ok(egd - eg * ed)
}

/// Importance estimates for the full replacement of `p₀` by `p_c` when the
/// normalizing constants `C₀` and `C₁` are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnownConstantEstimate {
    /// `(1/N) Σ (C₀/C₁)(p_c/p₀)(θᵢ) g(θᵢ) − (1/N) Σ g(θᵢ)`.
    pub difference: f64,
    /// `(1/N) Σ ((p_c/p₀)(θᵢ) − C₁/C₀) g(θᵢ)`, the ε = 0 slope with the exact normalizer.
    pub slope_at_zero: f64,
    pub evidence_ratio: f64,
}

pub fn known_constant_estimates(
    samples: &SampleSet,
    prior: &ContaminatedPrior,
    g: &Functional,
    log_c0: f64,
    log_c1: f64,
) -> Result<KnownConstantEstimate> {
    let logs = component_logs(samples, prior)?;
    let gv = samples.values(g);
    let n = gv.len() as f64;
    let ratio_c1_c0 = (log_c1 - log_c0).exp();
    let (mut weighted, mut plain, mut slope) = (0.0, 0.0, 0.0);
    for (&(a, b), &gi) in logs.iter().zip(&gv) {
        let r = (b - a).exp();
        weighted += (b - a + log_c0 - log_c1).exp() * gi;
        plain += gi;
        slope += (r - ratio_c1_c0) * gi;
    }
    Ok(KnownConstantEstimate {
        difference: weighted / n - plain / n,
        slope_at_zero: slope / n,
        evidence_ratio: (log_c0 - log_c1).exp(),
    })
}

/// Importance sampler over the prior block, drawing from `u(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSampler {
    pub proposal: DensityKernel,
    pub draw_count: usize,
    pub seed: u64,
    pub variance_inflation: f64,
}

impl ImportanceSampler {
    pub fn new(proposal: DensityKernel, draw_count: usize, seed: u64) -> Result<Self> {
        if !proposal.is_normalized() {
            return Err(Error::Validation("importance proposal must be normalized".into()));
        }
        if draw_count == 0 {
            return Err(Error::Validation("draw count must be positive".into()));
        }
        Ok(Self { proposal, draw_count, seed, variance_inflation: 1.0 })
    }

    /// The fitted q marginal over `coords` with each block's covariance scaled by `variance_inflation`.
    pub fn from_state(
        state: &VariationalState,
        coords: &[usize],
        draw_count: usize,
        seed: u64,
        variance_inflation: f64,
    ) -> Result<Self> {
        if !(variance_inflation > 0.0) {
            return Err(Error::Validation(format!("variance inflation must be positive, got {variance_inflation}")));
        }
        let proposal = state.gaussian()?.marginal_kernel(coords, variance_inflation)?;
        let mut s = Self::new(proposal, draw_count, seed)?;
        s.variance_inflation = variance_inflation;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.proposal.dim()
    }

    pub fn draws(&self) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.draw_count).map(|_| self.proposal.sample(&mut rng)).collect()
    }

    /// Evaluate an influence function once per draw.
    pub fn cache<F>(&self, influence: F) -> Result<InfluenceCache>
    where
        F: Fn(&[f64]) -> Result<InfluenceValue>,
    {
        let draws = self.draws()?;
        let mut values = Vec::with_capacity(draws.len());
        let mut log_u = Vec::with_capacity(draws.len());
        let mut saturated = 0;
        for t in &draws {
            let v = influence(t)?;
            saturated += v.saturated as usize;
            values.push(v.value);
            log_u.push(self.proposal.log_density(t));
        }
        Ok(InfluenceCache { draws, log_proposal: log_u, influence: values, saturated })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceValue {
    pub value: f64,
    /// The density ratio hit the exponent clamp.
    pub saturated: bool,
}

/// Influence values at fixed proposal draws, reusable across contaminations.
#[derive(Debug, Clone)]
pub struct InfluenceCache {
    pub draws: Vec<Vec<f64>>,
    pub log_proposal: Vec<f64>,
    pub influence: Vec<f64>,
    pub saturated: usize,
}

/// Effect of dropping draws where the influence is small.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub full: f64,
    pub restricted: f64,
    /// Estimated `p_c` mass outside `{|I| > δ}`.
    pub outside_mass: f64,
    pub delta: f64,
}

impl InfluenceCache {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    fn weights<F: Fn(&[f64]) -> Result<f64>>(&self, log_target: F) -> Result<Vec<f64>> {
        self.draws
            .iter()
            .zip(&self.log_proposal)
            .map(|(t, lu)| {
                let lt = log_target(t)?;
                Ok(if lt == f64::NEG_INFINITY { 0.0 } else { (lt - lu).exp() })
            })
            .collect()
    }

    /// `(1/S) Σ I(θₛ) p_c(θₛ)/u(θₛ)` with its plain Monte Carlo standard error.
    pub fn estimate(&self, pc: &DensityKernel) -> Result<Estimate> {
        self.estimate_with(|t| Ok(pc.log_density(t)))
    }

    /// As [`estimate`](Self::estimate) for any (pseudo-)density given in log space.
    pub fn estimate_with<F: Fn(&[f64]) -> Result<f64>>(&self, log_target: F) -> Result<Estimate> {
        if self.is_empty() {
            return Err(Error::Validation("empty influence cache".into()));
        }
        let w = self.weights(log_target)?;
        let terms: Vec<f64> = w.iter().zip(&self.influence).map(|(a, b)| a * b).collect();
        if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
            let partial = terms[..i].iter().sum::<f64>() / self.len() as f64;
            return Err(Error::Divergent { detail: format!("non-finite term at draw {i}"), partial });
        }
        // Raw weights p_c/u have infinite variance for heavy-tailed p_c, while
        // the influence confines the integrand near q; judge the terms instead.
        let magnitudes: Vec<f64> = terms.iter().map(|t| t.abs()).collect();
        let ess =
            if magnitudes.iter().all(|m| *m == 0.0) { terms.len() as f64 } else { effective_sample_size(&magnitudes) };
        check_ess(ess, terms.len())?;
        let s = terms.len() as f64;
        let value = terms.iter().sum::<f64>() / s;
        let var = terms.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (s - 1.0).max(1.0);
        Ok(Estimate { value, standard_error: (var / s).sqrt(), ess, saturated: self.saturated })
    }

    /// Full estimate against the same sum restricted to `{|I| > δ}`.
    pub fn truncation(&self, pc: &DensityKernel, delta: f64) -> Result<Truncation> {
        let w = self.weights(|t| Ok(pc.log_density(t)))?;
        let s = self.len() as f64;
        let (mut full, mut restricted, mut outside) = (0.0, 0.0, 0.0);
        for (wi, ii) in w.iter().zip(&self.influence) {
            full += wi * ii;
            if ii.abs() > delta {
                restricted += wi * ii;
            } else {
                outside += wi;
            }
        }
        Ok(Truncation { full: full / s, restricted: restricted / s, outside_mass: outside / s, delta })
    }
}

/// `(1/S) Σ I^q(θₛ) p_c(θₛ)/u(θₛ)` with the per-draw influence values kept
/// for reuse against other contaminations.
pub fn vb_importance_sensitivity(
    bundle: &LinearResponseBundle,
    pc: &DensityKernel,
    sampler: &ImportanceSampler,
) -> Result<(Estimate, InfluenceCache)> {
    if sampler.dim() != bundle.prior_coords.len() {
        return Err(Error::Dimension { expected: bundle.prior_coords.len(), got: sampler.dim() });
    }
    let cache = sampler.cache(|t| bundle.influence(t))?;
    Ok((cache.estimate(pc)?, cache))
}
