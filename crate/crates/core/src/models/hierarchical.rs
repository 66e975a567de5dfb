//! Site-effects model:
//!
//! ```text
//! y_ik | μ_k, σ_k² ~ N(μ_k1 + μ_k2 T_ik, σ_k²)
//! μ_k | μ         ~ N(μ, C)        C fixed
//! σ_k²            ~ InverseGamma(α, β)
//! μ               ~ (1 − ε) p₀ + ε p_c
//! ```
//!
//! Packed parameter order: `(μ, μ_1, …, μ_K, log σ_1², …, log σ_K²)`. The
//! fixed-noise variant drops the trailing block.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{Model, SmoothFunction, Term};
use crate::densities::{ContaminatedPrior, DensityKernel};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_SITE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalTruth {
    pub mu: [f64; 2],
    pub site_covariance: [[f64; 2]; 2],
    pub noise_variance: f64,
}

impl Default for HierarchicalTruth {
    fn default() -> Self {
        Self { mu: [12.0, 12.0], site_covariance: [[1.0, 0.3], [0.3, 0.5]], noise_variance: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPriors {
    /// Diagonal precision of the Gaussian base prior on μ.
    pub mu_precision: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    /// Degrees of freedom of the Student-t contamination.
    pub nu: f64,
}

impl Default for HierarchicalPriors {
    fn default() -> Self {
        Self { mu_precision: 0.111, sigma_alpha: 2.010, sigma_beta: 2.010, nu: 1.0 }
    }
}

impl HierarchicalPriors {
    pub fn base(&self) -> Result<DensityKernel> {
        let v = 1.0 / self.mu_precision;
        DensityKernel::product(vec![DensityKernel::normal(0.0, v)?, DensityKernel::normal(0.0, v)?])
    }

    /// Product of two centered Student-t densities.
    pub fn student_contamination(nu: f64, scale: f64) -> Result<DensityKernel> {
        DensityKernel::product(vec![
            DensityKernel::student_t(0.0, scale, nu)?,
            DensityKernel::student_t(0.0, scale, nu)?,
        ])
    }

    pub fn contaminated(&self, epsilon: f64) -> Result<ContaminatedPrior> {
        ContaminatedPrior::new(self.base()?, Self::student_contamination(self.nu, 1.0)?, epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub treatment: Vec<bool>,
    pub profit: Vec<f64>,
}

/// Sufficient statistics of one site's regression on `(1, T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteStats {
    pub n: f64,
    pub n_treated: f64,
    pub sum_y: f64,
    pub sum_ty: f64,
    pub sum_yy: f64,
}

impl SiteStats {
    /// Residual sum of squares at intercept `a` and effect `b`.
    pub fn rss(&self, a: f64, b: f64) -> f64 {
        self.sum_yy - 2.0 * a * self.sum_y - 2.0 * b * self.sum_ty
            + self.n * a * a
            + 2.0 * a * b * self.n_treated
            + self.n_treated * b * b
    }
}

impl Site {
    pub fn len(&self) -> usize {
        self.profit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profit.is_empty()
    }

    pub fn stats(&self) -> SiteStats {
        let mut s = SiteStats { n: 0.0, n_treated: 0.0, sum_y: 0.0, sum_ty: 0.0, sum_yy: 0.0 };
        for (&t, &y) in self.treatment.iter().zip(&self.profit) {
            s.n += 1.0;
            s.sum_y += y;
            s.sum_yy += y * y;
            if t {
                s.n_treated += 1.0;
                s.sum_ty += y;
            }
        }
        s
    }

    /// Least-squares `(intercept, effect)`.
    pub fn ols(&self) -> Result<[f64; 2]> {
        let s = self.stats();
        let n0 = s.n - s.n_treated;
        if s.n_treated == 0.0 || n0 == 0.0 {
            return Err(Error::Validation("site needs treated and untreated units".into()));
        }
        let a = (s.sum_y - s.sum_ty) / n0;
        Ok([a, s.sum_ty / s.n_treated - a])
    }

    fn validate(&self) -> Result<()> {
        if self.treatment.len() != self.profit.len() {
            return Err(Error::Validation("treatment and profit lengths differ".into()));
        }
        if self.profit.iter().any(|y| !y.is_finite()) {
            return Err(Error::Validation("non-finite profit".into()));
        }
        self.ols().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteData {
    pub sites: Vec<Site>,
}

impl SiteData {
    pub fn total_observations(&self) -> usize {
        self.sites.iter().map(Site::len).sum()
    }
}

fn chol2(m: &[[f64; 2]; 2]) -> Result<Matrix2<f64>> {
    let mat = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    if (m[0][1] - m[1][0]).abs() > 1e-12 {
        return Err(Error::Validation("site covariance must be symmetric".into()));
    }
    mat.cholesky().map(|c| c.l()).ok_or_else(|| Error::Validation("site covariance must be positive definite".into()))
}

/// Draw a dataset with `sites` sites and `total` observations spread evenly.
pub fn simulate(truth: &HierarchicalTruth, sites: usize, total: usize, seed: u64) -> Result<SiteData> {
    if sites == 0 || total < 2 * sites {
        return Err(Error::Validation(format!(
            "need at least two observations per site, got {total} for {sites} sites"
        )));
    }
    if !(truth.noise_variance > 0.0) {
        return Err(Error::Validation("noise variance must be > 0".into()));
    }
    let l = chol2(&truth.site_covariance)?;
    let sd = truth.noise_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sites);
    for k in 0..sites {
        let n = total / sites + usize::from(k < total % sites);
        let z = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
        let effect = [truth.mu[0] + l[(0, 0)] * z[0], truth.mu[1] + l[(1, 0)] * z[0] + l[(1, 1)] * z[1]];
        let mut treatment = None;
        for _ in 0..MAX_SITE_ATTEMPTS {
            let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if t.iter().any(|&x| x) && t.iter().any(|&x| !x) {
                treatment = Some(t);
                break;
            }
        }
        let treatment = treatment.ok_or_else(|| {
            Error::Validation(format!("site {k}: no mixed treatment assignment after {MAX_SITE_ATTEMPTS} draws"))
        })?;
        let profit = treatment
            .iter()
            .map(|&t| {
                let m = effect[0] + if t { effect[1] } else { 0.0 };
                m + sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        out.push(Site { treatment, profit });
    }
    Ok(SiteData { sites: out })
}

/// Site log-likelihood in `(intercept, effect, log σ²)`.
struct SiteLikelihood(SiteStats);

impl SmoothFunction for SiteLikelihood {
    fn dim(&self) -> usize {
        3
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s = &self.0;
        -0.5 * s.n * (LN_2PI + x[2]) - 0.5 * (-x[2]).exp() * s.rss(x[0], x[1])
    }

    fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> f64 {
        let s = &self.0;
        let (a, b) = (x[0], x[1]);
        let e = (-x[2]).exp();
        let r = s.rss(a, b);
        let ra = -2.0 * s.sum_y + 2.0 * s.n * a + 2.0 * b * s.n_treated;
        let rb = -2.0 * s.sum_ty + 2.0 * a * s.n_treated + 2.0 * b * s.n_treated;
        g[0] = -0.5 * e * ra;
        g[1] = -0.5 * e * rb;
        g[2] = -0.5 * s.n + 0.5 * e * r;
        let (haa, hab, hbb) = (-e * s.n, -e * s.n_treated, -e * s.n_treated);
        let (hal, hbl, hll) = (0.5 * e * ra, 0.5 * e * rb, -0.5 * e * r);
        h.copy_from_slice(&[haa, hab, hal, hab, hbb, hbl, hal, hbl, hll]);
        -0.5 * s.n * (LN_2PI + x[2]) - 0.5 * e * r
    }
}

/// Inverse-gamma prior on σ² expressed as a density on `λ = log σ²`.
struct LogInverseGamma {
    alpha: f64,
    beta: f64,
    log_norm: f64,
}

impl SmoothFunction for LogInverseGamma {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.log_norm - self.alpha * x[0] - self.beta * (-x[0]).exp()
    }

    fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> f64 {
        let e = self.beta * (-x[0]).exp();
        g[0] = -self.alpha + e;
        h[0] = -e;
        self.log_norm - self.alpha * x[0] - e
    }
}

#[derive(Debug, Clone)]
pub struct HierarchicalModel {
    data: SiteData,
    stats: Vec<SiteStats>,
    site_covariance: [[f64; 2]; 2],
    priors: HierarchicalPriors,
    fixed_noise: Option<Vec<f64>>,
    terms: Vec<Term>,
}

impl HierarchicalModel {
    pub fn new(data: SiteData, site_covariance: [[f64; 2]; 2], priors: HierarchicalPriors) -> Result<Self> {
        Self::build(data, site_covariance, priors, None)
    }

    /// Variant with known noise variances: every term is quadratic and the
    /// conditional posterior of the location parameters is Gaussian.
    pub fn with_fixed_noise(
        data: SiteData,
        site_covariance: [[f64; 2]; 2],
        priors: HierarchicalPriors,
        noise_variances: Vec<f64>,
    ) -> Result<Self> {
        if noise_variances.len() != data.sites.len() {
            return Err(Error::Dimension { expected: data.sites.len(), got: noise_variances.len() });
        }
        if noise_variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Validation("noise variances must be > 0".into()));
        }
        Self::build(data, site_covariance, priors, Some(noise_variances))
    }

    fn build(
        data: SiteData,
        site_covariance: [[f64; 2]; 2],
        priors: HierarchicalPriors,
        fixed_noise: Option<Vec<f64>>,
    ) -> Result<Self> {
        if data.sites.is_empty() {
            return Err(Error::Validation("no sites".into()));
        }
        for s in &data.sites {
            s.validate()?;
        }
        for (name, v) in [("alpha", priors.sigma_alpha), ("beta", priors.sigma_beta)] {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("inverse-gamma {name} must be > 0")));
            }
        }
        let l = chol2(&site_covariance)?;
        let cov = l * l.transpose();
        let p = cov.try_inverse().expect("positive definite");
        let log_det = 2.0 * (l[(0, 0)] * l[(1, 1)]).ln();
        let k = data.sites.len();
        let stats: Vec<SiteStats> = data.sites.iter().map(Site::stats).collect();

        let mut a = DMatrix::zeros(4, 4);
        for i in 0..2 {
            for j in 0..2 {
                a[(i, j)] = p[(i, j)];
                a[(i + 2, j + 2)] = p[(i, j)];
                a[(i, j + 2)] = -p[(i, j)];
                a[(i + 2, j)] = -p[(i, j)];
            }
        }
        let mut terms = Vec::with_capacity(3 * k);
        for site in 0..k {
            let (i0, i1) = (2 + 2 * site, 3 + 2 * site);
            terms.push(Term::Quadratic {
                coords: vec![0, 1, i0, i1],
                a: a.clone(),
                b: DVector::zeros(4),
                c: -LN_2PI - 0.5 * log_det,
            });
            let s = stats[site];
            match &fixed_noise {
                Some(v) => {
                    let e = 1.0 / v[site];
                    terms.push(Term::Quadratic {
                        coords: vec![i0, i1],
                        a: DMatrix::from_row_slice(2, 2, &[s.n, s.n_treated, s.n_treated, s.n_treated]) * e,
                        b: DVector::from_vec(vec![s.sum_y, s.sum_ty]) * e,
                        c: -0.5 * e * s.sum_yy - 0.5 * s.n * (LN_2PI + v[site].ln()),
                    });
                }
                None => {
                    let il = 2 + 2 * k + site;
                    terms.push(Term::Smooth { coords: vec![i0, i1, il], function: Arc::new(SiteLikelihood(s)) });
                    terms.push(Term::Smooth {
                        coords: vec![il],
                        function: Arc::new(LogInverseGamma {
                            alpha: priors.sigma_alpha,
                            beta: priors.sigma_beta,
                            log_norm: priors.sigma_alpha * priors.sigma_beta.ln() - ln_gamma(priors.sigma_alpha),
                        }),
                    });
                }
            }
        }
        Ok(Self { data, stats, site_covariance, priors, fixed_noise, terms })
    }

    pub fn sites(&self) -> usize {
        self.data.sites.len()
    }

    pub fn data(&self) -> &SiteData {
        &self.data
    }

    pub fn priors(&self) -> &HierarchicalPriors {
        &self.priors
    }

    pub fn site_covariance(&self) -> [[f64; 2]; 2] {
        self.site_covariance
    }

    pub fn has_fixed_noise(&self) -> bool {
        self.fixed_noise.is_some()
    }

    pub fn site_index(&self, site: usize) -> [usize; 2] {
        [2 + 2 * site, 3 + 2 * site]
    }

    /// Index of `log σ_k²`, absent in the fixed-noise variant.
    pub fn log_noise_index(&self, site: usize) -> Option<usize> {
        self.fixed_noise.is_none().then(|| 2 + 2 * self.sites() + site)
    }

    /// `log p(y | θ) + log p(θ | ε)` in natural coordinates (noise variances,
    /// not their logs). Returns `-inf` for a non-positive variance.
    pub fn log_joint_natural(
        &self,
        prior: &ContaminatedPrior,
        mu: [f64; 2],
        site_effects: &[[f64; 2]],
        noise_variances: &[f64],
    ) -> Result<f64> {
        let k = self.sites();
        if site_effects.len() != k || noise_variances.len() != k {
            return Err(Error::Dimension { expected: k, got: site_effects.len().min(noise_variances.len()) });
        }
        if noise_variances.iter().any(|v| *v <= 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        let c = &self.site_covariance;
        let site_prior = DensityKernel::mv_normal(
            DVector::from_column_slice(&mu),
            DMatrix::from_row_slice(2, 2, &[c[0][0], c[0][1], c[1][0], c[1][1]]),
        )?;
        let ig = DensityKernel::inverse_gamma(self.priors.sigma_alpha, self.priors.sigma_beta)?;
        let mut total = prior.log_mixture(&mu)?;
        for (site, (eff, &v)) in self.data.sites.iter().zip(site_effects.iter().zip(noise_variances)) {
            let noise =
                |t: bool| -> Result<DensityKernel> { DensityKernel::normal(eff[0] + if t { eff[1] } else { 0.0 }, v) };
            let (n0, n1) = (noise(false)?, noise(true)?);
            for (&t, &y) in site.treatment.iter().zip(&site.profit) {
                total += if t { n1.log_density(&[y]) } else { n0.log_density(&[y]) };
            }
            total += site_prior.log_density(eff);
            if self.fixed_noise.is_none() {
                total += ig.log_density(&[v]);
            }
        }
        Ok(total)
    }

    /// Pack natural parameters into θ.
    pub fn pack(&self, mu: [f64; 2], site_effects: &[[f64; 2]], noise_variances: &[f64]) -> Vec<f64> {
        let mut theta = mu.to_vec();
        for e in site_effects {
            theta.extend_from_slice(e);
        }
        if self.fixed_noise.is_none() {
            theta.extend(noise_variances.iter().map(|v| v.ln()));
        }
        theta
    }
}

impl Model for HierarchicalModel {
    fn dim(&self) -> usize {
        2 + 2 * self.sites() + if self.fixed_noise.is_some() { 0 } else { self.sites() }
    }

    fn prior_coords(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn reference_point(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.sites();
        let mut center = vec![0.0; self.dim()];
        let mut scale = vec![1.0; self.dim()];
        let mut sum = [0.0; 2];
        for (i, (site, s)) in self.data.sites.iter().zip(&self.stats).enumerate() {
            let ols = site.ols().expect("validated at construction");
            let resid = (s.rss(ols[0], ols[1]) / (s.n - 2.0).max(1.0)).max(1e-6);
            let [i0, i1] = self.site_index(i);
            center[i0] = ols[0];
            center[i1] = ols[1];
            scale[i0] = (resid / (s.n - s.n_treated)).sqrt();
            scale[i1] = (2.0 * resid / s.n_treated.min(s.n - s.n_treated)).sqrt();
            if let Some(j) = self.log_noise_index(i) {
                center[j] = resid.ln();
                scale[j] = (2.0 / s.n).sqrt();
            }
            sum[0] += ols[0];
            sum[1] += ols[1];
        }
        for j in 0..2 {
            center[j] = sum[j] / k as f64;
            let spread =
                self.data.sites.iter().map(|s| (s.ols().expect("validated")[j] - center[j]).powi(2)).sum::<f64>()
                    / k as f64;
            scale[j] = (spread.max(self.site_covariance[j][j]) / k as f64).sqrt();
        }
        (center, scale)
    }

    fn parameter_names(&self) -> Vec<String> {
        let k = self.sites();
        let mut names = vec!["mu_1".to_string(), "mu_2".to_string()];
        for i in 1..=k {
            names.push(format!("mu_site_{i}_1"));
            names.push(format!("mu_site_{i}_2"));
        }
        if self.fixed_noise.is_none() {
            names.extend((1..=k).map(|i| format!("log_sigma_sq_{i}")));
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> SiteData {
        simulate(&HierarchicalTruth::default(), 3, 30, 11).unwrap()
    }

    #[test]
    fn simulation_is_deterministic_and_balanced() {
        let a = simulate(&HierarchicalTruth::default(), 10, 503, 5).unwrap();
        let b = simulate(&HierarchicalTruth::default(), 10, 503, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_observations(), 503);
        for s in &a.sites {
            assert!(s.treatment.iter().any(|&t| t) && s.treatment.iter().any(|&t| !t));
        }
        assert!(simulate(&HierarchicalTruth::default(), 3, 5, 1).is_err());
    }

    #[test]
    fn saturated_site_recovers_ols() {
        let site = Site { treatment: vec![false, true], profit: vec![1.5, 4.0] };
        assert_eq!(site.ols().unwrap(), [1.5, 2.5]);
        let data = simulate(&HierarchicalTruth::default(), 1, 2, 3).unwrap();
        let s = &data.sites[0];
        let y0 = s.profit[s.treatment.iter().position(|&t| !t).unwrap()];
        let y1 = s.profit[s.treatment.iter().position(|&t| t).unwrap()];
        let ols = s.ols().unwrap();
        assert_relative_eq!(ols[0], y0, epsilon = 1e-14);
        assert_relative_eq!(ols[1], y1 - y0, epsilon = 1e-14);
    }

    #[test]
    fn packed_log_joint_matches_natural_plus_jacobian() {
        let priors = HierarchicalPriors::default();
        let model = HierarchicalModel::new(small(), [[1.0, 0.3], [0.3, 0.5]], priors).unwrap();
        let prior = priors.contaminated(0.2).unwrap();
        let mu = [11.0, 12.5];
        let effects = [[10.0, 12.0], [12.5, 11.0], [11.2, 13.0]];
        let noise = [3.0, 4.5, 5.0];
        let theta = model.pack(mu, &effects, &noise);
        let natural = model.log_joint_natural(&prior, mu, &effects, &noise).unwrap();
        let jac: f64 = noise.iter().map(|v: &f64| v.ln()).sum();
        assert_relative_eq!(model.log_joint(&prior, &theta).unwrap(), natural + jac, epsilon = 1e-9);
        let bad = model.log_joint_natural(&prior, mu, &effects, &[3.0, 0.0, 1.0]).unwrap();
        assert_eq!(bad, f64::NEG_INFINITY);
    }

    #[test]
    fn fixed_noise_terms_match_natural() {
        let priors = HierarchicalPriors::default();
        let noise = vec![3.0, 4.5, 5.0];
        let model =
            HierarchicalModel::with_fixed_noise(small(), [[1.0, 0.3], [0.3, 0.5]], priors, noise.clone()).unwrap();
        let prior = priors.contaminated(0.0).unwrap();
        let mu = [11.0, 12.5];
        let effects = [[10.0, 12.0], [12.5, 11.0], [11.2, 13.0]];
        let theta = model.pack(mu, &effects, &noise);
        assert_eq!(theta.len(), model.dim());
        let natural = model.log_joint_natural(&prior, mu, &effects, &noise).unwrap();
        assert_relative_eq!(model.log_joint(&prior, &theta).unwrap(), natural, epsilon = 1e-9);
    }

    #[test]
    fn doubling_residuals_lowers_log_likelihood_by_quadratic_increment() {
        let site = Site { treatment: vec![false, true, false, true], profit: vec![1.0, 3.0, 2.0, 5.0] };
        let data = SiteData { sites: vec![site.clone()] };
        let model = HierarchicalModel::new(data, [[1.0, 0.0], [0.0, 1.0]], HierarchicalPriors::default()).unwrap();
        let (a, b, lambda) = (1.2, 2.1, 0.4);
        let theta = [0.0, 0.0, a, b, lambda];
        let mean = |t: bool| a + if t { b } else { 0.0 };
        let resid: Vec<f64> = site.treatment.iter().zip(&site.profit).map(|(&t, &y)| y - mean(t)).collect();
        let far = Site {
            treatment: site.treatment.clone(),
            profit: site.treatment.iter().zip(&resid).map(|(&t, r)| mean(t) + 2.0 * r).collect(),
        };
        let far_model = HierarchicalModel::new(
            SiteData { sites: vec![far] },
            [[1.0, 0.0], [0.0, 1.0]],
            HierarchicalPriors::default(),
        )
        .unwrap();
        let ss: f64 = resid.iter().map(|r| r * r).sum();
        let expected = -0.5 * (4.0 - 1.0) * ss / lambda.exp();
        assert_relative_eq!(far_model.log_rest(&theta) - model.log_rest(&theta), expected, epsilon = 1e-10);
    }

    #[test]
    fn site_likelihood_derivatives_match_finite_differences() {
        let s = small().sites[0].stats();
        let f = SiteLikelihood(s);
        let x = [11.0, 12.0, 1.3];
        let mut g = [0.0; 3];
        let mut h = [0.0; 9];
        f.derivatives(&x, &mut g, &mut h);
        let step = 1e-5;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += step;
            xm[i] -= step;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * step);
            assert!((g[i] - fd).abs() < 1e-5 * fd.abs().max(1.0));
            let (mut gp, mut gm, mut hh) = ([0.0; 3], [0.0; 3], [0.0; 9]);
            f.derivatives(&xp, &mut gp, &mut hh);
            f.derivatives(&xm, &mut gm, &mut hh);
            for j in 0..3 {
                let fd2 = (gp[j] - gm[j]) / (2.0 * step);
                assert!((h[3 * j + i] - fd2).abs() < 1e-5 * fd2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn simulated_intercepts_center_on_truth() {
        let truth = HierarchicalTruth { mu: [3.0, 3.0], ..Default::default() };
        let data = simulate(&truth, 200, 20_000, 9).unwrap();
        let ols: Vec<[f64; 2]> = data.sites.iter().map(|s| s.ols().unwrap()).collect();
        let mean = ols.iter().map(|o| o[0]).sum::<f64>() / ols.len() as f64;
        let var = ols.iter().map(|o| (o[0] - mean).powi(2)).sum::<f64>() / (ols.len() - 1) as f64;
        let se = (var / ols.len() as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se, "{mean} ± {se}");
    }
}
