//! Brute-force ground truth for models with at most two parameters: the
//! posterior under the contaminated prior by adaptive quadrature, its
//! normalizing constant, and finite differences of expectations in ε.

use nalgebra::Matrix2;

use crate::densities::ContaminatedPrior;
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::models::{check_prior, Model};
use crate::quadrature::{integrate_line, AdaptiveOptions};

/// Default finite-difference step in ε.
pub const REFIT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub adaptive: AdaptiveOptions,
    /// Half-width of the initial window in posterior standard deviations.
    pub window_sds: f64,
    /// Tail chunks are appended until each contributes less than this,
    /// relative to the size of the integral being computed.
    pub tail_tolerance: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { adaptive: AdaptiveOptions::default(), window_sds: 12.0, tail_tolerance: 1e-12 }
    }
}

/// Normalized posterior `p(x|θ) p(θ|ε) / C_ε` on a 1D or 2D parameter.
pub struct QuadraturePosterior<'a> {
    model: &'a dyn Model,
    prior: ContaminatedPrior,
    opts: OracleOptions,
    log_shift: f64,
    log_normalizer: f64,
    mean: Vec<f64>,
    sd: Vec<f64>,
    /// Regression slope of θ₂ on θ₁ and conditional sd, for 2D windows.
    conditional: Option<(f64, f64)>,
    tail_mass_bound: f64,
}

impl std::fmt::Debug for QuadraturePosterior<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraturePosterior")
            .field("epsilon", &self.prior.epsilon)
            .field("mean", &self.mean)
            .field("sd", &self.sd)
            .field("log_normalizer", &self.log_normalizer)
            .finish()
    }
}

pub fn posterior_quadrature<'a>(model: &'a dyn Model, prior: &ContaminatedPrior) -> Result<QuadraturePosterior<'a>> {
    QuadraturePosterior::new(model, prior, OracleOptions::default())
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-12 * (1.0 + c.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

impl<'a> QuadraturePosterior<'a> {
    pub fn new(model: &'a dyn Model, prior: &ContaminatedPrior, opts: OracleOptions) -> Result<Self> {
        let d = model.dim();
        if d > 2 {
            return Err(Error::Unsupported(format!("quadrature oracle handles dim <= 2, got {d}")));
        }
        check_prior(model, prior)?;
        if model.prior_coords() != (0..d).collect::<Vec<_>>() {
            return Err(Error::Unsupported("quadrature oracle needs the prior on every coordinate".into()));
        }
        let log_unnorm = |t: &[f64]| model.log_rest(t) + prior.log_mixture(t).unwrap_or(f64::NEG_INFINITY);

        // Scan a wide box around the data and the prior, then refine.
        let (center, scale) = model.reference_point();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let prior_moments = prior.p0.moments();
        for i in 0..d {
            lo[i] = center[i] - 50.0 * scale[i];
            hi[i] = center[i] + 50.0 * scale[i];
            if let Some((m, v)) = &prior_moments {
                lo[i] = lo[i].min(m[i] - 10.0 * v[i].sqrt());
                hi[i] = hi[i].max(m[i] + 10.0 * v[i].sqrt());
            }
        }
        let n_scan = if d == 1 { 4001 } else { 201 };
        let grid = |i: usize, k: usize| lo[i] + (hi[i] - lo[i]) * k as f64 / (n_scan - 1) as f64;
        let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
        if d == 1 {
            for k in 0..n_scan {
                let t = [grid(0, k)];
                let v = log_unnorm(&t);
                if v > best.0 {
                    best = (v, t.to_vec());
                }
            }
        } else {
            for k in 0..n_scan {
                for l in 0..n_scan {
                    let t = [grid(0, k), grid(1, l)];
                    let v = log_unnorm(&t);
                    if v > best.0 {
                        best = (v, t.to_vec());
                    }
                }
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Numerical("posterior is zero on the whole scan box".into()));
        }
        let mut mode = best.1;
        let spacing: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / (n_scan - 1) as f64).collect();
        for _ in 0..if d == 1 { 1 } else { 30 } {
            for i in 0..d {
                let f = |x: f64| {
                    let mut t = mode.clone();
                    t[i] = x;
                    log_unnorm(&t)
                };
                mode[i] = golden_max(f, mode[i] - spacing[i], mode[i] + spacing[i]);
            }
        }

        // Laplace scales from the curvature at the mode.
        let mut hess = Matrix2::zeros();
        for i in 0..d {
            for j in 0..d {
                let h = 1e-4 * spacing[i].max(spacing[j]);
                let at = |a: f64, b: f64| {
                    let mut t = mode.clone();
                    t[i] += a;
                    t[j] += b;
                    log_unnorm(&t)
                };
                hess[(i, j)] = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
            }
        }
        let mut sd = vec![0.0; d];
        let mut conditional = None;
        if d == 1 {
            sd[0] = if hess[(0, 0)] < 0.0 { (-1.0 / hess[(0, 0)]).sqrt() } else { spacing[0] * 10.0 };
        } else {
            let cov = (-hess.fixed_view::<2, 2>(0, 0).into_owned()).try_inverse();
            match cov {
                Some(c) if c[(0, 0)] > 0.0 && c[(1, 1)] > 0.0 && c.determinant() > 0.0 => {
                    sd = vec![c[(0, 0)].sqrt(), c[(1, 1)].sqrt()];
                    let slope = c[(0, 1)] / c[(0, 0)];
                    conditional = Some((slope, (c[(1, 1)] - slope * c[(0, 1)]).sqrt()));
                }
                _ => sd = spacing.iter().map(|s| 10.0 * s).collect(),
            }
        }

        let mut post = Self {
            model,
            prior: prior.clone(),
            opts,
            log_shift: best.0.max(log_unnorm(&mode)),
            log_normalizer: 0.0,
            mean: mode,
            sd,
            conditional,
            tail_mass_bound: f64::INFINITY,
        };
        // Two passes: a coarse one on the Laplace window to place the
        // integration windows, then the full-accuracy one.
        let coarse = OracleOptions {
            adaptive: AdaptiveOptions { abs_tol: 1e-10, rel_tol: 1e-7, ..opts.adaptive },
            tail_tolerance: 1e-9,
            ..opts
        };
        for pass_opts in [coarse, opts] {
            post.opts = pass_opts;
            let shift = post.log_shift;
            let scale: f64 = post.sd.iter().product();
            let (z, tail) = post.integrate_with_tail(|t| (log_unnorm(t) - shift).exp(), scale)?;
            if !(z > 0.0) {
                return Err(Error::Numerical("posterior normalizer is zero".into()));
            }
            post.log_normalizer = shift + z.ln();
            post.tail_mass_bound = tail / z;
            let mut mean = vec![0.0; d];
            for (i, m) in mean.iter_mut().enumerate() {
                *m = post.expect(|t| t[i])?;
            }
            let mut var = vec![0.0; d];
            for (i, v) in var.iter_mut().enumerate() {
                *v = post.expect(|t| (t[i] - mean[i]).powi(2))?;
            }
            if d == 2 {
                let c01 = post.expect(|t| (t[0] - mean[0]) * (t[1] - mean[1]))?;
                let slope = c01 / var[0];
                post.conditional = Some((slope, (var[1] - slope * c01).max(1e-300).sqrt()));
            }
            post.mean = mean;
            post.sd = var.iter().map(|v| v.sqrt()).collect();
        }
        if post.tail_mass_bound >= 1e-8 {
            return Err(Error::Accuracy(format!("tail mass bound {:e} exceeds 1e-8", post.tail_mass_bound)));
        }
        Ok(post)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model(&self) -> &'a dyn Model {
        self.model
    }

    pub fn prior(&self) -> &ContaminatedPrior {
        &self.prior
    }

    pub fn epsilon(&self) -> f64 {
        self.prior.epsilon
    }

    pub fn options(&self) -> &OracleOptions {
        &self.opts
    }

    /// `log C_ε = log ∫ p(x|θ) p(θ|ε) dθ`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    /// Relative mass attributed to the last tail chunks.
    pub fn tail_mass_bound(&self) -> f64 {
        self.tail_mass_bound
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.model.log_rest(theta) + self.prior.log_mixture(theta)? - self.log_normalizer)
    }

    /// `log p(x|θ) − log C_ε`, the ratio of posterior to prior.
    pub fn log_likelihood_ratio(&self, theta: &[f64]) -> f64 {
        self.model.log_rest(theta) - self.log_normalizer
    }

    /// `E[f(θ)]` under the posterior.
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<f64> {
        let norm = self.log_normalizer;
        self.integrate(|t| {
            let lp = self.model.log_rest(t) + self.prior.log_mixture(t).unwrap_or(f64::NEG_INFINITY) - norm;
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                f(t) * lp.exp()
            }
        })
    }

    pub fn expectation(&self, g: &Functional) -> Result<f64> {
        self.expect(|t| g.value(t))
    }

    /// `∫ f(θ) dθ` over the parameter space, on windows placed around the posterior.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<f64> {
        let scale = 1.0 / self.sd.iter().product::<f64>();
        self.integrate_with_tail(f, scale).map(|(v, _)| v)
    }

    /// Integral and the largest tail chunk; `magnitude` sets the absolute scale of the tail tolerance.
    fn integrate_with_tail<F: Fn(&[f64]) -> f64>(&self, f: F, magnitude: f64) -> Result<(f64, f64)> {
        let tol = self.opts.tail_tolerance * magnitude;
        let w = self.opts.window_sds;
        let ad = &self.opts.adaptive;
        match self.dim() {
            1 => {
                let r = integrate_line(|x| f(&[x]), self.mean[0], w * self.sd[0], tol, ad)?;
                Ok((r.value, r.tail_bound))
            }
            _ => {
                let (slope, cond_sd) = self.conditional.unwrap_or((0.0, self.sd[1]));
                let inner_tol = tol / (w * self.sd[0]);
                let inner_err = std::cell::Cell::new(None);
                let inner_tail = std::cell::Cell::new(0.0f64);
                let outer = integrate_line(
                    |x| {
                        let c = self.mean[1] + slope * (x - self.mean[0]);
                        match integrate_line(|y| f(&[x, y]), c, w * cond_sd, inner_tol, ad) {
                            Ok(r) => {
                                inner_tail.set(inner_tail.get().max(r.tail_bound));
                                r.value
                            }
                            Err(e) => {
                                inner_err.set(Some(e));
                                0.0
                            }
                        }
                    },
                    self.mean[0],
                    w * self.sd[0],
                    tol,
                    ad,
                )?;
                if let Some(e) = inner_err.take() {
                    return Err(e);
                }
                Ok((outer.value, outer.tail_bound.max(inner_tail.get() * w * self.sd[0])))
            }
        }
    }
}

/// `dE_{p_ε^x}[g]/dε` by finite differences of quadrature posteriors,
/// Richardson-extrapolated once. Central differences in the interior,
/// second-order one-sided differences at ε = 0 and ε = 1.
pub fn refit_derivative(
    model: &dyn Model,
    prior: &ContaminatedPrior,
    g: &Functional,
    epsilon: f64,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 0.25) {
        return Err(Error::Validation(format!("step must lie in (0, 0.25], got {step}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Validation(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if prior.is_trivial() {
        return Ok(0.0);
    }
    let at = |e: f64| -> Result<f64> { posterior_quadrature(model, &prior.with_epsilon(e)?)?.expectation(g) };
    let tol = OracleOptions::default().adaptive.rel_tol;
    let mut spread = 0.0f64;
    let mut scale = 0.0f64;
    let mut diff = |h: f64| -> Result<f64> {
        if epsilon - h >= 0.0 && epsilon + h <= 1.0 {
            let (up, dn) = (at(epsilon + h)?, at(epsilon - h)?);
            spread = spread.max((up - dn).abs());
            scale = scale.max(up.abs());
            Ok((up - dn) / (2.0 * h))
        } else {
            let s = if epsilon + 2.0 * h <= 1.0 { 1.0 } else { -1.0 };
            let (e0, e1, e2) = (at(epsilon)?, at(epsilon + s * h)?, at(epsilon + 2.0 * s * h)?);
            spread = spread.max((e1 - e0).abs());
            scale = scale.max(e0.abs());
            Ok(s * (-3.0 * e0 + 4.0 * e1 - e2) / (2.0 * h))
        }
    };
    let coarse = diff(step)?;
    let fine = diff(0.5 * step)?;
    if spread > 0.0 && spread < 100.0 * tol * scale.max(1.0) {
        return Err(Error::Precision(format!(
            "expectations differ by {spread:e} across step {step:e}; use a larger step"
        )));
    }
    Ok((4.0 * fine - coarse) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::DensityKernel;
    use crate::models::NormalLocation;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn normal_prior(eps: f64) -> ContaminatedPrior {
        ContaminatedPrior::new(DensityKernel::standard_normal(), DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(), eps)
            .unwrap()
    }

    #[test]
    fn conjugate_posterior_moments_and_evidence() {
        let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
        let post = posterior_quadrature(&model, &normal_prior(0.0)).unwrap();
        assert!((post.expectation(&Functional::Coordinate(0)).unwrap() - 1.0).abs() < 1e-8);
        let var = post.expect(|t| (t[0] - 1.0).powi(2)).unwrap();
        assert!((var - 0.5).abs() < 1e-8);
        assert!((post.expect(|_| 1.0).unwrap() - 1.0).abs() < 1e-10);
        let c0 = (1.0 / (4.0 * std::f64::consts::PI).sqrt()) * (-1.0f64).exp();
        assert!((post.log_normalizer().exp() - c0).abs() < 1e-10);
        assert!(post.tail_mass_bound() < 1e-10);
    }

    #[test]
    fn two_dimensional_conjugate_posterior() {
        let noise = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let model = NormalLocation::new(vec![vec![1.0, 2.0], vec![2.0, 0.5], vec![0.0, 1.0]], noise).unwrap();
        let prior_cov = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 4.0]);
        let prior = ContaminatedPrior::new(
            DensityKernel::mv_normal(DVector::zeros(2), prior_cov.clone()).unwrap(),
            DensityKernel::product(vec![DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(); 2]).unwrap(),
            0.0,
        )
        .unwrap();
        let post = posterior_quadrature(&model, &prior).unwrap();
        let (mean, cov) = model.gaussian_posterior(&DVector::zeros(2), &prior_cov).unwrap();
        for i in 0..2 {
            assert!((post.mean()[i] - mean[i]).abs() < 1e-8);
            assert!((post.sd()[i] - cov[(i, i)].sqrt()).abs() < 1e-8);
        }
        let c01 = post.expect(|t| (t[0] - mean[0]) * (t[1] - mean[1])).unwrap();
        assert!((c01 - cov[(0, 1)]).abs() < 1e-8);
        let log_c = model.gaussian_log_evidence(&DVector::zeros(2), &prior_cov).unwrap();
        assert_relative_eq!(post.log_normalizer(), log_c, epsilon = 1e-9);
    }

    #[test]
    fn refining_the_rule_leaves_expectations_unchanged() {
        let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
        for eps in [0.0, 0.3, 1.0] {
            let base = posterior_quadrature(&model, &normal_prior(eps)).unwrap();
            let mut opts = OracleOptions::default();
            opts.adaptive.initial_panels *= 2;
            let fine = QuadraturePosterior::new(&model, &normal_prior(eps), opts).unwrap();
            for g in [Functional::Coordinate(0), Functional::Square(0)] {
                let a = base.expectation(&g).unwrap();
                let b = fine.expectation(&g).unwrap();
                assert!((a - b).abs() < 1e-8, "{eps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn refit_derivative_is_zero_without_contamination() {
        let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
        let n = DensityKernel::standard_normal();
        let prior = ContaminatedPrior::new(n.clone(), n, 0.5).unwrap();
        let d = refit_derivative(&model, &prior, &Functional::Coordinate(0), 0.5, REFIT_STEP).unwrap();
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn refit_derivative_rejects_tiny_steps() {
        let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
        let prior = ContaminatedPrior::new(
            DensityKernel::standard_normal(),
            DensityKernel::normal(0.0, 1.0 + 1e-9).unwrap(),
            0.5,
        )
        .unwrap();
        let r = refit_derivative(&model, &prior, &Functional::Coordinate(0), 0.5, 1e-6);
        assert!(matches!(r, Err(Error::Precision(_))), "{r:?}");
    }

    #[test]
    fn refuses_three_dimensions() {
        let model = NormalLocation::new(vec![vec![0.0; 3]], DMatrix::identity(3, 3)).unwrap();
        let k = DensityKernel::mv_normal(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let prior = ContaminatedPrior::new(k.clone(), k, 0.0).unwrap();
        assert!(matches!(posterior_quadrature(&model, &prior), Err(Error::Unsupported(_))));
    }
}
