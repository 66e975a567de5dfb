//! Log-density kernels and the epsilon-contaminated prior
//! `(1 − ε) p₀(θ) + ε p_c(θ)`.
//!
//! Everything is evaluated in log space. Ratios of densities are formed as
//! exponentiated differences; where a ratio has to be materialised it goes
//! through [`clamped_exp`], which saturates at `exp(±700)` and says so.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution as _, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exponent beyond which density ratios are clamped.
pub const RATIO_CLAMP: f64 = 700.0;

/// Below this `|log p_c − log p₀|` the pseudo-density uses its `p_c → p₀` limit.
pub const PMV_SWITCH: f64 = 1e-6;

/// JSON-facing description of a built-in distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, variance: f64 },
    MvNormal { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    StudentT { loc: f64, scale: f64, nu: f64 },
    InverseGamma { alpha: f64, beta: f64 },
    Product { factors: Vec<Distribution> },
}

/// Value, gradient and Hessian of a log density at one point.
#[derive(Debug, Clone)]
pub struct LogDensityDerivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

type LogDensityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum Repr {
    Normal { mean: f64, variance: f64 },
    MvNormal { mean: DVector<f64>, precision: DMatrix<f64>, chol: DMatrix<f64>, log_norm: f64 },
    StudentT { loc: f64, scale: f64, nu: f64, log_norm: f64 },
    InverseGamma { alpha: f64, beta: f64, log_norm: f64 },
    Product(Vec<DensityKernel>),
    Mixture { log_weights: Vec<f64>, components: Vec<DensityKernel> },
    Custom(Arc<LogDensityFn>),
}

impl PartialEq for Repr {
    fn eq(&self, other: &Self) -> bool {
        use Repr::*;
        match (self, other) {
            (Normal { mean: a, variance: b }, Normal { mean: c, variance: d }) => a == c && b == d,
            (MvNormal { mean: a, precision: b, .. }, MvNormal { mean: c, precision: d, .. }) => a == c && b == d,
            (StudentT { loc: a, scale: b, nu: c, .. }, StudentT { loc: d, scale: e, nu: f, .. }) => {
                a == d && b == e && c == f
            }
            (InverseGamma { alpha: a, beta: b, .. }, InverseGamma { alpha: c, beta: d, .. }) => a == c && b == d,
            (Product(a), Product(b)) => a == b,
            (Mixture { log_weights: a, components: b }, Mixture { log_weights: c, components: d }) => a == c && b == d,
            (Custom(a), Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// An evaluatable log density on `R^dim`.
#[derive(Clone, PartialEq)]
pub struct DensityKernel {
    dim: usize,
    is_normalized: bool,
    repr: Repr,
}

impl fmt::Debug for DensityKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.repr {
            Repr::Normal { mean, variance } => format!("Normal({mean}, {variance})"),
            Repr::MvNormal { mean, .. } => format!("MvNormal(dim={})", mean.len()),
            Repr::StudentT { loc, scale, nu, .. } => format!("StudentT({loc}, {scale}, {nu})"),
            Repr::InverseGamma { alpha, beta, .. } => format!("InverseGamma({alpha}, {beta})"),
            Repr::Product(f) => format!("Product({f:?})"),
            Repr::Mixture { components, .. } => format!("Mixture({components:?})"),
            Repr::Custom(_) => "Custom".to_string(),
        };
        write!(f, "DensityKernel {{ dim: {}, {kind} }}", self.dim)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl DensityKernel {
    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        positive("variance", variance)?;
        if !mean.is_finite() {
            return Err(Error::Validation(format!("mean must be finite, got {mean}")));
        }
        Ok(Self { dim: 1, is_normalized: true, repr: Repr::Normal { mean, variance } })
    }

    pub fn standard_normal() -> Self {
        Self::normal(0.0, 1.0).expect("unit variance is valid")
    }

    pub fn mv_normal(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Validation(format!(
                "covariance must be {d}x{d}, got {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::Validation("covariance must be symmetric".into()));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Validation("covariance must be positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            dim: d,
            is_normalized: true,
            repr: Repr::MvNormal { mean, precision, chol: l, log_norm: -0.5 * (d as f64 * LN_2PI + log_det) },
        })
    }

    pub fn student_t(loc: f64, scale: f64, nu: f64) -> Result<Self> {
        positive("scale", scale)?;
        positive("nu", nu)?;
        if !loc.is_finite() {
            return Err(Error::Validation(format!("loc must be finite, got {loc}")));
        }
        let log_norm = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln() - scale.ln();
        Ok(Self { dim: 1, is_normalized: true, repr: Repr::StudentT { loc, scale, nu, log_norm } })
    }

    pub fn inverse_gamma(alpha: f64, beta: f64) -> Result<Self> {
        positive("alpha", alpha)?;
        positive("beta", beta)?;
        let log_norm = alpha * beta.ln() - ln_gamma(alpha);
        Ok(Self { dim: 1, is_normalized: true, repr: Repr::InverseGamma { alpha, beta, log_norm } })
    }

    /// Product of independent kernels over concatenated coordinates.
    pub fn product(factors: Vec<DensityKernel>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Validation("product needs at least one factor".into()));
        }
        let dim = factors.iter().map(|f| f.dim).sum();
        let is_normalized = factors.iter().all(|f| f.is_normalized);
        Ok(Self { dim, is_normalized, repr: Repr::Product(factors) })
    }

    /// Finite mixture `Σ w_i k_i` with nonnegative weights summing to one.
    pub fn mixture(weights: &[f64], components: Vec<DensityKernel>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(Error::Validation("mixture weights and components differ in length".into()));
        }
        let dim = components[0].dim;
        if let Some(c) = components.iter().find(|c| c.dim != dim) {
            return Err(Error::Dimension { expected: dim, got: c.dim });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Validation("mixture weights must be >= 0 and sum to 1".into()));
        }
        let is_normalized = components.iter().all(|c| c.is_normalized);
        Ok(Self {
            dim,
            is_normalized,
            repr: Repr::Mixture { log_weights: weights.iter().map(|w| w.ln()).collect(), components },
        })
    }

    /// Wrap an arbitrary (possibly unnormalized) log density. Custom kernels
    /// support pointwise evaluation only.
    pub fn custom<F>(dim: usize, is_normalized: bool, log_density: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { dim, is_normalized, repr: Repr::Custom(Arc::new(log_density)) }
    }

    pub fn from_descriptor(desc: &Distribution) -> Result<Self> {
        match desc {
            Distribution::Normal { mean, variance } => Self::normal(*mean, *variance),
            Distribution::MvNormal { mean, covariance } => {
                let d = mean.len();
                if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::Validation(format!("covariance must be {d}x{d}")));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
                Self::mv_normal(DVector::from_column_slice(mean), cov)
            }
            Distribution::StudentT { loc, scale, nu } => Self::student_t(*loc, *scale, *nu),
            Distribution::InverseGamma { alpha, beta } => Self::inverse_gamma(*alpha, *beta),
            Distribution::Product { factors } => {
                Self::product(factors.iter().map(Self::from_descriptor).collect::<Result<_>>()?)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.is_normalized
    }

    /// Whether [`Self::derivatives`] is available.
    pub fn supports_derivatives(&self) -> bool {
        match &self.repr {
            Repr::Product(f) => f.iter().all(Self::supports_derivatives),
            Repr::Mixture { components, .. } => components.iter().all(Self::supports_derivatives),
            Repr::Custom(_) => false,
            _ => true,
        }
    }

    /// Log density at `x`; `-inf` outside the support.
    ///
    /// Panics if `x.len() != self.dim()`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "point dimension does not match kernel");
        match &self.repr {
            Repr::Normal { mean, variance } => {
                let r = x[0] - mean;
                -0.5 * (r * r / variance + LN_2PI + variance.ln())
            }
            Repr::MvNormal { mean, precision, log_norm, .. } => {
                let r = DVector::from_column_slice(x) - mean;
                log_norm - 0.5 * r.dot(&(precision * &r))
            }
            Repr::StudentT { loc, scale, nu, log_norm } => {
                let z = (x[0] - loc) / scale;
                log_norm - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
            }
            Repr::InverseGamma { alpha, beta, log_norm } => {
                if x[0] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    log_norm - (alpha + 1.0) * x[0].ln() - beta / x[0]
                }
            }
            Repr::Product(factors) => {
                let mut offset = 0;
                let mut total = 0.0;
                for f in factors {
                    total += f.log_density(&x[offset..offset + f.dim]);
                    offset += f.dim;
                }
                total
            }
            Repr::Mixture { log_weights, components } => {
                log_sum_exp(log_weights.iter().zip(components).map(|(lw, c)| lw + c.log_density(x)))
            }
            Repr::Custom(f) => f(x),
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Log density with its gradient and Hessian in `x`.
    pub fn derivatives(&self, x: &[f64]) -> Result<LogDensityDerivatives> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        let d = self.dim;
        let mut gradient = DVector::zeros(d);
        let mut hessian = DMatrix::zeros(d, d);
        let value = match &self.repr {
            Repr::Normal { mean, variance } => {
                gradient[0] = -(x[0] - mean) / variance;
                hessian[(0, 0)] = -1.0 / variance;
                self.log_density(x)
            }
            Repr::MvNormal { mean, precision, .. } => {
                let r = DVector::from_column_slice(x) - mean;
                gradient = -(precision * &r);
                hessian = -precision.clone();
                self.log_density(x)
            }
            Repr::StudentT { loc, scale, nu, .. } => {
                let u = x[0] - loc;
                let a = nu * scale * scale;
                let den = a + u * u;
                gradient[0] = -(nu + 1.0) * u / den;
                hessian[(0, 0)] = -(nu + 1.0) * (a - u * u) / (den * den);
                self.log_density(x)
            }
            Repr::InverseGamma { alpha, beta, .. } => {
                let t = x[0];
                if t <= 0.0 {
                    return Err(Error::Domain(format!("inverse-gamma support is t > 0, got {t}")));
                }
                gradient[0] = -(alpha + 1.0) / t + beta / (t * t);
                hessian[(0, 0)] = (alpha + 1.0) / (t * t) - 2.0 * beta / (t * t * t);
                self.log_density(x)
            }
            Repr::Product(factors) => {
                let mut offset = 0;
                let mut total = 0.0;
                for f in factors {
                    let sub = f.derivatives(&x[offset..offset + f.dim])?;
                    total += sub.value;
                    gradient.rows_mut(offset, f.dim).copy_from(&sub.gradient);
                    hessian.view_mut((offset, offset), (f.dim, f.dim)).copy_from(&sub.hessian);
                    offset += f.dim;
                }
                total
            }
            Repr::Mixture { log_weights, components } => {
                let parts: Vec<LogDensityDerivatives> =
                    components.iter().map(|c| c.derivatives(x)).collect::<Result<_>>()?;
                let logs: Vec<f64> = log_weights.iter().zip(&parts).map(|(lw, p)| lw + p.value).collect();
                let total = log_sum_exp(logs.iter().copied());
                if total == f64::NEG_INFINITY {
                    return Err(Error::Domain(format!("mixture has zero density at {x:?}")));
                }
                for (l, p) in logs.iter().zip(&parts) {
                    let w = (l - total).exp();
                    if w == 0.0 {
                        continue;
                    }
                    gradient += w * &p.gradient;
                    hessian += w * (&p.hessian + &p.gradient * p.gradient.transpose());
                }
                hessian -= &gradient * gradient.transpose();
                total
            }
            Repr::Custom(_) => return Err(Error::Unsupported("custom kernels do not provide derivatives".into())),
        };
        Ok(LogDensityDerivatives { value, gradient, hessian })
    }

    /// Per-coordinate mean and variance, when both exist.
    pub fn moments(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.repr {
            Repr::Normal { mean, variance } => Some((vec![*mean], vec![*variance])),
            Repr::MvNormal { mean, chol, .. } => {
                let cov = chol * chol.transpose();
                Some((mean.iter().copied().collect(), cov.diagonal().iter().copied().collect()))
            }
            Repr::StudentT { loc, scale, nu, .. } => {
                (*nu > 2.0).then(|| (vec![*loc], vec![scale * scale * nu / (nu - 2.0)]))
            }
            Repr::InverseGamma { alpha, beta, .. } => (*alpha > 2.0).then(|| {
                let m = beta / (alpha - 1.0);
                (vec![m], vec![m * m / (alpha - 2.0)])
            }),
            Repr::Product(factors) => {
                let mut means = Vec::with_capacity(self.dim);
                let mut vars = Vec::with_capacity(self.dim);
                for f in factors {
                    let (m, v) = f.moments()?;
                    means.extend(m);
                    vars.extend(v);
                }
                Some((means, vars))
            }
            Repr::Mixture { log_weights, components } => {
                let mut mean = vec![0.0; self.dim];
                let mut second = vec![0.0; self.dim];
                for (lw, c) in log_weights.iter().zip(components) {
                    let w = lw.exp();
                    if w == 0.0 {
                        continue;
                    }
                    let (m, v) = c.moments()?;
                    for i in 0..self.dim {
                        mean[i] += w * m[i];
                        second[i] += w * (v[i] + m[i] * m[i]);
                    }
                }
                let var = second.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
                Some((mean, var))
            }
            Repr::Custom(_) => None,
        }
    }

    /// Draw one point. Supported for the Gaussian, Student-t, inverse-gamma
    /// and product kernels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match &self.repr {
            Repr::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                Ok(vec![mean + variance.sqrt() * z])
            }
            Repr::MvNormal { mean, chol, .. } => {
                let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                Ok((mean + chol * z).iter().copied().collect())
            }
            Repr::StudentT { loc, scale, nu, .. } => {
                let z: f64 = rng.sample(StandardNormal);
                let g = Gamma::new(0.5 * nu, 2.0).map_err(|e| Error::Validation(e.to_string()))?.sample(rng);
                Ok(vec![loc + scale * z / (g / nu).sqrt()])
            }
            Repr::InverseGamma { alpha, beta, .. } => {
                let g = Gamma::new(*alpha, 1.0 / beta).map_err(|e| Error::Validation(e.to_string()))?.sample(rng);
                Ok(vec![1.0 / g])
            }
            Repr::Product(factors) => {
                let mut out = Vec::with_capacity(self.dim);
                for f in factors {
                    out.extend(f.sample(rng)?);
                }
                Ok(out)
            }
            Repr::Mixture { .. } | Repr::Custom(_) => {
                Err(Error::Unsupported("sampling from mixture or custom kernels".into()))
            }
        }
    }
}

pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `exp(x)` with `x` clamped to `[-RATIO_CLAMP, RATIO_CLAMP]`. The flag is set
/// whenever clamping changed the argument.
pub fn clamped_exp(x: f64) -> (f64, bool) {
    if x > RATIO_CLAMP {
        (RATIO_CLAMP.exp(), true)
    } else if x < -RATIO_CLAMP {
        // Treated as exact underflow to zero.
        (0.0, true)
    } else {
        (x.exp(), false)
    }
}

/// The contaminated prior `p(θ|ε) = (1 − ε) p₀(θ) + ε p_c(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContaminatedPrior {
    pub p0: DensityKernel,
    pub pc: DensityKernel,
    pub epsilon: f64,
}

/// Mean-value pseudo-density at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoDensity {
    pub log_value: f64,
    /// Set where `p_c(θ) = 0` and the limiting value zero was used.
    pub at_limit: bool,
}

impl PseudoDensity {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }
}

impl ContaminatedPrior {
    pub fn new(p0: DensityKernel, pc: DensityKernel, epsilon: f64) -> Result<Self> {
        if p0.dim() != pc.dim() {
            return Err(Error::Dimension { expected: p0.dim(), got: pc.dim() });
        }
        check_epsilon(epsilon)?;
        Ok(Self { p0, pc, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.p0.dim()
    }

    /// Same components at a different mixing weight.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { epsilon, ..self.clone() })
    }

    /// Same base prior with a different contaminating density.
    pub fn with_contamination(&self, pc: DensityKernel) -> Result<Self> {
        Self::new(self.p0.clone(), pc, self.epsilon)
    }

    pub fn is_trivial(&self) -> bool {
        self.p0 == self.pc
    }

    fn check_point(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("non-finite point {theta:?}")));
        }
        Ok(())
    }

    /// `log p(θ|ε)` from the component log densities.
    pub fn log_mixture_from(&self, log_p0: f64, log_pc: f64) -> f64 {
        let eps = self.epsilon;
        let a = if eps < 1.0 { (1.0 - eps).ln() + log_p0 } else { f64::NEG_INFINITY };
        let b = if eps > 0.0 { eps.ln() + log_pc } else { f64::NEG_INFINITY };
        log_sum_exp([a, b])
    }

    /// `log[(1 − ε) p₀(θ) + ε p_c(θ)]`; `-inf` when both components vanish.
    pub fn log_mixture(&self, theta: &[f64]) -> Result<f64> {
        self.check_point(theta)?;
        Ok(self.log_mixture_from(self.p0.log_density(theta), self.pc.log_density(theta)))
    }

    /// `d log p(θ|ε) / dε = (p_c − p₀) / (p₀ + ε (p_c − p₀))` given component log densities.
    pub fn dlog_deps_from(&self, log_p0: f64, log_pc: f64) -> Option<f64> {
        let m = log_p0.max(log_pc);
        if m == f64::NEG_INFINITY {
            return None;
        }
        let a = (log_p0 - m).exp();
        let b = (log_pc - m).exp();
        let den = (1.0 - self.epsilon) * a + self.epsilon * b;
        (den > 0.0).then(|| (b - a) / den)
    }

    pub fn dlog_mixture_deps(&self, theta: &[f64]) -> Result<f64> {
        self.check_point(theta)?;
        self.dlog_deps_from(self.p0.log_density(theta), self.pc.log_density(theta))
            .ok_or_else(|| Error::PriorPositivity { point: theta.to_vec() })
    }

    /// Mean-value pseudo-density `p_c p₀ / (p_c − p₀) · log(p_c / p₀)`.
    pub fn pmv_density(&self, theta: &[f64]) -> Result<PseudoDensity> {
        self.check_point(theta)?;
        pmv_from_logs(self.p0.log_density(theta), self.pc.log_density(theta))
            .ok_or_else(|| Error::Domain(format!("p0 vanishes at {theta:?}; p_mv undefined")))
    }

    /// Log-space derivatives of `log p(θ|ε)` in θ, for use inside expectations.
    pub fn log_mixture_derivatives(&self, theta: &[f64]) -> Result<LogDensityDerivatives> {
        let d0 = self.p0.derivatives(theta)?;
        if self.epsilon == 0.0 {
            return Ok(d0);
        }
        let dc = self.pc.derivatives(theta)?;
        if self.epsilon == 1.0 {
            return Ok(dc);
        }
        let a = (1.0 - self.epsilon).ln() + d0.value;
        let b = self.epsilon.ln() + dc.value;
        let value = log_sum_exp([a, b]);
        if value == f64::NEG_INFINITY {
            return Err(Error::PriorPositivity { point: theta.to_vec() });
        }
        let w0 = (a - value).exp();
        let wc = (b - value).exp();
        let gradient = w0 * &d0.gradient + wc * &dc.gradient;
        let hessian = w0 * (&d0.hessian + &d0.gradient * d0.gradient.transpose())
            + wc * (&dc.hessian + &dc.gradient * dc.gradient.transpose())
            - &gradient * gradient.transpose();
        Ok(LogDensityDerivatives { value, gradient, hessian })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..=1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::Validation(format!("epsilon must lie in [0, 1], got {epsilon}")))
    }
}

/// `ln(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// Mean-value pseudo-density from component log densities. `None` where
/// `p₀ = 0`.
pub fn pmv_from_logs(log_p0: f64, log_pc: f64) -> Option<PseudoDensity> {
    if log_p0 == f64::NEG_INFINITY || log_p0.is_nan() {
        return None;
    }
    if log_pc == f64::NEG_INFINITY {
        return Some(PseudoDensity { log_value: f64::NEG_INFINITY, at_limit: true });
    }
    let d = log_pc - log_p0;
    // p_mv = p₀ · d / (1 − e^{−d})
    let log_factor = if d.abs() < PMV_SWITCH {
        0.0
    } else if d > 0.0 {
        d.ln() - (-(-d).exp_m1()).ln()
    } else {
        (-d).ln() - ln_expm1(-d)
    };
    Some(PseudoDensity { log_value: log_p0 + log_factor, at_limit: false })
}
