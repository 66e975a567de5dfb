use nalgebra::{DMatrix, DVector};

use super::{Model, Term};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations `x_i ~ N(θ, Σ)` with known noise covariance; θ carries the
/// contaminated prior in every coordinate.
#[derive(Debug, Clone)]
pub struct NormalLocation {
    observations: Vec<Vec<f64>>,
    noise_covariance: DMatrix<f64>,
    terms: Vec<Term>,
}

impl NormalLocation {
    pub fn new(observations: Vec<Vec<f64>>, noise_covariance: DMatrix<f64>) -> Result<Self> {
        let d = noise_covariance.nrows();
        if d == 0 || noise_covariance.ncols() != d {
            return Err(Error::Validation("noise covariance must be square".into()));
        }
        if observations.is_empty() {
            return Err(Error::Validation("need at least one observation".into()));
        }
        if let Some(x) = observations.iter().find(|x| x.len() != d) {
            return Err(Error::Dimension { expected: d, got: x.len() });
        }
        let chol = noise_covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Validation("noise covariance must be positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let n = observations.len() as f64;
        let mut sum = DVector::zeros(d);
        let mut quad = 0.0;
        for x in &observations {
            let x = DVector::from_column_slice(x);
            quad += x.dot(&(&precision * &x));
            sum += x;
        }
        let term = Term::Quadratic {
            coords: (0..d).collect(),
            a: &precision * n,
            b: &precision * sum,
            c: -0.5 * quad - 0.5 * n * (d as f64 * LN_2PI + log_det),
        };
        Ok(Self { observations, noise_covariance, terms: vec![term] })
    }

    /// One-dimensional model with scalar observations.
    pub fn scalar(observations: &[f64], noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(Error::Validation(format!("noise variance must be > 0, got {noise_variance}")));
        }
        Self::new(observations.iter().map(|&x| vec![x]).collect(), DMatrix::from_element(1, 1, noise_variance))
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_covariance
    }

    fn quadratic(&self) -> (&DMatrix<f64>, &DVector<f64>, f64) {
        match &self.terms[0] {
            Term::Quadratic { a, b, c, .. } => (a, b, *c),
            Term::Smooth { .. } => unreachable!("likelihood is quadratic"),
        }
    }

    /// Posterior mean and covariance under a Gaussian prior `N(m₀, S₀)`.
    pub fn gaussian_posterior(
        &self,
        prior_mean: &DVector<f64>,
        prior_cov: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (a, b, _) = self.quadratic();
        let prior_precision =
            prior_cov.clone().try_inverse().ok_or_else(|| Error::Validation("prior covariance is singular".into()))?;
        let cov = (a + &prior_precision)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("posterior precision is singular".into()))?;
        let mean = &cov * (b + prior_precision * prior_mean);
        Ok((mean, cov))
    }

    /// `log ∫ p(x|θ) N(θ; m₀, S₀) dθ`.
    pub fn gaussian_log_evidence(&self, prior_mean: &DVector<f64>, prior_cov: &DMatrix<f64>) -> Result<f64> {
        let (a, b, c) = self.quadratic();
        let d = self.dim() as f64;
        let chol0 = prior_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Validation("prior covariance must be positive definite".into()))?;
        let p0 = chol0.inverse();
        let log_det0: f64 = 2.0 * chol0.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let q = a + &p0;
        let cq = q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
        let log_det_q: f64 = 2.0 * cq.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let h = b + &p0 * prior_mean;
        let hq = cq.solve(&h);
        Ok(c - 0.5 * prior_mean.dot(&(&p0 * prior_mean)) - 0.5 * (d * LN_2PI + log_det0)
            + 0.5 * h.dot(&hq)
            + 0.5 * (d * LN_2PI - log_det_q))
    }
}

impl Model for NormalLocation {
    fn dim(&self) -> usize {
        self.noise_covariance.nrows()
    }

    fn prior_coords(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }

    fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn reference_point(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.observations.len() as f64;
        let mean = (0..d).map(|j| self.observations.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale = (0..d).map(|j| (self.noise_covariance[(j, j)] / n).sqrt()).collect();
        (mean, scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{ContaminatedPrior, DensityKernel};
    use approx::assert_relative_eq;

    #[test]
    fn likelihood_term_matches_direct_sum() {
        let m = NormalLocation::scalar(&[2.0, 1.0, 3.5], 1.5).unwrap();
        let theta = 0.7;
        let direct: f64 =
            [2.0, 1.0, 3.5].iter().map(|x| DensityKernel::normal(theta, 1.5).unwrap().log_density(&[*x])).sum();
        assert_relative_eq!(m.log_rest(&[theta]), direct, epsilon = 1e-12);
    }

    #[test]
    fn conjugate_closed_forms() {
        let m = NormalLocation::scalar(&[2.0], 1.0).unwrap();
        let (mean, cov) = m.gaussian_posterior(&DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(mean[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(cov[(0, 0)], 0.5, epsilon = 1e-14);
        let log_c0 = m.gaussian_log_evidence(&DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        let expected = (1.0 / (4.0 * std::f64::consts::PI).sqrt()).ln() - 1.0;
        assert_relative_eq!(log_c0, expected, epsilon = 1e-13);
    }

    #[test]
    fn two_dimensional_log_joint() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let m = NormalLocation::new(vec![vec![1.0, 2.0], vec![0.5, -1.0]], cov.clone()).unwrap();
        let k = DensityKernel::mv_normal(DVector::from_vec(vec![0.2, 0.1]), cov).unwrap();
        let theta = [0.2, 0.1];
        let direct = k.log_density(&[1.0, 2.0]) + k.log_density(&[0.5, -1.0]);
        assert_relative_eq!(m.log_rest(&theta), direct, epsilon = 1e-12);
        let prior = ContaminatedPrior::new(
            DensityKernel::mv_normal(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
            DensityKernel::mv_normal(DVector::zeros(2), DMatrix::identity(2, 2) * 4.0).unwrap(),
            0.0,
        )
        .unwrap();
        let lj = m.log_joint(&prior, &theta).unwrap();
        assert_relative_eq!(lj, direct + prior.p0.log_density(&theta), epsilon = 1e-12);
        assert!(m.log_joint(&prior, &[0.0]).is_err());
    }
}
