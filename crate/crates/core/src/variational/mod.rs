//! Gaussian variational families `θ = m + L z`, `z ~ N(0, I)`, where `L` has a
//! block-lower-triangular pattern with log-scale diagonal. The parameter
//! vector η holds the means followed by each block's lower-triangular
//! entries in row-major order.

mod objective;
mod optimizer;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::densities::{ContaminatedPrior, DensityKernel};
use crate::error::{Error, Result};
use crate::models::{check_prior, HierarchicalModel, Model};

pub use objective::{ExpectationPolicy, Level, Objective, ObjectiveValue, GH_NODES, MC_DRAWS};
pub use optimizer::FitOptions;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Structure {
    MeanField,
    FullCovariance,
    /// Independent Gaussian blocks, each with a full covariance.
    Blockwise {
        blocks: Vec<Vec<usize>>,
    },
}

/// One structurally nonzero entry `L[row, col]` and its slot in η.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub eta: usize,
}

impl Entry {
    pub fn is_diagonal(&self) -> bool {
        self.row == self.col
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalFamily {
    pub dim_theta: usize,
    pub structure: Structure,
}

impl VariationalFamily {
    pub fn mean_field(dim: usize) -> Self {
        Self { dim_theta: dim, structure: Structure::MeanField }
    }

    pub fn full_covariance(dim: usize) -> Self {
        Self { dim_theta: dim, structure: Structure::FullCovariance }
    }

    pub fn blockwise(dim: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in blocks.iter().flatten() {
            if i >= dim || seen[i] {
                return Err(Error::Validation(format!(
                    "blocks must partition 0..{dim}; coordinate {i} repeated or out of range"
                )));
            }
            seen[i] = true;
        }
        if blocks.iter().any(Vec::is_empty) || seen.iter().any(|s| !s) {
            return Err(Error::Validation(format!("blocks must partition 0..{dim}")));
        }
        Ok(Self { dim_theta: dim, structure: Structure::Blockwise { blocks } })
    }

    /// Gaussian on μ, one Gaussian per site effect, log-normal per noise variance.
    pub fn hierarchical(model: &HierarchicalModel) -> Self {
        let k = model.sites();
        let mut blocks = vec![vec![0, 1]];
        blocks.extend((0..k).map(|s| model.site_index(s).to_vec()));
        blocks.extend((0..k).filter_map(|s| model.log_noise_index(s)).map(|i| vec![i]));
        Self::blockwise(model.dim(), blocks).expect("hierarchical blocks partition θ")
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        match &self.structure {
            Structure::MeanField => (0..self.dim_theta).map(|i| vec![i]).collect(),
            Structure::FullCovariance => vec![(0..self.dim_theta).collect()],
            Structure::Blockwise { blocks } => blocks.clone(),
        }
    }

    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        let mut eta = self.dim_theta;
        for block in self.blocks() {
            for (r, &row) in block.iter().enumerate() {
                for &col in &block[..=r] {
                    out.push(Entry { row, col, eta });
                    eta += 1;
                }
            }
        }
        out
    }

    pub fn dim_eta(&self) -> usize {
        let tri: usize = self.blocks().iter().map(|b| b.len() * (b.len() + 1) / 2).sum();
        self.dim_theta + tri
    }

    fn check(&self) -> Result<()> {
        if self.dim_theta == 0 {
            return Err(Error::Validation("family dimension must be positive".into()));
        }
        if let Structure::Blockwise { blocks } = &self.structure {
            Self::blockwise(self.dim_theta, blocks.clone())?;
        }
        Ok(())
    }

    /// η for mean `m` and per-coordinate standard deviations, uncorrelated.
    pub fn eta_from_moments(&self, mean: &[f64], sd: &[f64]) -> Vec<f64> {
        let mut eta = mean.to_vec();
        eta.resize(self.dim_eta(), 0.0);
        for e in self.entries() {
            if e.is_diagonal() {
                eta[e.eta] = sd[e.row].ln();
            }
        }
        eta
    }

    /// η representing `N(mean, cov)`; `cov` must respect the block pattern.
    pub fn eta_from_gaussian(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut eta: Vec<f64> = mean.iter().copied().collect();
        eta.resize(self.dim_eta(), 0.0);
        let entries = self.entries();
        for block in self.blocks() {
            let n = block.len();
            let sub = DMatrix::from_fn(n, n, |i, j| cov[(block[i], block[j])]);
            let l = sub
                .cholesky()
                .ok_or_else(|| Error::Validation("block covariance is not positive definite".into()))?
                .l();
            for e in entries.iter().filter(|e| block.contains(&e.row)) {
                let r = block.iter().position(|&b| b == e.row).expect("row in block");
                let c = block.iter().position(|&b| b == e.col).expect("col in block");
                eta[e.eta] = if r == c { l[(r, c)].ln() } else { l[(r, c)] };
            }
        }
        Ok(eta)
    }
}

/// `N(mean, L Lᵀ)` materialized from η.
#[derive(Debug, Clone)]
pub struct GaussianQ {
    pub mean: DVector<f64>,
    pub l: DMatrix<f64>,
    l_inv: DMatrix<f64>,
    log_det_l: f64,
}

impl GaussianQ {
    pub fn from_eta(family: &VariationalFamily, eta: &[f64]) -> Result<Self> {
        if eta.len() != family.dim_eta() {
            return Err(Error::Dimension { expected: family.dim_eta(), got: eta.len() });
        }
        let d = family.dim_theta;
        let mean = DVector::from_column_slice(&eta[..d]);
        let mut l = DMatrix::zeros(d, d);
        let mut log_det_l = 0.0;
        for e in family.entries() {
            if e.is_diagonal() {
                l[(e.row, e.col)] = eta[e.eta].exp();
                log_det_l += eta[e.eta];
            } else {
                l[(e.row, e.col)] = eta[e.eta];
            }
        }
        let l_inv = l.clone().try_inverse().ok_or_else(|| Error::Numerical("scale factor is singular".into()))?;
        Ok(Self { mean, l, l_inv, log_det_l })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn standardize(&self, theta: &[f64]) -> DVector<f64> {
        &self.l_inv * (DVector::from_column_slice(theta) - &self.mean)
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let z = self.standardize(theta);
        -0.5 * z.norm_squared() - self.log_det_l - 0.5 * self.dim() as f64 * LN_2PI
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.l * z).iter().copied().collect()
    }

    /// Marginal over `coords` as a normalized kernel.
    pub fn marginal_kernel(&self, coords: &[usize], variance_inflation: f64) -> Result<DensityKernel> {
        let cov = self.covariance();
        let n = coords.len();
        DensityKernel::mv_normal(
            DVector::from_fn(n, |i, _| self.mean[coords[i]]),
            DMatrix::from_fn(n, n, |i, j| cov[(coords[i], coords[j])] * variance_inflation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub family: VariationalFamily,
    pub eta: Vec<f64>,
    pub converged: bool,
    pub kl_gradient_norm: f64,
    pub iterations: usize,
    /// Negative ELBO at η.
    pub objective: f64,
    /// Contamination weight the state was fitted at.
    pub epsilon: f64,
    /// Objective after each accepted optimizer step.
    #[serde(default)]
    pub trace: Vec<f64>,
}

impl VariationalState {
    pub fn new(family: VariationalFamily, eta: Vec<f64>) -> Result<Self> {
        family.check()?;
        if eta.len() != family.dim_eta() {
            return Err(Error::Dimension { expected: family.dim_eta(), got: eta.len() });
        }
        Ok(Self {
            family,
            eta,
            converged: false,
            kl_gradient_norm: f64::NAN,
            iterations: 0,
            objective: f64::NAN,
            epsilon: 0.0,
            trace: Vec::new(),
        })
    }

    pub fn gaussian(&self) -> Result<GaussianQ> {
        GaussianQ::from_eta(&self.family, &self.eta)
    }

    pub fn mean(&self) -> &[f64] {
        &self.eta[..self.family.dim_theta]
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(self.gaussian()?.covariance())
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.family.dim_theta {
            return Err(Error::Dimension { expected: self.family.dim_theta, got: theta.len() });
        }
        Ok(self.gaussian()?.log_density(theta))
    }

    /// `∂ log q(θ; η) / ∂η`.
    pub fn q_score(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.family.dim_theta).collect();
        MarginalScore::new(self, &all)?.score(theta)
    }
}

/// Score of the marginal of q over a coordinate set whose rows of `L` only
/// reference as many columns as there are coordinates.
#[derive(Debug, Clone)]
pub struct MarginalScore {
    coords: Vec<usize>,
    mean: DVector<f64>,
    l_inv: DMatrix<f64>,
    log_det_l: f64,
    /// (local row, local col, η index, L value)
    entries: Vec<(usize, usize, usize, f64)>,
    dim_eta: usize,
}

impl MarginalScore {
    pub fn new(state: &VariationalState, coords: &[usize]) -> Result<Self> {
        let family = &state.family;
        let entries: Vec<Entry> = family.entries().into_iter().filter(|e| coords.contains(&e.row)).collect();
        let mut cols: Vec<usize> = entries.iter().map(|e| e.col).collect();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != coords.len() {
            return Err(Error::Unsupported(format!(
                "marginal over {coords:?} mixes in {} latent directions; reorder θ so the block leads",
                cols.len()
            )));
        }
        let n = coords.len();
        let mut l = DMatrix::zeros(n, n);
        let mut local = Vec::with_capacity(entries.len());
        let mut log_det_l = 0.0;
        for e in &entries {
            let r = coords.iter().position(|&c| c == e.row).expect("row in coords");
            let c = cols.iter().position(|&c| c == e.col).expect("col present");
            let v = if e.is_diagonal() { state.eta[e.eta].exp() } else { state.eta[e.eta] };
            if e.is_diagonal() {
                log_det_l += state.eta[e.eta];
            }
            l[(r, c)] = v;
            local.push((r, c, e.eta, v));
        }
        let l_inv = l.try_inverse().ok_or_else(|| Error::Numerical("marginal scale factor is singular".into()))?;
        Ok(Self {
            coords: coords.to_vec(),
            mean: DVector::from_fn(n, |i, _| state.eta[coords[i]]),
            l_inv,
            log_det_l,
            entries: local,
            dim_eta: family.dim_eta(),
        })
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    /// Marginal log density and standardized point for `x = θ[coords]`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coords.len() {
            return Err(Error::Dimension { expected: self.coords.len(), got: x.len() });
        }
        let z = &self.l_inv * (DVector::from_column_slice(x) - &self.mean);
        Ok(-0.5 * z.norm_squared() - self.log_det_l - 0.5 * x.len() as f64 * LN_2PI)
    }

    /// Score of the marginal in η, with zeros outside the block.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.coords.len() {
            return Err(Error::Dimension { expected: self.coords.len(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("score requested at non-finite point {x:?}")));
        }
        let z = &self.l_inv * (DVector::from_column_slice(x) - &self.mean);
        let u = self.l_inv.transpose() * &z;
        let mut out = vec![0.0; self.dim_eta];
        for (i, &c) in self.coords.iter().enumerate() {
            out[c] = u[i];
        }
        for &(r, c, eta, v) in &self.entries {
            out[eta] = if r == c { u[r] * z[c] * v - 1.0 } else { u[r] * z[c] };
        }
        Ok(out)
    }
}

/// Fit q to the posterior under `prior`.
pub fn fit(
    model: &dyn Model,
    prior: &ContaminatedPrior,
    family: &VariationalFamily,
    opts: &FitOptions,
) -> Result<VariationalState> {
    family.check()?;
    check_prior(model, prior)?;
    if family.dim_theta != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), got: family.dim_theta });
    }
    let objective = Objective::new(model, prior, family, &opts.policy)?;
    let start = match &opts.initial_eta {
        Some(eta) => {
            if eta.len() != family.dim_eta() {
                return Err(Error::Dimension { expected: family.dim_eta(), got: eta.len() });
            }
            eta.clone()
        }
        None => initial_eta(model, prior, family),
    };
    let run = optimizer::minimize(&objective, start, opts)?;
    Ok(VariationalState {
        family: family.clone(),
        eta: run.eta,
        converged: run.converged,
        kl_gradient_norm: run.gradient_norm,
        iterations: run.iterations,
        objective: run.value,
        epsilon: prior.epsilon,
        trace: run.accepted_values,
    })
}

/// Moment-match the prior block to `p(θ|ε)`, falling back to `p₀` when the
/// mixture has no variance; other coordinates start at the model's reference.
pub fn initial_eta(model: &dyn Model, prior: &ContaminatedPrior, family: &VariationalFamily) -> Vec<f64> {
    let (mut center, mut scale) = model.reference_point();
    let weights = [1.0 - prior.epsilon, prior.epsilon];
    let mixture = DensityKernel::mixture(&weights, vec![prior.p0.clone(), prior.pc.clone()]).ok();
    let moments = mixture.as_ref().and_then(DensityKernel::moments).or_else(|| prior.p0.moments());
    if let Some((m, v)) = moments {
        for (k, &i) in model.prior_coords().iter().enumerate() {
            center[i] = m[k];
            scale[i] = v[k].sqrt();
        }
    }
    family.eta_from_moments(&center, &scale)
}

#[cfg(test)]
mod tests;
