//! Models are sums of log-density terms over subsets of θ, plus the
//! contaminated prior on a designated block of coordinates.
//!
//! Quadratic terms have closed-form Gaussian expectations. Smooth terms are
//! integrated numerically and must supply their own derivatives.

mod conjugate;
mod hierarchical;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::densities::ContaminatedPrior;
use crate::error::{Error, Result};

pub use conjugate::NormalLocation;
pub use hierarchical::{simulate, HierarchicalModel, HierarchicalPriors, HierarchicalTruth, Site, SiteData, SiteStats};

/// A twice-differentiable log-density contribution on a few coordinates.
pub trait SmoothFunction: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Returns the value and writes the gradient and the row-major Hessian.
    fn derivatives(&self, x: &[f64], gradient: &mut [f64], hessian: &mut [f64]) -> f64;
}

#[derive(Clone)]
pub enum Term {
    /// `−½ xᵀA x + bᵀx + c` with `x = θ[coords]`.
    Quadratic {
        coords: Vec<usize>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: f64,
    },
    Smooth {
        coords: Vec<usize>,
        function: Arc<dyn SmoothFunction>,
    },
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Quadratic { coords, .. } => write!(f, "Quadratic({coords:?})"),
            Term::Smooth { coords, .. } => write!(f, "Smooth({coords:?})"),
        }
    }
}

impl Term {
    pub fn coords(&self) -> &[usize] {
        match self {
            Term::Quadratic { coords, .. } | Term::Smooth { coords, .. } => coords,
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let x: Vec<f64> = self.coords().iter().map(|&i| theta[i]).collect();
        match self {
            Term::Quadratic { a, b, c, .. } => {
                let x = DVector::from_vec(x);
                -0.5 * x.dot(&(a * &x)) + b.dot(&x) + c
            }
            Term::Smooth { function, .. } => function.value(&x),
        }
    }
}

pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    /// Coordinates of θ that carry the contaminated prior, in prior order.
    fn prior_coords(&self) -> Vec<usize>;

    /// Every log-density term except the contaminated prior.
    fn terms(&self) -> &[Term];

    /// A rough location and scale per coordinate, used to start optimizers
    /// and to place quadrature domains.
    fn reference_point(&self) -> (Vec<f64>, Vec<f64>);

    fn parameter_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta[{}]", i + 1)).collect()
    }

    /// Log of everything except the contaminated prior.
    fn log_rest(&self, theta: &[f64]) -> f64 {
        self.terms().iter().map(|t| t.value(theta)).sum()
    }

    fn log_joint(&self, prior: &ContaminatedPrior, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let sub: Vec<f64> = self.prior_coords().iter().map(|&i| theta[i]).collect();
        Ok(self.log_rest(theta) + prior.log_mixture(&sub)?)
    }
}

/// Check that the prior block has the prior's dimension.
pub fn check_prior(model: &dyn Model, prior: &ContaminatedPrior) -> Result<()> {
    let k = model.prior_coords().len();
    if k != prior.dim() {
        return Err(Error::Dimension { expected: k, got: prior.dim() });
    }
    Ok(())
}
