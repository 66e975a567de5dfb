//! Scalar functions of interest `g(θ)` whose posterior expectations are tracked.

use std::fmt;
use std::sync::Arc;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub enum Functional {
    /// `θ_j`
    Coordinate(usize),
    /// `θ_j²`
    Square(usize),
    /// `Σ a_j θ_j + b`
    Linear {
        coefficients: Vec<f64>,
        offset: f64,
    },
    Constant(f64),
    /// `Σ w_i g_i`
    Sum(Vec<(f64, Functional)>),
    /// Arbitrary function with its gradient, depending only on `support`.
    Custom {
        support: Vec<usize>,
        value: Arc<ValueFn>,
        gradient: Arc<GradFn>,
    },
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Coordinate(j) => write!(f, "θ[{j}]"),
            Self::Square(j) => write!(f, "θ[{j}]²"),
            Self::Linear { coefficients, offset } => write!(f, "Linear({coefficients:?}, {offset})"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Sum(parts) => f.debug_list().entries(parts).finish(),
            Self::Custom { support, .. } => write!(f, "Custom(support={support:?})"),
        }
    }
}

impl Functional {
    pub fn custom<V, G>(support: Vec<usize>, value: V, gradient: G) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::Custom { support, value: Arc::new(value), gradient: Arc::new(gradient) }
    }

    /// `a·self + b·other`
    pub fn combine(a: f64, first: Functional, b: f64, second: Functional) -> Self {
        Self::Sum(vec![(a, first), (b, second)])
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            Self::Coordinate(j) => theta[*j],
            Self::Square(j) => theta[*j] * theta[*j],
            Self::Linear { coefficients, offset } => {
                offset + coefficients.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>()
            }
            Self::Constant(c) => *c,
            Self::Sum(parts) => parts.iter().map(|(w, g)| w * g.value(theta)).sum(),
            Self::Custom { value, .. } => value(theta),
        }
    }

    /// Gradient in θ over all `theta.len()` coordinates.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        match self {
            Self::Coordinate(j) => out[*j] = 1.0,
            Self::Square(j) => out[*j] = 2.0 * theta[*j],
            Self::Linear { coefficients, .. } => out[..coefficients.len()].copy_from_slice(coefficients),
            Self::Constant(_) => {}
            Self::Sum(parts) => {
                for (w, g) in parts {
                    for (o, v) in out.iter_mut().zip(g.gradient(theta)) {
                        *o += w * v;
                    }
                }
            }
            Self::Custom { gradient, .. } => out = gradient(theta),
        }
        out
    }

    /// Sorted coordinates the value depends on.
    pub fn support(&self) -> Vec<usize> {
        let mut s = match self {
            Self::Coordinate(j) | Self::Square(j) => vec![*j],
            Self::Linear { coefficients, .. } => (0..coefficients.len()).filter(|&j| coefficients[j] != 0.0).collect(),
            Self::Constant(_) => vec![],
            Self::Sum(parts) => parts.iter().flat_map(|(_, g)| g.support()).collect(),
            Self::Custom { support, .. } => support.clone(),
        };
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Largest coordinate index referenced, if any.
    pub fn max_index(&self) -> Option<usize> {
        self.support().last().copied()
    }
}
