//! BFGS with backtracking, finished by damped Newton steps on the analytic
//! Hessian once the gradient is small.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::{ExpectationPolicy, Level, Objective};
use crate::error::{Error, Result};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the η-gradient.
    pub gradient_tolerance: f64,
    /// Switch to Newton steps below this gradient norm.
    pub newton_threshold: f64,
    pub policy: ExpectationPolicy,
    /// Warm start; prior moment matching otherwise.
    pub initial_eta: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-8,
            newton_threshold: 1e-3,
            policy: ExpectationPolicy::default(),
            initial_eta: None,
        }
    }
}

pub(super) struct Run {
    pub eta: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub accepted_values: Vec<f64>,
}

fn newton_direction(objective: &Objective, x: &DVector<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let h = objective.hessian(x.as_slice()).ok()?;
    let chol = h.cholesky()?;
    Some(-chol.solve(g))
}

pub(super) fn minimize(objective: &Objective, start: Vec<f64>, opts: &FitOptions) -> Result<Run> {
    let n = start.len();
    let mut x = DVector::from_vec(start);
    let (mut f, mut g) = objective.gradient(x.as_slice()).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("objective undefined at the starting point: {m}")),
        other => other,
    })?;
    let mut b_inv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut accepted = vec![f];
    let mut iterations = 0;
    let mut converged = g.amax() < opts.gradient_tolerance;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let gnorm = g.amax();
        let newton = if gnorm < opts.newton_threshold { newton_direction(objective, &x, &g) } else { None };
        let is_newton = newton.is_some();
        let mut d = newton.unwrap_or_else(|| -(&b_inv * &g));
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            b_inv = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
            slope = g.dot(&d);
        }

        let mut t = 1.0;
        let mut step = None;
        while t >= MIN_STEP {
            let trial = &x + &d * t;
            if let Ok(v) = objective.evaluate(trial.as_slice(), Level::Gradient) {
                let gt = v.gradient.expect("gradient requested");
                let sufficient = v.value <= f + ARMIJO * t * slope;
                // Near the optimum the decrease drowns in rounding; accept
                // Newton steps that do not raise the objective beyond it and
                // halve the gradient.
                let rounding = 16.0 * f64::EPSILON * f.abs().max(1.0);
                let polish = is_newton && v.value <= f + rounding && gt.amax() < 0.5 * gnorm;
                if sufficient || polish {
                    step = Some((trial, v.value, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = step else {
            if gnorm < 1e3 * opts.gradient_tolerance {
                // Stalled at rounding level just short of the tolerance.
                break;
            }
            return Err(Error::Numerical(format!(
                "line search failed at iteration {iterations} (gradient norm {gnorm:e})"
            )));
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                b_inv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let by = &b_inv * &y;
            let yby = y.dot(&by);
            b_inv += (&s * s.transpose()) * (rho * rho * yby + rho) - (&by * s.transpose() + &s * by.transpose()) * rho;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        accepted.push(f);
        converged = g.amax() < opts.gradient_tolerance;
    }

    let gradient_norm = g.amax();
    Ok(Run {
        eta: x.iter().copied().collect(),
        value: f,
        gradient_norm,
        iterations,
        converged,
        accepted_values: accepted,
    })
}
