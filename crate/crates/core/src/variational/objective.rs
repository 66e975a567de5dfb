//! Negative ELBO `E_q[log q − log p(x, θ)]` and its η-derivatives.
//!
//! Quadratic terms are integrated in closed form. Smooth terms are
//! integrated over the latent directions their coordinates load on:
//! Gauss–Hermite tensor rules for at most three directions, fixed-seed Monte
//! Carlo otherwise. Nodes do not depend on η, so the derivatives below are
//! exact derivatives of the discretized objective.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Entry, VariationalFamily};
use crate::densities::ContaminatedPrior;
use crate::error::{Error, Result};
use crate::models::{Model, SmoothFunction, Term};
use crate::quadrature::gauss_hermite_tensor;

pub const GH_NODES: usize = 21;
pub const MC_DRAWS: usize = 4096;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpectationPolicy {
    /// Gauss–Hermite nodes per latent direction.
    pub gh_nodes: usize,
    /// Largest number of latent directions integrated by quadrature.
    pub max_quadrature_dim: usize,
    pub mc_draws: usize,
    pub seed: u64,
    /// Shuffle the node order with this seed (summation order only).
    pub node_permutation: Option<u64>,
}

impl Default for ExpectationPolicy {
    fn default() -> Self {
        Self { gh_nodes: GH_NODES, max_quadrature_dim: 3, mc_draws: MC_DRAWS, seed: 0, node_permutation: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

#[derive(Debug)]
struct NodeSet {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl NodeSet {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    fn permuted(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            let mut order: Vec<usize> = (0..self.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let points = order.iter().flat_map(|&k| self.point(k).to_vec()).collect();
            let weights = order.iter().map(|&k| self.weights[k]).collect();
            self.points = points;
            self.weights = weights;
        }
        self
    }
}

/// Wraps the contaminated prior as a smooth term.
struct PriorFunction(ContaminatedPrior);

impl SmoothFunction for PriorFunction {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.log_mixture(x).unwrap_or(f64::NAN)
    }

    fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> f64 {
        match self.0.log_mixture_derivatives(x) {
            Ok(d) => {
                g.copy_from_slice(d.gradient.as_slice());
                let n = g.len();
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = d.hessian[(i, j)];
                    }
                }
                d.value
            }
            Err(_) => f64::NAN,
        }
    }
}

#[derive(Clone)]
enum Kind {
    Quadratic { a: DMatrix<f64>, b: DVector<f64>, c: f64 },
    Smooth(Arc<dyn SmoothFunction>),
}

/// A term's view of the variational parameters.
struct Plan {
    kind: Kind,
    coords: Vec<usize>,
    /// Raw parameters: means of `coords`, then the `L` entries in those rows.
    /// Each carries (local row, latent position or None for a mean, η index, diagonal).
    raw: Vec<(usize, Option<usize>, usize, bool)>,
    nodes: Option<Arc<NodeSet>>,
}

pub struct Objective {
    family: VariationalFamily,
    entries: Vec<Entry>,
    dim_eta: usize,
    plans: Vec<Plan>,
    policy: ExpectationPolicy,
    tensor_rules: Vec<Arc<NodeSet>>,
}

impl Objective {
    pub fn new(
        model: &dyn Model,
        prior: &ContaminatedPrior,
        family: &VariationalFamily,
        policy: &ExpectationPolicy,
    ) -> Result<Self> {
        if !(prior.p0.supports_derivatives() && prior.pc.supports_derivatives()) {
            return Err(Error::Unsupported("fitting needs prior kernels with derivatives".into()));
        }
        if policy.gh_nodes == 0 || policy.mc_draws == 0 {
            return Err(Error::Validation("node counts must be positive".into()));
        }
        let tensor_rules = (1..=policy.max_quadrature_dim)
            .map(|d| {
                let (nodes, weights) = gauss_hermite_tensor(d, policy.gh_nodes);
                let set = NodeSet { dim: d, points: nodes.into_iter().flatten().collect(), weights };
                Arc::new(set.permuted(policy.node_permutation))
            })
            .collect();
        let mut obj = Self {
            family: family.clone(),
            entries: family.entries(),
            dim_eta: family.dim_eta(),
            plans: Vec::new(),
            policy: policy.clone(),
            tensor_rules,
        };
        let mut plans = Vec::with_capacity(model.terms().len() + 1);
        for (i, term) in model.terms().iter().enumerate() {
            let kind = match term {
                Term::Quadratic { a, b, c, .. } => Kind::Quadratic { a: a.clone(), b: b.clone(), c: *c },
                Term::Smooth { function, .. } => Kind::Smooth(function.clone()),
            };
            plans.push(obj.plan(kind, term.coords(), i as u64));
        }
        let prior_fn: Arc<dyn SmoothFunction> = Arc::new(PriorFunction(prior.clone()));
        plans.push(obj.plan(Kind::Smooth(prior_fn), &model.prior_coords(), plans.len() as u64));
        obj.plans = plans;
        Ok(obj)
    }

    pub fn family(&self) -> &VariationalFamily {
        &self.family
    }

    pub fn dim_eta(&self) -> usize {
        self.dim_eta
    }

    fn plan(&self, kind: Kind, coords: &[usize], stream: u64) -> Plan {
        let mut cols: Vec<usize> = self.entries.iter().filter(|e| coords.contains(&e.row)).map(|e| e.col).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut raw: Vec<(usize, Option<usize>, usize, bool)> =
            coords.iter().enumerate().map(|(p, &c)| (p, None, c, false)).collect();
        for e in &self.entries {
            if let Some(p) = coords.iter().position(|&c| c == e.row) {
                let j = cols.iter().position(|&c| c == e.col).expect("column collected");
                raw.push((p, Some(j), e.eta, e.is_diagonal()));
            }
        }
        let nodes = match kind {
            Kind::Quadratic { .. } => None,
            Kind::Smooth(_) => Some(self.nodes_for(cols.len(), stream)),
        };
        Plan { kind, coords: coords.to_vec(), raw, nodes }
    }

    fn nodes_for(&self, dim: usize, stream: u64) -> Arc<NodeSet> {
        if dim <= self.policy.max_quadrature_dim {
            return self.tensor_rules[dim - 1].clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.policy.seed);
        rng.set_stream(stream);
        let n = self.policy.mc_draws;
        let points = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let set = NodeSet { dim, points, weights: vec![1.0 / n as f64; n] };
        Arc::new(set.permuted(self.policy.node_permutation))
    }

    /// Negative ELBO with derivatives up to `level`.
    pub fn evaluate(&self, eta: &[f64], level: Level) -> Result<ObjectiveValue> {
        if eta.len() != self.dim_eta {
            return Err(Error::Dimension { expected: self.dim_eta, got: eta.len() });
        }
        let mut acc = Accumulator::new(self.dim_eta, level);
        for plan in &self.plans {
            expect_plan(plan, eta, level, -1.0, &mut acc)?;
        }
        // entropy = Σ log L_ii + d/2 (1 + log 2π)
        let d = self.family.dim_theta as f64;
        acc.value -= 0.5 * d * (1.0 + LN_2PI);
        for e in self.entries.iter().filter(|e| e.is_diagonal()) {
            acc.value -= eta[e.eta];
            if let Some(g) = acc.gradient.as_mut() {
                g[e.eta] -= 1.0;
            }
        }
        if !acc.value.is_finite() {
            return Err(Error::Numerical(format!("negative ELBO is {}", acc.value)));
        }
        Ok(acc.finish())
    }

    pub fn value(&self, eta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(eta, Level::Value)?.value)
    }

    pub fn gradient(&self, eta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let v = self.evaluate(eta, Level::Gradient)?;
        Ok((v.value, v.gradient.expect("gradient requested")))
    }

    pub fn hessian(&self, eta: &[f64]) -> Result<DMatrix<f64>> {
        let v = self.evaluate(eta, Level::Hessian)?;
        let h = v.hessian.expect("hessian requested");
        Ok((&h + h.transpose()) * 0.5)
    }

    /// `E_q[f(θ[coords])]` and its η-gradient.
    pub fn expect_function(
        &self,
        eta: &[f64],
        coords: &[usize],
        function: Arc<dyn SmoothFunction>,
        level: Level,
    ) -> Result<ObjectiveValue> {
        if eta.len() != self.dim_eta {
            return Err(Error::Dimension { expected: self.dim_eta, got: eta.len() });
        }
        let stream = 1_000_003 + coords.iter().fold(0u64, |h, &c| h.wrapping_mul(31).wrapping_add(c as u64));
        let plan = self.plan(Kind::Smooth(function), coords, stream);
        let mut acc = Accumulator::new(self.dim_eta, level);
        expect_plan(&plan, eta, level, 1.0, &mut acc)?;
        Ok(acc.finish())
    }
}

struct Accumulator {
    value: f64,
    gradient: Option<DVector<f64>>,
    hessian: Option<DMatrix<f64>>,
}

impl Accumulator {
    fn new(n: usize, level: Level) -> Self {
        Self {
            value: 0.0,
            gradient: (level >= Level::Gradient).then(|| DVector::zeros(n)),
            hessian: (level >= Level::Hessian).then(|| DMatrix::zeros(n, n)),
        }
    }

    fn finish(self) -> ObjectiveValue {
        ObjectiveValue { value: self.value, gradient: self.gradient, hessian: self.hessian }
    }
}

/// Add `sign · E_q[term]` and its derivatives to `acc`.
fn expect_plan(plan: &Plan, eta: &[f64], level: Level, sign: f64, acc: &mut Accumulator) -> Result<()> {
    let n_raw = plan.raw.len();
    let ns = plan.coords.len();
    let vals: Vec<f64> = plan.raw.iter().map(|&(_, _, k, diag)| if diag { eta[k].exp() } else { eta[k] }).collect();
    let mut grad = vec![0.0; if level >= Level::Gradient { n_raw } else { 0 }];
    let mut hess = vec![0.0; if level >= Level::Hessian { n_raw * n_raw } else { 0 }];
    let value;
    match &plan.kind {
        Kind::Quadratic { a, b, c } => {
            let m = &vals[..ns];
            let mut v = *c;
            for p in 0..ns {
                v += b[p] * m[p];
                for q in 0..ns {
                    v -= 0.5 * a[(p, q)] * m[p] * m[q];
                }
            }
            for (i, &(r1, c1, ..)) in plan.raw.iter().enumerate().skip(ns) {
                for (j, &(r2, c2, ..)) in plan.raw.iter().enumerate().skip(ns) {
                    if c1 == c2 {
                        v -= 0.5 * a[(r1, r2)] * vals[i] * vals[j];
                    }
                }
            }
            value = v;
            if level >= Level::Gradient {
                for p in 0..ns {
                    grad[p] = b[p] - (0..ns).map(|q| a[(p, q)] * m[q]).sum::<f64>();
                }
                for (i, &(r1, c1, ..)) in plan.raw.iter().enumerate().skip(ns) {
                    grad[i] = -plan
                        .raw
                        .iter()
                        .enumerate()
                        .skip(ns)
                        .filter(|(_, r)| r.1 == c1)
                        .map(|(j, r)| a[(r1, r.0)] * vals[j])
                        .sum::<f64>();
                }
            }
            if level >= Level::Hessian {
                for (i, &(r1, c1, ..)) in plan.raw.iter().enumerate() {
                    for (j, &(r2, c2, ..)) in plan.raw.iter().enumerate() {
                        if c1 == c2 {
                            hess[i * n_raw + j] = -a[(r1, r2)];
                        }
                    }
                }
            }
        }
        Kind::Smooth(f) => {
            let nodes = plan.nodes.as_ref().expect("smooth terms carry nodes");
            let mut x = vec![0.0; ns];
            let mut g = vec![0.0; ns];
            let mut h = vec![0.0; ns * ns];
            let mut factor = vec![0.0; n_raw];
            let mut total = 0.0;
            for k in 0..nodes.len() {
                let z = nodes.point(k);
                let w = nodes.weights[k];
                x.copy_from_slice(&vals[..ns]);
                for (i, &(r, col, ..)) in plan.raw.iter().enumerate().skip(ns) {
                    x[r] += vals[i] * z[col.expect("entry has a column")];
                }
                let fx = if level == Level::Value { f.value(&x) } else { f.derivatives(&x, &mut g, &mut h) };
                if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite log density {fx} at quadrature node θ = {x:?}")));
                }
                total += w * fx;
                if level == Level::Value {
                    continue;
                }
                for (i, &(_, col, ..)) in plan.raw.iter().enumerate() {
                    factor[i] = col.map_or(1.0, |c| z[c]);
                }
                for (i, &(r, ..)) in plan.raw.iter().enumerate() {
                    grad[i] += w * g[r] * factor[i];
                }
                if level >= Level::Hessian {
                    for (i, &(r1, ..)) in plan.raw.iter().enumerate() {
                        let wi = w * factor[i];
                        for (j, &(r2, ..)) in plan.raw.iter().enumerate() {
                            hess[i * n_raw + j] += wi * h[r1 * ns + r2] * factor[j];
                        }
                    }
                }
            }
            value = total;
        }
    }

    acc.value += sign * value;
    // Chain rule for log-scale diagonals: ∂/∂ℓ = L ∂/∂L, ∂²/∂ℓ² = L² ∂² + L ∂.
    let chain: Vec<f64> = plan.raw.iter().zip(&vals).map(|(&(_, _, _, diag), &v)| if diag { v } else { 1.0 }).collect();
    if let Some(gacc) = acc.gradient.as_mut() {
        for (i, &(_, _, k, _)) in plan.raw.iter().enumerate() {
            gacc[k] += sign * grad[i] * chain[i];
        }
    }
    if let Some(hacc) = acc.hessian.as_mut() {
        for (i, &(_, _, ki, diag)) in plan.raw.iter().enumerate() {
            for (j, &(_, _, kj, _)) in plan.raw.iter().enumerate() {
                hacc[(ki, kj)] += sign * hess[i * n_raw + j] * chain[i] * chain[j];
            }
            if diag {
                hacc[(ki, ki)] += sign * grad[i] * chain[i];
            }
        }
    }
    Ok(())
}
