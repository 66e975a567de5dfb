//! The CLI verbs. Each writes its artifacts into the output directory and
//! returns the exit code: 0 on success, otherwise the worst failure seen.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use vbsens::densities::{ContaminatedPrior, DensityKernel};
use vbsens::functional::Functional;
use vbsens::linear_response::{moment_with_jacobian, sensitivity_vb, LinearResponseBundle};
use vbsens::models::{HierarchicalTruth, Model};
use vbsens::oracle::{posterior_quadrature, QuadraturePosterior};
use vbsens::robustness::{
    evidence_ratio_relation, sensitivity_bound, sensitivity_exact, sensitivity_mv, sensitivity_mv_cached,
    ExactInfluence, InfluenceSource, PosteriorHandle, VbPosterior,
};
use vbsens::sampling::{metropolis, Estimate, ImportanceSampler, InfluenceCache};
use vbsens::stats::spearman;
use vbsens::variational::{fit, FitOptions, VariationalState};

use crate::config::{FunctionalSpec, Method, ModelSpec, RunConfig, Setup};
use crate::error::{CliError, ExitStatus};
use crate::output::{num, write_csv, write_json, write_sample_set, write_site_data, Provenance};

/// Largest number of points an influence grid may have.
pub const MAX_GRID_POINTS: usize = 1_000_000;
const DEFAULT_GRID_POINTS: usize = 101;
const DEFAULT_GRID_HALF_WIDTH_SDS: f64 = 4.0;
/// MCMC agreement threshold reported by `compare`, in MCMC standard errors.
const MEANS_AGREEMENT_SES: f64 = 3.0;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out)?;
        Ok(Self { config, out })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.config.hash(), seed: self.config.seed }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// A step that failed without stopping the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: String,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Default)]
struct Recorder {
    status: ExitStatus,
    failures: Vec<Failure>,
}

impl Recorder {
    fn take<T>(&mut self, step: &str, result: Result<T, CliError>) -> Option<T> {
        match result {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("{step}: {e}");
                self.status.record(&e);
                self.failures.push(Failure {
                    step: step.to_string(),
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                });
                None
            }
        }
    }
}

/// Non-finite values become `null`.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub value: f64,
    pub standard_error: f64,
    pub ess: Option<f64>,
    pub saturated: usize,
}

impl EstimateRecord {
    fn exact(value: f64) -> Self {
        Self { value, standard_error: 0.0, ess: None, saturated: 0 }
    }
}

impl From<Estimate> for EstimateRecord {
    fn from(e: Estimate) -> Self {
        Self { value: e.value, standard_error: e.standard_error, ess: finite(e.ess), saturated: e.saturated }
    }
}

/// Variational machinery shared by the verbs.
struct Vb<'s> {
    setup: &'s Setup,
    config: &'s RunConfig,
}

impl<'s> Vb<'s> {
    fn model(&self) -> &'s dyn Model {
        self.setup.model.as_model()
    }

    fn fit(&self, prior: &ContaminatedPrior, warm: Option<&VariationalState>) -> Result<VariationalState, CliError> {
        let opts = FitOptions {
            initial_eta: warm.map(|s| s.eta.clone()).or_else(|| self.config.optimizer.initial_eta.clone()),
            ..self.config.optimizer.clone()
        };
        let state = fit(self.model(), prior, &self.setup.family, &opts)?;
        if !state.converged {
            return Err(CliError::Convergence(format!(
                "variational fit at epsilon {} stopped after {} iterations with gradient norm {:e}",
                prior.epsilon, state.iterations, state.kl_gradient_norm
            )));
        }
        Ok(state)
    }

    fn expectation(&self, state: &VariationalState) -> Result<f64, CliError> {
        Ok(moment_with_jacobian(state, &self.setup.functional, &self.config.optimizer.policy)?.0)
    }

    fn bundle(&self, prior: &ContaminatedPrior, state: &VariationalState) -> Result<LinearResponseBundle, CliError> {
        Ok(LinearResponseBundle::new(
            self.model(),
            prior,
            state,
            &self.setup.functional,
            &self.config.optimizer.policy,
        )?)
    }

    fn sampler(&self, state: &VariationalState) -> Result<ImportanceSampler, CliError> {
        let spec = &self.config.importance;
        Ok(ImportanceSampler::from_state(
            state,
            &self.model().prior_coords(),
            spec.draws,
            self.config.component_seed("importance"),
            spec.variance_inflation,
        )?)
    }

    fn cache(&self, bundle: &LinearResponseBundle, state: &VariationalState) -> Result<InfluenceCache, CliError> {
        Ok(self.sampler(state)?.cache(|t| bundle.influence(t))?)
    }

    fn bound(&self, state: &VariationalState) -> Result<(f64, bool), CliError> {
        let post =
            VbPosterior::new(state.clone(), self.model().prior_coords(), self.config.component_seed("vb_draws"))?;
        let b = sensitivity_bound(&PosteriorHandle::Vb(post), &self.setup.functional, state.epsilon)?;
        Ok((b.value, b.vacuous))
    }
}

fn quadrature<'a>(model: &'a dyn Model, prior: &ContaminatedPrior) -> Result<QuadraturePosterior<'a>, CliError> {
    Ok(posterior_quadrature(model, prior)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub created_unix: u64,
    pub epsilon: f64,
    pub family: vbsens::variational::VariationalFamily,
    /// Order of the θ coordinates in `mean`, `variance` and `covariance`.
    pub parameter_names: Vec<String>,
    pub eta: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub kl_gradient_norm: f64,
    pub objective: f64,
}

pub fn cmd_fit(ctx: &Context) -> Result<i32, CliError> {
    let setup = ctx.config.build()?;
    let model = setup.model.as_model();
    let opts = &ctx.config.optimizer;
    let state = fit(model, &setup.prior, &setup.family, opts)?;
    let cov = state.covariance()?;
    let d = model.dim();
    let artifact = FitArtifact {
        provenance: ctx.provenance(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|t| t.as_secs()).unwrap_or(0),
        epsilon: state.epsilon,
        family: state.family.clone(),
        parameter_names: model.parameter_names(),
        eta: state.eta.clone(),
        mean: state.mean().to_vec(),
        variance: (0..d).map(|i| cov[(i, i)]).collect(),
        covariance: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        converged: state.converged,
        iterations: state.iterations,
        kl_gradient_norm: state.kl_gradient_norm,
        objective: state.objective,
    };
    write_json(&ctx.path("fit.json"), &artifact)?;
    let rows = state.trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), num(*v)]);
    write_csv(&ctx.path("fit_trace.csv"), &ctx.provenance(), &["iteration", "objective"], rows)?;
    info!("fit: {} iterations, gradient norm {:e}", state.iterations, state.kl_gradient_norm);
    if !state.converged {
        let e = CliError::Convergence(format!(
            "variational fit stopped after {} iterations with gradient norm {:e}",
            state.iterations, state.kl_gradient_norm
        ));
        warn!("{e}");
        return Ok(e.exit_code());
    }
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    /// `null` when vacuous.
    pub value: Option<f64>,
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub method: Method,
    pub epsilon: f64,
    pub functional: FunctionalSpec,
    pub expectation: Option<f64>,
    pub s_local: Option<EstimateRecord>,
    pub s_mv: Option<EstimateRecord>,
    pub s_bound: Option<BoundRecord>,
    pub delta_refit: Option<f64>,
    pub evidence_ratio: Option<f64>,
    pub failures: Vec<Failure>,
}

pub fn cmd_sensitivity(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    let setup = cfg.build()?;
    let model = setup.model.as_model();
    let prior = &setup.prior;
    let g = &setup.functional;
    let mut rec = Recorder::default();
    let mut report = SensitivityArtifact {
        provenance: ctx.provenance(),
        method: cfg.method(),
        epsilon: prior.epsilon,
        functional: cfg.functional.clone(),
        expectation: None,
        s_local: None,
        s_mv: None,
        s_bound: None,
        delta_refit: None,
        evidence_ratio: None,
        failures: Vec::new(),
    };
    match cfg.method() {
        Method::Exact => {
            if let Some(q) = rec.take("posterior", quadrature(model, prior)) {
                let post = PosteriorHandle::Quadrature(q);
                report.expectation = rec.take("expectation", post.expectation(g).map_err(CliError::from));
                report.s_local = rec.take(
                    "s_local",
                    sensitivity_exact(&post, prior, g).map(EstimateRecord::exact).map_err(CliError::from),
                );
                report.s_bound = rec.take(
                    "s_bound",
                    sensitivity_bound(&post, g, prior.epsilon)
                        .map(|b| BoundRecord { value: finite(b.value), vacuous: b.vacuous })
                        .map_err(CliError::from),
                );
            }
            let prior0 = prior.with_epsilon(0.0)?;
            if let Some(q0) = rec.take("posterior at epsilon 0", quadrature(model, &prior0)) {
                let source = InfluenceSource::Exact { posterior: &q0, g };
                report.s_mv =
                    rec.take("s_mv", sensitivity_mv(&source, prior).map(EstimateRecord::from).map_err(CliError::from));
                if cfg.refit {
                    let post0 = PosteriorHandle::Quadrature(q0);
                    if let Some(rel) =
                        rec.take("delta_refit", evidence_ratio_relation(&post0, &prior0, g).map_err(CliError::from))
                    {
                        report.delta_refit = Some(rel.delta);
                        report.evidence_ratio = Some(rel.ratio);
                    }
                }
            }
        }
        Method::Vb => {
            let vb = Vb { setup: &setup, config: cfg };
            let state0 = rec.take("fit at epsilon 0", vb.fit(&prior.with_epsilon(0.0)?, None));
            let state =
                if prior.epsilon == 0.0 { state0.clone() } else { rec.take("fit", vb.fit(prior, state0.as_ref())) };
            if let Some(state) = &state {
                report.expectation = rec.take("expectation", vb.expectation(state));
                if let Some(bundle) = rec.take("linear response", vb.bundle(prior, state)) {
                    report.s_local = rec.take(
                        "s_local",
                        vb.sampler(state)
                            .and_then(|s| Ok(sensitivity_vb(&bundle, &prior.pc, &s)?))
                            .map(EstimateRecord::from),
                    );
                }
                report.s_bound =
                    rec.take("s_bound", vb.bound(state).map(|(v, vacuous)| BoundRecord { value: finite(v), vacuous }));
            }
            if let Some(state0) = &state0 {
                let prior0 = prior.with_epsilon(0.0)?;
                let mv = vb
                    .bundle(&prior0, state0)
                    .and_then(|b| vb.cache(&b, state0))
                    .and_then(|c| Ok(sensitivity_mv_cached(&c, prior)?));
                report.s_mv = rec.take("s_mv", mv.map(EstimateRecord::from));
                if cfg.refit {
                    let delta = vb
                        .fit(&prior.with_epsilon(1.0)?, Some(state0))
                        .and_then(|s1| Ok(vb.expectation(&s1)? - vb.expectation(state0)?));
                    report.delta_refit = rec.take("delta_refit", delta);
                }
            }
        }
    }
    report.failures = rec.failures;
    write_json(&ctx.path("sensitivity.json"), &report)?;
    Ok(rec.status.0)
}

fn default_epsilon_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

/// One row of the ε-curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub expectation: f64,
    pub sensitivity: f64,
    pub sensitivity_se: f64,
    pub bound: f64,
}

impl CurvePoint {
    fn failed(epsilon: f64) -> Self {
        Self { epsilon, expectation: f64::NAN, sensitivity: f64::NAN, sensitivity_se: f64::NAN, bound: f64::NAN }
    }
}

pub fn cmd_epsilon_curve(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    let setup = cfg.build()?;
    let model = setup.model.as_model();
    let g = &setup.functional;
    let grid = cfg.epsilon_grid.clone().unwrap_or_else(default_epsilon_grid);
    if let Some(bad) = grid.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(CliError::Config(format!("epsilon grid value {bad} outside [0, 1]")));
    }
    let mut rec = Recorder::default();
    let vb = Vb { setup: &setup, config: cfg };
    let mut warm: Option<VariationalState> = None;
    let mut points = Vec::with_capacity(grid.len());
    for &eps in &grid {
        let prior = setup.prior.with_epsilon(eps)?;
        let point = match cfg.method() {
            Method::Exact => quadrature(model, &prior).and_then(|q| {
                let post = PosteriorHandle::Quadrature(q);
                let b = sensitivity_bound(&post, g, eps)?;
                Ok(CurvePoint {
                    epsilon: eps,
                    expectation: post.expectation(g)?,
                    sensitivity: sensitivity_exact(&post, &prior, g)?,
                    sensitivity_se: 0.0,
                    bound: b.value,
                })
            }),
            Method::Vb => vb.fit(&prior, warm.as_ref()).and_then(|state| {
                let bundle = vb.bundle(&prior, &state)?;
                let s = sensitivity_vb(&bundle, &prior.pc, &vb.sampler(&state)?)?;
                let point = CurvePoint {
                    epsilon: eps,
                    expectation: vb.expectation(&state)?,
                    sensitivity: s.value,
                    sensitivity_se: s.standard_error,
                    bound: vb.bound(&state)?.0,
                };
                warm = Some(state);
                Ok(point)
            }),
        };
        points.push(rec.take(&format!("epsilon {eps}"), point).unwrap_or_else(|| CurvePoint::failed(eps)));
    }
    let rows = points
        .iter()
        .map(|p| vec![num(p.epsilon), num(p.expectation), num(p.sensitivity), num(p.sensitivity_se), num(p.bound)]);
    write_csv(
        &ctx.path("epsilon_curve.csv"),
        &ctx.provenance(),
        &["epsilon", "expectation", "sensitivity", "sensitivity_se", "bound"],
        rows,
    )?;
    Ok(rec.status.0)
}

/// Axis values of a rectangular grid; at most two axes.
fn grid_axes(lower: &[f64], upper: &[f64], points: &[usize]) -> Result<Vec<Vec<f64>>, CliError> {
    if lower.len() != upper.len() || lower.len() != points.len() || lower.is_empty() || lower.len() > 2 {
        return Err(CliError::Config("theta grid needs matching lower/upper/points of length 1 or 2".into()));
    }
    let total = points.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n)).unwrap_or(usize::MAX);
    if total > MAX_GRID_POINTS {
        return Err(CliError::Config(format!("theta grid has {total} points, above the limit of {MAX_GRID_POINTS}")));
    }
    lower
        .iter()
        .zip(upper)
        .zip(points)
        .map(|((&lo, &hi), &n)| {
            if n < 2 || !(hi > lo) {
                return Err(CliError::Config("each grid axis needs at least 2 points and upper > lower".into()));
            }
            Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
        })
        .collect()
}

fn grid_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match axes {
        [x] => x.iter().map(|&a| vec![a]).collect(),
        [x, y] => x.iter().flat_map(|&a| y.iter().map(move |&b| vec![a, b])).collect(),
        _ => unreachable!("grid_axes allows one or two axes"),
    }
}

pub fn cmd_influence_grid(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    let setup = cfg.build()?;
    let model = setup.model.as_model();
    let prior = &setup.prior;
    let coords = model.prior_coords();
    if coords.len() > 2 {
        return Err(CliError::Config("influence grids cover at most two prior coordinates".into()));
    }
    if let Some(spec) = &cfg.theta_grid {
        grid_axes(&spec.lower, &spec.upper, &spec.points)?;
    }
    let default_axes = |mean: &[f64], sd: &[f64]| {
        let lower: Vec<f64> = mean.iter().zip(sd).map(|(m, s)| m - DEFAULT_GRID_HALF_WIDTH_SDS * s).collect();
        let upper: Vec<f64> = mean.iter().zip(sd).map(|(m, s)| m + DEFAULT_GRID_HALF_WIDTH_SDS * s).collect();
        grid_axes(&lower, &upper, &vec![DEFAULT_GRID_POINTS; mean.len()])
    };
    let configured = || cfg.theta_grid.as_ref().map(|s| grid_axes(&s.lower, &s.upper, &s.points)).transpose();
    let (axes, values): (Vec<Vec<f64>>, Vec<f64>) = match cfg.method() {
        Method::Exact => {
            let q = quadrature(model, prior)?;
            let exact = ExactInfluence::new(&q, &setup.functional)?;
            let axes = match configured()? {
                Some(a) => a,
                None => default_axes(q.mean(), q.sd())?,
            };
            let values = grid_points(&axes).iter().map(|t| exact.value(t)).collect();
            (axes, values)
        }
        Method::Vb => {
            let vb = Vb { setup: &setup, config: cfg };
            let state = vb.fit(prior, None)?;
            let bundle = vb.bundle(prior, &state)?;
            let axes = match configured()? {
                Some(a) => a,
                None => {
                    let cov = state.covariance()?;
                    let mean: Vec<f64> = coords.iter().map(|&c| state.mean()[c]).collect();
                    let sd: Vec<f64> = coords.iter().map(|&c| cov[(c, c)].sqrt()).collect();
                    default_axes(&mean, &sd)?
                }
            };
            let values =
                grid_points(&axes).iter().map(|t| bundle.influence(t).map(|v| v.value)).collect::<Result<_, _>>()?;
            (axes, values)
        }
    };
    if axes.len() != coords.len() {
        return Err(CliError::Config(format!("theta grid has {} axes, the prior has {}", axes.len(), coords.len())));
    }
    let mut header: Vec<String> = (1..=axes.len()).map(|i| format!("theta_{i}")).collect();
    header.push("influence_value".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = grid_points(&axes).into_iter().zip(values).map(|(t, v)| {
        let mut row: Vec<String> = t.iter().map(|&x| num(x)).collect();
        row.push(num(v));
        row
    });
    write_csv(&ctx.path("influence_grid.csv"), &ctx.provenance(), &header, rows)?;
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterComparison {
    pub parameter: String,
    pub vb_mean: Option<f64>,
    pub vb_sd: Option<f64>,
    pub mcmc_mean: Option<f64>,
    pub mcmc_se: Option<f64>,
    /// `(vb − mcmc) / mcmc_se`
    pub z: Option<f64>,
    pub oracle_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub contamination: String,
    pub delta_refit: Option<f64>,
    pub linear: Option<EstimateRecord>,
    pub mean_value: Option<EstimateRecord>,
    pub exact_delta: Option<f64>,
    pub exact_linear: Option<f64>,
    pub exact_mean_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub epsilon: f64,
    pub mcmc_acceptance_rate: Option<f64>,
    pub parameters: Vec<ParameterComparison>,
    /// Largest `|z|` over every parameter.
    pub max_abs_z: Option<f64>,
    /// Largest `|z|` over the coordinates carrying the contaminated prior.
    pub prior_block_max_abs_z: Option<f64>,
    /// Prior-block means agree within the MCMC threshold.
    pub means_agree: Option<bool>,
    pub max_oracle_vb_difference: Option<f64>,
    pub sweep: Vec<SweepRow>,
    /// Mean over the sweep of `|linear| / |delta_refit|`.
    pub mean_overprediction: Option<f64>,
    pub rank_correlation_mean_value: Option<f64>,
    pub rank_correlation_linear: Option<f64>,
    pub failures: Vec<Failure>,
}

pub fn cmd_compare(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    let setup = cfg.build()?;
    let model = setup.model.as_model();
    let prior = &setup.prior;
    let names = model.parameter_names();
    let d = model.dim();
    let vb = Vb { setup: &setup, config: cfg };
    let mut rec = Recorder::default();

    let state = rec.take("variational fit", vb.fit(prior, None));
    let chain = rec.take(
        "mcmc",
        metropolis(model, prior, &cfg.mcmc.metropolis(cfg.component_seed("mcmc"))).map_err(CliError::from),
    );
    let oracle = if d <= 2 { rec.take("oracle", quadrature(model, prior)) } else { None };
    if let (Some(chain), true) = (&chain, cfg.mcmc.save_samples) {
        write_sample_set(&ctx.path("samples.csv"), &ctx.path("samples.json"), &ctx.provenance(), &names, chain)?;
    }

    let vb_cov =
        state.as_ref().and_then(|s| rec.take("variational covariance", s.covariance().map_err(CliError::from)));
    let parameters: Vec<ParameterComparison> = (0..d)
        .map(|i| {
            let g = Functional::Coordinate(i);
            let vb_mean = state.as_ref().map(|s| s.mean()[i]);
            let (mcmc_mean, mcmc_se) = chain.as_ref().map(|c| c.mean_and_se(&g)).unzip();
            ParameterComparison {
                parameter: names[i].clone(),
                vb_mean,
                vb_sd: vb_cov.as_ref().map(|c| c[(i, i)].sqrt()),
                mcmc_mean,
                mcmc_se,
                z: match (vb_mean, mcmc_mean, mcmc_se) {
                    (Some(v), Some(m), Some(se)) => finite((v - m) / se),
                    _ => None,
                },
                oracle_mean: oracle.as_ref().map(|q| q.mean()[i]),
            }
        })
        .collect();
    let max_z = |idx: &mut dyn Iterator<Item = usize>| {
        (chain.is_some() && state.is_some())
            .then(|| idx.filter_map(|i| parameters[i].z).map(f64::abs).fold(0.0, f64::max))
    };
    let max_abs_z = max_z(&mut (0..d));
    let prior_block_max_abs_z = max_z(&mut model.prior_coords().into_iter());
    let max_oracle_vb_difference = (oracle.is_some() && state.is_some())
        .then(|| parameters.iter().map(|p| (p.vb_mean.unwrap() - p.oracle_mean.unwrap()).abs()).fold(0.0, f64::max));

    // Contamination sweep from the ε = 0 fit.
    let prior0 = prior.with_epsilon(0.0)?;
    let state0 = if prior.epsilon == 0.0 { state.clone() } else { rec.take("fit at epsilon 0", vb.fit(&prior0, None)) };
    let cache = state0
        .as_ref()
        .and_then(|s0| rec.take("influence cache", vb.bundle(&prior0, s0).and_then(|b| vb.cache(&b, s0))));
    let mean0 = state0.as_ref().and_then(|s0| rec.take("expectation at epsilon 0", vb.expectation(s0)));
    let exact0 = if d <= 2 { rec.take("oracle at epsilon 0", quadrature(model, &prior0)) } else { None };
    let exact_mean0 = exact0.as_ref().and_then(|q| q.expectation(&setup.functional).ok());
    let mut sweep = Vec::new();
    for (label, pc) in cfg.contaminations(model.prior_coords().len())? {
        let p = prior0.with_contamination(pc.clone())?;
        let step = |what: &str| format!("{label}: {what}");
        let delta_refit = match (&state0, mean0) {
            (Some(s0), Some(m0)) => rec.take(
                &step("refit"),
                vb.fit(&p.with_epsilon(1.0)?, Some(s0)).and_then(|s1| Ok(vb.expectation(&s1)? - m0)),
            ),
            _ => None,
        };
        let linear = cache
            .as_ref()
            .and_then(|c| rec.take(&step("linear"), c.estimate(&pc).map(EstimateRecord::from).map_err(CliError::from)));
        let mean_value = cache.as_ref().and_then(|c| {
            rec.take(
                &step("mean value"),
                sensitivity_mv_cached(c, &p).map(EstimateRecord::from).map_err(CliError::from),
            )
        });
        let (exact_delta, exact_linear, exact_mean_value) = match &exact0 {
            Some(q0) => sweep_exact(model, q0, &p, &setup.functional, exact_mean0, &pc)
                .map(|(a, b, c)| {
                    (
                        rec.take(&step("exact refit"), a),
                        rec.take(&step("exact linear"), b),
                        rec.take(&step("exact mean value"), c),
                    )
                })
                .unwrap_or((None, None, None)),
            None => (None, None, None),
        };
        sweep.push(SweepRow {
            contamination: label,
            delta_refit,
            linear,
            mean_value,
            exact_delta,
            exact_linear,
            exact_mean_value,
        });
    }

    let complete: Vec<(f64, f64, f64)> = sweep
        .iter()
        .filter_map(|r| Some((r.delta_refit?, r.linear.as_ref()?.value, r.mean_value.as_ref()?.value)))
        .collect();
    let summaries = complete.len() >= 2;
    let refits: Vec<f64> = complete.iter().map(|c| c.0).collect();
    let mean_overprediction = (!complete.is_empty())
        .then(|| complete.iter().map(|(d, s, _)| s.abs() / d.abs()).sum::<f64>() / complete.len() as f64)
        .and_then(finite);
    let rank = |k: usize| {
        summaries.then(|| {
            let x: Vec<f64> = complete.iter().map(|c| if k == 0 { c.1 } else { c.2 }).collect();
            spearman(&x, &refits)
        })
    };

    let artifact = CompareArtifact {
        provenance: ctx.provenance(),
        epsilon: prior.epsilon,
        mcmc_acceptance_rate: chain.as_ref().map(|c| c.acceptance_rate),
        max_abs_z,
        prior_block_max_abs_z,
        means_agree: prior_block_max_abs_z.map(|z| z < MEANS_AGREEMENT_SES),
        max_oracle_vb_difference,
        parameters,
        mean_overprediction,
        rank_correlation_linear: rank(0).and_then(finite),
        rank_correlation_mean_value: rank(1).and_then(finite),
        sweep,
        failures: rec.failures,
    };
    write_json(&ctx.path("compare.json"), &artifact)?;
    write_compare_csvs(ctx, &artifact)?;
    Ok(rec.status.0)
}

type ExactSweep = (Result<f64, CliError>, Result<f64, CliError>, Result<f64, CliError>);

/// Refit difference, ε = 0 slope and mean-value prediction by quadrature for one contamination.
fn sweep_exact(
    model: &dyn Model,
    q0: &QuadraturePosterior,
    prior: &ContaminatedPrior,
    g: &Functional,
    mean0: Option<f64>,
    pc: &DensityKernel,
) -> Option<ExactSweep> {
    let mean0 = mean0?;
    let delta = quadrature(model, &prior.with_epsilon(1.0).ok()?).and_then(|q1| Ok(q1.expectation(g)? - mean0));
    let linear =
        ExactInfluence::new(q0, g).and_then(|inf| inf.integrate_against(|t| pc.log_density(t))).map_err(CliError::from);
    let mv =
        sensitivity_mv(&InfluenceSource::Exact { posterior: q0, g }, prior).map(|e| e.value).map_err(CliError::from);
    Some((delta, linear, mv))
}

fn opt(x: Option<f64>) -> String {
    num(x.unwrap_or(f64::NAN))
}

fn write_compare_csvs(ctx: &Context, a: &CompareArtifact) -> Result<(), CliError> {
    let prov = ctx.provenance();
    let rows = a.parameters.iter().map(|p| {
        vec![p.parameter.clone(), opt(p.vb_mean), opt(p.vb_sd), opt(p.mcmc_mean), opt(p.mcmc_se), opt(p.oracle_mean)]
    });
    write_csv(
        &ctx.path("compare_means.csv"),
        &prov,
        &["parameter", "vb_mean", "vb_sd", "mcmc_mean", "mcmc_se", "oracle_mean"],
        rows,
    )?;
    let rows = a.sweep.iter().map(|r| {
        let (lin, lin_se) = r.linear.as_ref().map(|e| (e.value, e.standard_error)).unzip();
        let (mv, mv_se) = r.mean_value.as_ref().map(|e| (e.value, e.standard_error)).unzip();
        vec![
            r.contamination.clone(),
            opt(r.delta_refit),
            opt(lin),
            opt(lin_se),
            opt(mv),
            opt(mv_se),
            opt(r.exact_delta),
            opt(r.exact_linear),
            opt(r.exact_mean_value),
        ]
    });
    write_csv(
        &ctx.path("compare_sweep.csv"),
        &prov,
        &[
            "contamination",
            "delta_refit",
            "linear",
            "linear_se",
            "mean_value",
            "mean_value_se",
            "exact_delta",
            "exact_linear",
            "exact_mean_value",
        ],
        rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub truth: HierarchicalTruth,
    pub sites: usize,
    pub observations: usize,
    pub data_seed: u64,
    /// Per-site least-squares `(intercept, treatment effect)`.
    pub site_ols: Vec<[f64; 2]>,
}

pub fn cmd_simulate(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    let ModelSpec::Hierarchical { truth, .. } = &cfg.model else {
        return Err(CliError::Config("simulate needs the hierarchical model".into()));
    };
    let data = cfg.site_data()?.expect("hierarchical model");
    write_site_data(&ctx.path("site_data.csv"), &ctx.provenance(), &data)?;
    let site_ols = data.sites.iter().map(|s| s.ols()).collect::<Result<_, _>>()?;
    write_json(
        &ctx.path("truth.json"),
        &TruthArtifact {
            provenance: ctx.provenance(),
            truth: truth.clone(),
            sites: data.sites.len(),
            observations: data.total_observations(),
            data_seed: cfg.component_seed("data"),
            site_ols,
        },
    )?;
    Ok(0)
}

/// The CLI verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Verb {
    /// Fit the variational approximation and write `fit.json`.
    Fit,
    /// Local, mean-value and bound sensitivities with the refit difference.
    Sensitivity,
    /// Expectation, slope and bound over an epsilon grid.
    EpsilonCurve,
    /// Influence function on a grid over the prior coordinates.
    InfluenceGrid,
    /// Variational against MCMC means, and a sweep over contaminating priors.
    Compare,
    /// Simulate site data for the hierarchical model.
    Simulate,
}

pub fn run(verb: Verb, config: RunConfig, out: &Path) -> Result<i32, CliError> {
    let ctx = Context::new(config, out.to_path_buf())?;
    match verb {
        Verb::Fit => cmd_fit(&ctx),
        Verb::Sensitivity => cmd_sensitivity(&ctx),
        Verb::EpsilonCurve => cmd_epsilon_curve(&ctx),
        Verb::InfluenceGrid => cmd_influence_grid(&ctx),
        Verb::Compare => cmd_compare(&ctx),
        Verb::Simulate => cmd_simulate(&ctx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_axes_are_inclusive_and_capped() {
        let axes = grid_axes(&[0.0, -1.0], &[1.0, 1.0], &[3, 5]).unwrap();
        assert_eq!(axes[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(axes[1].len(), 5);
        assert_eq!(grid_points(&axes).len(), 15);
        assert!(grid_axes(&[0.0, 0.0], &[1.0, 1.0], &[1001, 1000]).is_err());
        assert!(grid_axes(&[0.0], &[1.0], &[1]).is_err());
        assert!(grid_axes(&[0.0; 3], &[1.0; 3], &[2; 3]).is_err());
    }

    #[test]
    fn recorder_keeps_the_worst_exit_code() {
        let mut rec = Recorder::default();
        assert_eq!(rec.take("a", Ok::<_, CliError>(1)), Some(1));
        rec.take::<()>("b", Err(CliError::Degenerate("x".into())));
        rec.take::<()>("c", Err(CliError::Convergence("y".into())));
        assert_eq!(rec.status.0, 3);
        assert_eq!(rec.failures.len(), 2);
    }
}
