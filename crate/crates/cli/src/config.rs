//! Run configuration: parsing, overrides, hashing and construction of the
//! core objects it describes.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vbsens::densities::{ContaminatedPrior, DensityKernel, Distribution};
use vbsens::functional::Functional;
use vbsens::models::{
    simulate, HierarchicalModel, HierarchicalPriors, HierarchicalTruth, Model, NormalLocation, SiteData,
};
use vbsens::sampling::{MetropolisConfig, DEFAULT_INFLATION};
use vbsens::variational::{FitOptions, VariationalFamily};

use crate::error::CliError;
use crate::output::read_site_data;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    /// `(sites, total observations)`
    pub fn sizes(self) -> (usize, usize) {
        match self {
            Scale::Desk => (10, 500),
            Scale::Paper => (30, 3000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Gaussian observations with known noise covariance and unknown location.
    NormalLocation { observations: Vec<Vec<f64>>, noise_covariance: Vec<Vec<f64>> },
    /// Site-effects model; data are simulated from `truth` unless `data_path` is given.
    Hierarchical {
        #[serde(default)]
        truth: HierarchicalTruth,
        #[serde(default)]
        priors: HierarchicalPriors,
        #[serde(default)]
        sites: Option<usize>,
        #[serde(default)]
        observations: Option<usize>,
        #[serde(default)]
        data_path: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    /// Required for the location model; the hierarchical model defaults to its Gaussian base prior.
    #[serde(default)]
    pub base: Option<Distribution>,
    #[serde(default)]
    pub contamination: Option<Distribution>,
    #[serde(default)]
    pub epsilon: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { base: None, contamination: None, epsilon: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilySpec {
    MeanField,
    FullCovariance,
    Hierarchical,
    Blockwise(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalSpec {
    Coordinate(usize),
    Square(usize),
    Linear { coefficients: Vec<f64>, offset: f64 },
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        FunctionalSpec::Coordinate(0)
    }
}

impl FunctionalSpec {
    pub fn build(&self) -> Functional {
        match self {
            FunctionalSpec::Coordinate(j) => Functional::Coordinate(*j),
            FunctionalSpec::Square(j) => Functional::Square(*j),
            FunctionalSpec::Linear { coefficients, offset } => {
                Functional::Linear { coefficients: coefficients.clone(), offset: *offset }
            }
        }
    }
}

/// Where sensitivities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Quadrature on the exact posterior; models of dimension at most two.
    Exact,
    /// Linear response around the variational fit with importance sampling over `p_c`.
    Vb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceSpec {
    pub draws: usize,
    pub variance_inflation: f64,
}

impl Default for ImportanceSpec {
    fn default() -> Self {
        Self { draws: 1 << 14, variance_inflation: DEFAULT_INFLATION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSpec {
    pub draws: usize,
    pub burn_in: usize,
    pub adaptation_window: usize,
    pub thin: usize,
    /// Write the draws as a CSV with a JSON sidecar.
    pub save_samples: bool,
}

impl Default for McmcSpec {
    fn default() -> Self {
        Self { draws: 1_000_000, burn_in: 100_000, adaptation_window: 500, thin: 1, save_samples: false }
    }
}

impl McmcSpec {
    pub fn metropolis(&self, seed: u64) -> MetropolisConfig {
        MetropolisConfig {
            draws: self.draws,
            burn_in: self.burn_in,
            adaptation_window: self.adaptation_window,
            thin: self.thin,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub family: Option<FamilySpec>,
    #[serde(default)]
    pub optimizer: FitOptions,
    #[serde(default)]
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub method: Option<Method>,
    /// Also compute the refit difference between `ε = 1` and `ε = 0`.
    #[serde(default = "default_true")]
    pub refit: bool,
    #[serde(default)]
    pub importance: ImportanceSpec,
    #[serde(default)]
    pub mcmc: McmcSpec,
    #[serde(default)]
    pub epsilon_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_grid: Option<ThetaGrid>,
    /// Contaminating priors for the comparison sweep; Student-t products by default.
    #[serde(default)]
    pub contaminations: Option<Vec<Distribution>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Option<Scale>,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Parse JSON; syntax and schema errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Apply command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, scale: Option<Scale>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if scale.is_some() {
            self.scale = scale;
        }
        self
    }

    /// SHA-256 of the canonical JSON (sorted keys, no whitespace) of the effective config.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Seed for one named component, derived from the root seed.
    pub fn component_seed(&self, component: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(component.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(match self.model {
            ModelSpec::NormalLocation { .. } => Method::Exact,
            ModelSpec::Hierarchical { .. } => Method::Vb,
        })
    }

    pub fn hierarchical_sizes(&self) -> Option<(usize, usize)> {
        match &self.model {
            ModelSpec::Hierarchical { sites, observations, .. } => {
                let (k, n) = self.scale.unwrap_or(Scale::Desk).sizes();
                Some((sites.unwrap_or(k), observations.unwrap_or(n)))
            }
            ModelSpec::NormalLocation { .. } => None,
        }
    }

    /// Site data for the hierarchical model: read from disk or simulated.
    pub fn site_data(&self) -> Result<Option<SiteData>, CliError> {
        let ModelSpec::Hierarchical { truth, data_path, .. } = &self.model else {
            return Ok(None);
        };
        if let Some(path) = data_path {
            return read_site_data(Path::new(path)).map(Some);
        }
        let (k, n) = self.hierarchical_sizes().expect("hierarchical model");
        Ok(Some(simulate(truth, k, n, self.component_seed("data")).map_err(CliError::config)?))
    }

    pub fn build(&self) -> Result<Setup, CliError> {
        let model = match &self.model {
            ModelSpec::NormalLocation { observations, noise_covariance } => {
                let d = noise_covariance.len();
                if noise_covariance.iter().any(|r| r.len() != d) {
                    return Err(CliError::Config("noise_covariance must be square".into()));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| noise_covariance[i][j]);
                BuiltModel::Location(NormalLocation::new(observations.clone(), cov).map_err(CliError::config)?)
            }
            ModelSpec::Hierarchical { truth, priors, .. } => {
                let data = self.site_data()?.expect("hierarchical model");
                BuiltModel::Hierarchical(
                    HierarchicalModel::new(data, truth.site_covariance, *priors).map_err(CliError::config)?,
                )
            }
        };
        let prior = self.prior(&model)?;
        let family = self.family(&model)?;
        let functional = self.functional.build();
        if let Some(j) = functional_support_max(&self.functional) {
            if j >= model.as_model().dim() {
                return Err(CliError::Config(format!(
                    "functional refers to coordinate {j} of a {}-dimensional model",
                    model.as_model().dim()
                )));
            }
        }
        Ok(Setup { model, prior, family, functional })
    }

    fn prior(&self, model: &BuiltModel) -> Result<ContaminatedPrior, CliError> {
        let kernel = |d: &Distribution| DensityKernel::from_descriptor(d).map_err(CliError::config);
        let (base, contamination) = match model {
            BuiltModel::Location(_) => {
                let base = self.prior.base.as_ref().ok_or_else(|| CliError::Config("prior.base is required".into()))?;
                let pc = self
                    .prior
                    .contamination
                    .as_ref()
                    .ok_or_else(|| CliError::Config("prior.contamination is required".into()))?;
                (kernel(base)?, kernel(pc)?)
            }
            BuiltModel::Hierarchical(m) => {
                let defaults = m.priors().contaminated(0.0).map_err(CliError::config)?;
                (
                    self.prior.base.as_ref().map(kernel).transpose()?.unwrap_or(defaults.p0),
                    self.prior.contamination.as_ref().map(kernel).transpose()?.unwrap_or(defaults.pc),
                )
            }
        };
        let prior = ContaminatedPrior::new(base, contamination, self.prior.epsilon).map_err(CliError::config)?;
        vbsens::models::check_prior(model.as_model(), &prior).map_err(CliError::config)?;
        Ok(prior)
    }

    fn family(&self, model: &BuiltModel) -> Result<VariationalFamily, CliError> {
        let d = model.as_model().dim();
        Ok(match (&self.family, model) {
            (None | Some(FamilySpec::Hierarchical), BuiltModel::Hierarchical(m)) => VariationalFamily::hierarchical(m),
            (Some(FamilySpec::Hierarchical), BuiltModel::Location(_)) => {
                return Err(CliError::Config("the hierarchical family needs the hierarchical model".into()))
            }
            (None | Some(FamilySpec::FullCovariance), _) => VariationalFamily::full_covariance(d),
            (Some(FamilySpec::MeanField), _) => VariationalFamily::mean_field(d),
            (Some(FamilySpec::Blockwise(blocks)), _) => {
                VariationalFamily::blockwise(d, blocks.clone()).map_err(CliError::config)?
            }
        })
    }

    /// Contaminating priors for the comparison sweep.
    pub fn contaminations(&self, prior_dim: usize) -> Result<Vec<(String, DensityKernel)>, CliError> {
        match &self.contaminations {
            Some(list) => list
                .iter()
                .map(|d| {
                    let label = serde_json::to_string(d).expect("descriptor serializes");
                    Ok((label, DensityKernel::from_descriptor(d).map_err(CliError::config)?))
                })
                .collect(),
            None => {
                let mut out = Vec::new();
                for nu in [0.5, 1.0, 2.0, 4.0] {
                    for scale in [1.0, 3.0] {
                        let t = DensityKernel::student_t(0.0, scale, nu).map_err(CliError::config)?;
                        let kernel = if prior_dim == 1 {
                            t
                        } else {
                            DensityKernel::product(vec![t; prior_dim]).map_err(CliError::config)?
                        };
                        out.push((format!("student_t(nu={nu}, scale={scale})"), kernel));
                    }
                }
                Ok(out)
            }
        }
    }
}

fn functional_support_max(spec: &FunctionalSpec) -> Option<usize> {
    match spec {
        FunctionalSpec::Coordinate(j) | FunctionalSpec::Square(j) => Some(*j),
        FunctionalSpec::Linear { coefficients, .. } => coefficients.len().checked_sub(1),
    }
}

pub enum BuiltModel {
    Location(NormalLocation),
    Hierarchical(HierarchicalModel),
}

impl BuiltModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            BuiltModel::Location(m) => m,
            BuiltModel::Hierarchical(m) => m,
        }
    }
}

/// Everything a command needs, built from a validated config.
pub struct Setup {
    pub model: BuiltModel,
    pub prior: ContaminatedPrior,
    pub family: VariationalFamily,
    pub functional: Functional,
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONJUGATE: &str = r#"{
        "model": {"kind": "normal_location", "observations": [[2.0]], "noise_covariance": [[1.0]]},
        "prior": {"base": {"type": "normal", "mean": 0, "variance": 1},
                  "contamination": {"type": "student_t", "loc": 0, "scale": 1, "nu": 1}}
    }"#;

    #[test]
    fn hash_ignores_key_order_and_whitespace() {
        let a = RunConfig::from_json(CONJUGATE).unwrap();
        let reordered = r#"{"prior": {"contamination": {"nu": 1, "scale": 1, "loc": 0, "type": "student_t"},
            "base": {"variance": 1, "mean": 0, "type": "normal"}},
            "model": {"noise_covariance": [[1.0]], "observations": [[2.0]], "kind": "normal_location"}}"#;
        let b = RunConfig::from_json(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_overrides(Some(5), None).hash());
    }

    #[test]
    fn component_seeds_differ_and_follow_the_root() {
        let a = RunConfig::from_json(CONJUGATE).unwrap();
        assert_ne!(a.component_seed("mcmc"), a.component_seed("importance"));
        let b = a.clone().with_overrides(Some(1), None);
        assert_ne!(a.component_seed("mcmc"), b.component_seed("mcmc"));
        assert_eq!(b.component_seed("mcmc"), b.clone().component_seed("mcmc"));
    }

    #[test]
    fn scale_sets_hierarchical_sizes_unless_given() {
        let c = RunConfig::from_json(r#"{"model": {"kind": "hierarchical"}}"#).unwrap();
        assert_eq!(c.hierarchical_sizes(), Some((10, 500)));
        assert_eq!(c.clone().with_overrides(None, Some(Scale::Paper)).hierarchical_sizes(), Some((30, 3000)));
        let fixed = RunConfig::from_json(r#"{"model": {"kind": "hierarchical", "sites": 4}}"#).unwrap();
        assert_eq!(fixed.with_overrides(None, Some(Scale::Paper)).hierarchical_sizes(), Some((4, 3000)));
    }

    #[test]
    fn location_model_needs_both_priors() {
        let c = RunConfig::from_json(
            r#"{"model": {"kind": "normal_location", "observations": [[2.0]], "noise_covariance": [[1.0]]}}"#,
        )
        .unwrap();
        assert!(matches!(c.build(), Err(CliError::Config(_))));
        assert!(RunConfig::from_json(CONJUGATE).unwrap().build().is_ok());
    }

    #[test]
    fn default_sweep_is_eight_student_t_products() {
        let c = RunConfig::from_json(CONJUGATE).unwrap();
        let sweep = c.contaminations(2).unwrap();
        assert_eq!(sweep.len(), 8);
        assert!(sweep.iter().all(|(_, k)| k.dim() == 2));
    }
}
