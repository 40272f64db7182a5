//! Experiment configuration: a TOML file whose every key has a default,
//! overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use gpdyn::experiment::SparseConfig;
use gpdyn::mcmc::ChainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    LotkaVolterra,
    Logistic,
    BlackHole,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LotkaVolterra => "lotka-volterra",
            Self::Logistic => "logistic",
            Self::BlackHole => "black-hole",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    CaseA,
    CaseB,
    NnMcmc,
    SharedParam,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CaseA => "case-a",
            Self::CaseB => "case-b",
            Self::NnMcmc => "nn-mcmc",
            Self::SharedParam => "shared-param",
        })
    }
}

/// Full run description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required before anything runs; a flag may supply it.
    #[serde(default)]
    pub system: Option<SystemKind>,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    /// Root seed; every stage seed is derived from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `None` falls back to the environment or `runs/`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub gp: GpSection,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

fn default_scenario() -> Scenario {
    Scenario::CaseA
}

fn default_seed() -> u64 {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: None,
            scenario: default_scenario(),
            seed: default_seed(),
            out: None,
            data: DataConfig::default(),
            gp: GpSection::default(),
            inference: InferenceConfig::default(),
            prediction: PredictionConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Training data. Unset fields take the benchmark value of the system.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Retained fraction of the pool (Lotka–Volterra).
    pub density: Option<f64>,
    /// Exact number of training points (logistic, black hole).
    pub points: Option<usize>,
    /// Training window as a fraction of the horizon (logistic).
    pub train_fraction: Option<f64>,
    pub noise_level: f64,
    /// One trajectory per entry; several are only accepted by `shared-param`.
    pub initial_conditions: Option<Vec<Vec<f64>>>,
}

/// GP fitting. `chi_d_init` sets where `χᵈ` escalation starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub restarts: usize,
    pub subset_max: usize,
    pub max_iter: usize,
    pub polish_iter: usize,
    pub chi_d_init: Option<f64>,
}

impl Default for GpSection {
    fn default() -> Self {
        let d = gpdyn::gp::GpConfig::default();
        Self {
            restarts: d.restarts,
            subset_max: d.subset_max,
            max_iter: d.max_iter,
            polish_iter: d.polish_iter,
            chi_d_init: d.chi_d_init,
        }
    }
}

impl GpSection {
    pub fn to_gp(&self, seed: u64) -> gpdyn::gp::GpConfig {
        gpdyn::gp::GpConfig {
            restarts: self.restarts,
            seed,
            subset_max: self.subset_max,
            chi_d_init: self.chi_d_init,
            max_iter: self.max_iter,
            polish_iter: self.polish_iter,
        }
    }
}

/// Prior and sampler settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Prior precision for Case A, shared-parameter and network weights;
    /// unset means 0 for the affine scenarios and 0.01 for networks.
    pub lambda: Option<f64>,
    pub sparse: SparseConfig,
    /// Hidden width of the network right-hand side.
    pub hidden: usize,
    pub prior_draws: usize,
    pub map_iterations: usize,
    /// Chain budget; its `seed` is replaced by the derived stage seed.
    pub chain: ChainConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let n = gpdyn::network::NetworkSamplerConfig::default();
        Self {
            lambda: None,
            sparse: SparseConfig::default(),
            hidden: 8,
            prior_draws: n.prior_draws,
            map_iterations: n.map_iterations,
            chain: ChainConfig::default(),
        }
    }
}

/// Ensemble prediction. Unset fields take the benchmark value of the system.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    pub draws: usize,
    pub initial_condition: Option<Vec<f64>>,
    pub t_end: Option<f64>,
    /// Output spacing.
    pub dt: Option<f64>,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            draws: 100,
            initial_condition: None,
            t_end: None,
            dt: None,
        }
    }
}

/// The density × noise × seed sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub densities: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            densities: vec![1.0, 0.1, 0.05, 0.01],
            noise_levels: vec![0.0, 0.1, 0.2],
            seeds: vec![1],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<SystemKind, CliError> {
        self.system.ok_or_else(|| {
            CliError::Usage("no system given (use --system or the config file)".into())
        })
    }

    /// Reject combinations no pipeline handles.
    pub fn validate(&self) -> Result<(), CliError> {
        use Scenario::*;
        use SystemKind::*;
        let system = self.system()?;
        let ok = matches!(
            (system, self.scenario),
            (LotkaVolterra, CaseA | CaseB | SharedParam)
                | (Logistic, CaseA | CaseB | NnMcmc | SharedParam)
                | (BlackHole, SharedParam)
        );
        if !ok {
            return Err(CliError::Usage(format!(
                "scenario {} is not available for system {}",
                self.scenario, system
            )));
        }
        if let Some(d) = self.data.density {
            if !(d > 0.0 && d <= 1.0) {
                return Err(CliError::Usage(format!(
                    "density must be in (0, 1], got {d}"
                )));
            }
        }
        if !(self.data.noise_level >= 0.0 && self.data.noise_level.is_finite()) {
            return Err(CliError::Usage(format!(
                "noise level must be >= 0, got {}",
                self.data.noise_level
            )));
        }
        if let Some(ics) = &self.data.initial_conditions {
            let dim = self.state_dim();
            if ics.is_empty() || ics.iter().any(|ic| ic.len() != dim) {
                return Err(CliError::Usage(format!(
                    "initial conditions must be a non-empty list of {dim}-vectors"
                )));
            }
            if ics.len() > 1 && self.scenario != SharedParam {
                return Err(CliError::Usage(
                    "several initial conditions need the shared-param scenario".into(),
                ));
            }
        }
        if system == BlackHole && self.data.initial_conditions.is_some() {
            return Err(CliError::Usage(
                "the black-hole benchmark starts from (0, pi); initial conditions are fixed".into(),
            ));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.system {
            Some(SystemKind::Logistic) => 1,
            _ => 2,
        }
    }
}

/// Derive the seed of a pipeline stage from the root seed (SplitMix64).
/// Data generation uses the root seed itself.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    if stage == Stage::Data {
        return root;
    }
    let mut z = root.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data = 0,
    Gp = 1,
    Inference = 2,
    Prediction = 3,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_runnable() {
        let c = ExperimentConfig::parse("system = \"logistic\"\nscenario = \"nn-mcmc\"\n").unwrap();
        assert_eq!(c.system, Some(SystemKind::Logistic));
        assert_eq!(c.gp.restarts, 8);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("system = \"logistic\"\ncolour = 1\n").is_err());
        assert!(ExperimentConfig::parse("[gp]\nrestart = 3\n").is_err());
    }

    #[test]
    fn missing_system_is_a_usage_error() {
        let c = ExperimentConfig::parse("scenario = \"case-a\"\n").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig {
            system: Some(SystemKind::LotkaVolterra),
            ..ExperimentConfig::default()
        };
        c.data.density = Some(0.1);
        c.data.initial_conditions = Some(vec![vec![1.0, 1.0]]);
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let s: Vec<u64> = [Stage::Data, Stage::Gp, Stage::Inference, Stage::Prediction]
            .iter()
            .map(|&st| stage_seed(7, st))
            .collect();
        assert_eq!(s[0], 7);
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(stage_seed(7, Stage::Gp), s[1]);
    }

    #[test]
    fn incompatible_scenarios_are_usage_errors() {
        let c = ExperimentConfig {
            system: Some(SystemKind::BlackHole),
            scenario: Scenario::CaseA,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }
}
