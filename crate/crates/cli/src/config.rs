//! Run configuration: one JSON document with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reserve_core::data::{GeneratorParams, DEFAULT_FOOTPRINT_SPREAD, DEFAULT_FRACTIONS};
use reserve_core::eval::BootstrapConfig;
use reserve_core::train::contextual::ContextualConfig;
use reserve_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SampleCovariance,
    Independent,
    LearnedStatic,
    Contextual,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SampleCovariance, Method::Independent, Method::LearnedStatic, Method::Contextual];

    pub fn label(self) -> &'static str {
        match self {
            Method::SampleCovariance => "Sample Covariance",
            Method::Independent => "Independent",
            Method::LearnedStatic => "Learned (Static)",
            Method::Contextual => "Contextual",
        }
    }

    /// Checkpoint file stem.
    pub fn key(self) -> &'static str {
        match self {
            Method::SampleCovariance => "sample_covariance",
            Method::Independent => "independent",
            Method::LearnedStatic => "learned_static",
            Method::Contextual => "contextual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: GeneratorParams,
    pub n_hours: usize,
    /// Train, tune and calibration fractions; the rest is test.
    pub fractions: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self { generator: GeneratorParams::default(), n_hours: 35_040, fractions: DEFAULT_FRACTIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub seed: u64,
    /// System JSON to load instead of the built-in ten-zone system.
    pub path: Option<PathBuf>,
    pub footprint_spread: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self { seed: 42, path: None, footprint_spread: DEFAULT_FOOTPRINT_SPREAD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tau: f64,
    pub taus: Vec<f64>,
    pub coupled: bool,
    pub alpha_tight: f64,
    pub alpha_loose: f64,
    /// Explicit tight set; chosen from the baseline reserve duals when absent.
    pub tight_zones: Option<Vec<usize>>,
    pub n_tight: usize,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tau: 0.95,
            taus: vec![0.90, 0.92, 0.95, 0.97, 0.99],
            coupled: false,
            alpha_tight: 0.90,
            alpha_loose: 1.50,
            tight_zones: None,
            n_tight: 3,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub data: DataSection,
    pub system: SystemSection,
    pub train: TrainConfig,
    pub contextual: ContextualConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            data: DataSection::default(),
            system: SystemSection::default(),
            train: TrainConfig::default(),
            contextual: ContextualConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.generator.seed = seed;
        self.system.seed = seed;
        self.train.seed = seed;
        self.contextual.seed = seed;
        self.eval.bootstrap.seed = seed;
        self
    }

    pub fn has(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: &str| Err(CliError::Usage(format!("invalid config key `{key}`: {msg}")));
        if self.methods.is_empty() {
            return bad("methods", "must list at least one method");
        }
        if self.has(Method::Contextual) && !self.has(Method::LearnedStatic) && self.contextual.init_from_static {
            return bad("methods", "contextual initialization from the static shape needs learned_static");
        }
        if self.data.n_hours < 48 {
            return bad("data.n_hours", "must be at least 48");
        }
        let eval_tau = &self.eval.tau;
        if !(*eval_tau > 0.0 && *eval_tau < 1.0) {
            return bad("eval.tau", "must lie in (0, 1)");
        }
        if self.eval.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("eval.taus", "entries must lie in (0, 1)");
        }
        if !(self.eval.alpha_tight > 0.0 && self.eval.alpha_loose > 0.0) {
            return bad("eval.alpha_tight", "transfer multipliers must be positive");
        }
        if self.system.footprint_spread < 0.0 || self.system.footprint_spread >= 1.0 {
            return bad("system.footprint_spread", "must lie in [0, 1)");
        }
        self.train.validate().map_err(CliError::from)?;
        self.contextual.validate().map_err(CliError::from)?;
        self.data.generator.validate().map_err(CliError::from)?;
        Ok(())
    }
}
