use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Method};
use crate::hetero::FamilyName;
use crate::models::MlpSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// One experiment: the task, how it is split over clients, model sizes, run
/// hyperparameters, the methods to run and the seeds to repeat over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub task: TaskSpec,
    pub partition: PartitionSpec,
    /// Fraction of each test client's samples that it keeps.
    #[serde(default = "one")]
    pub test_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub hetero: HeteroSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the base prediction model.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Hidden widths of the adaptation model.
    #[serde(default = "default_adapt_hidden")]
    pub adapt_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            adapt_hidden: default_adapt_hidden(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroSettings {
    /// Families assigned to training clients in turn.
    #[serde(default = "default_families")]
    pub families: Vec<FamilyName>,
    /// Family of onboarded test clients; cycles through `families` if absent.
    #[serde(default)]
    pub onboard_family: Option<FamilyName>,
    #[serde(default = "default_public_samples")]
    pub public_samples: usize,
    /// Distillation steps that bring a new client's fresh models up to the
    /// ensemble before it personalizes.
    #[serde(default = "default_onboard_steps")]
    pub onboard_steps: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

impl Default for HeteroSettings {
    fn default() -> Self {
        Self {
            families: default_families(),
            onboard_family: None,
            public_samples: default_public_samples(),
            onboard_steps: default_onboard_steps(),
            lambdas: default_lambdas(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_methods() -> Vec<Method> {
    vec![Method::FedAvg, Method::FedTta]
}

fn one() -> f64 {
    1.0
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_adapt_hidden() -> Vec<usize> {
    vec![32, 32, 32]
}

fn default_families() -> Vec<FamilyName> {
    FamilyName::ALL.to_vec()
}

fn default_public_samples() -> usize {
    500
}

fn default_onboard_steps() -> usize {
    200
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

impl ExperimentConfig {
    /// Parses and validates. Unknown keys and schema mismatches are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("method {m} listed twice"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction <= 1.0) {
            return bad(format!(
                "test_fraction must lie in (0, 1], got {}",
                self.test_fraction
            ));
        }
        self.task.validate()?;
        self.partition.validate()?;
        self.federation.validate(self.partition.n_train_clients)?;
        self.prediction_spec()?;
        self.adaptation_spec()?;
        let h = &self.hetero;
        if h.families.is_empty() || h.public_samples == 0 {
            return bad("hetero needs at least one family and one public sample".into());
        }
        if h.lambdas.is_empty() || h.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("hetero lambdas must be a non-empty list of non-negative numbers".into());
        }
        Ok(())
    }

    pub fn prediction_spec(&self) -> Result<MlpSpec> {
        MlpSpec::with_hidden(self.task.dim, &self.model.hidden, self.task.n_classes)
    }

    pub fn adaptation_spec(&self) -> Result<MlpSpec> {
        MlpSpec::with_hidden(self.task.n_classes, &self.model.adapt_hidden, 1)
    }

    /// SHA-256 over the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}
