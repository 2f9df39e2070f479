//! Experiment and matrix configuration files (TOML).
//!
//! Unknown keys are rejected everywhere. `schema_version` is mandatory and
//! must equal [`SCHEMA_VERSION`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use bdtd_core::adversary::AttackModel;
use bdtd_core::aggregation::AggregationRule;
use bdtd_core::features::{default_radius, FeatureMap, ProjectionMode};
use bdtd_core::grid::GridSpreadSpec;
use bdtd_core::mdp::{JointPolicy, NetworkedMdp, RandomMdpSpec};
use bdtd_core::protocol::{AgentRoster, ProtocolConfig, StepSchedule};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, ExpError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest state space for which a feature table is materialized.
pub const TABLE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    GridSpread(GridSpreadSpec),
    RandomMdp(RandomMdpSpec),
}

impl EnvironmentSpec {
    pub fn num_agents(&self) -> usize {
        match self {
            Self::GridSpread(g) => g.num_agents,
            Self::RandomMdp(r) => r.num_agents,
        }
    }

    pub fn build(&self) -> Result<NetworkedMdp> {
        Ok(match self {
            Self::GridSpread(g) => g.build()?,
            Self::RandomMdp(r) => r.build()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSpec {
    pub n: usize,
    pub f: usize,
    #[serde(default)]
    pub byzantine: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Scalar features drawn uniformly from `[low, 1]`.
    Scalar {
        #[serde(default = "default_scalar_low")]
        low: f64,
        seed: u64,
    },
    Constant { value: f64 },
    Tabular,
    RandomTable { dim: usize, seed: u64 },
    /// Seeded per-state features computed on demand; works for any state count.
    Hashed { dim: usize, seed: u64 },
}

fn default_scalar_low() -> f64 {
    0.5
}

impl FeatureSpec {
    pub fn build(&self, state_count: usize) -> Result<FeatureMap> {
        if !matches!(self, Self::Hashed { .. }) && state_count > TABLE_LIMIT {
            return Err(ExpError::Config(format!(
                "{state_count} states is too many for a feature table; use hashed features"
            )));
        }
        Ok(match *self {
            Self::Scalar { low, seed } => FeatureMap::random_scalar(state_count, low, seed)?,
            Self::Constant { value } => FeatureMap::constant(state_count, value)?,
            Self::Tabular => FeatureMap::tabular(state_count)?,
            Self::RandomTable { dim, seed } => FeatureMap::random_table(state_count, dim, seed)?,
            Self::Hashed { dim, seed } => FeatureMap::hashed(state_count, dim, seed)?,
        })
    }
}

/// `radius = 12.5`, `radius = "auto"` or `radius = "none"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Fixed(f64),
    Keyword(RadiusKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusKeyword {
    Auto,
    None,
}

impl Default for Radius {
    fn default() -> Self {
        Self::Keyword(RadiusKeyword::Auto)
    }
}

impl Radius {
    /// `auto` uses `2 r_max / (phi_min (1 - gamma)^1.5)`; vector features take
    /// `phi_min = 1`.
    pub fn resolve(&self, mdp: &NetworkedMdp, features: &FeatureMap) -> Result<Option<f64>> {
        match *self {
            Self::Fixed(r) if r.is_finite() && r > 0.0 => Ok(Some(r)),
            Self::Fixed(r) => Err(ExpError::Config(format!("radius must be positive, got {r}"))),
            Self::Keyword(RadiusKeyword::None) => Ok(None),
            Self::Keyword(RadiusKeyword::Auto) => {
                let phi_min = features.phi_min().unwrap_or(1.0);
                Ok(Some(default_radius(mdp.r_max(), phi_min, mdp.discount())?))
            }
        }
    }
}

/// Everything about a run except the aggregation rule and the attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub environment: EnvironmentSpec,
    pub agents: AgentsSpec,
    pub features: FeatureSpec,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub radius: Radius,
    #[serde(default)]
    pub projection: ProjectionMode,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "yes")]
    pub include_self: bool,
    #[serde(default)]
    pub exclusion: Option<bool>,
    #[serde(default)]
    pub delivery_loss: f64,
}

fn yes() -> bool {
    true
}

/// Environment, policy and features shared by every run of a setup.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mdp: NetworkedMdp,
    pub policy: JointPolicy,
    pub features: FeatureMap,
    pub radius: Option<f64>,
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(ExpError::Config("horizon must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExpError::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(ExpError::Config("seeds must be distinct".into()));
        }
        let env_agents = self.environment.num_agents();
        if env_agents != self.agents.n {
            return Err(ExpError::Config(format!(
                "agents.n = {} but the environment has {env_agents} agents",
                self.agents.n
            )));
        }
        // roster checks: n >= 3f + 1, |F| <= f, ids in range
        AgentRoster::zeros(self.agents.n, self.agents.f, self.agents.byzantine.clone(), 1)?;
        Ok(())
    }

    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let mdp = self.environment.build()?;
        let features = self.features.build(mdp.state_count())?;
        let radius = self.radius.resolve(&mdp, &features)?;
        let policy = JointPolicy::uniform(&mdp);
        Ok(Prepared { mdp, policy, features, radius })
    }

    pub fn protocol(&self, prepared: &Prepared, rule: &AggregationRule, attack: &AttackModel) -> Result<ProtocolConfig> {
        let mut config = ProtocolConfig::new(rule.clone(), attack.clone(), self.schedule, prepared.radius, self.horizon);
        config.projection = self.projection;
        config.include_self = self.include_self;
        config.exclusion = self.exclusion;
        config.delivery_loss = self.delivery_loss;
        config.record_params = false;
        config.validate(prepared.features.dim())?;
        Ok(config)
    }

    pub fn roster(&self, prepared: &Prepared, byzantine: Vec<usize>) -> Result<AgentRoster> {
        Ok(AgentRoster::zeros(self.agents.n, self.agents.f, byzantine, prepared.features.dim())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Used when neither `--output` nor `BDTD_OUTPUT_ROOT` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Write per-agent parameter traces next to the metric CSVs.
    #[serde(default)]
    pub export_traces: bool,
    pub rule: AggregationRule,
    #[serde(default = "AttackModel::none")]
    pub attack: AttackModel,
    pub setup: Setup,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let config: Self = parse_toml(text, origin)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        check_name(&self.name)?;
        self.setup.validate()
    }

    /// SHA-256 of the canonical JSON form (sorted keys, output location excluded).
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        canonical_hash(&copy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub label: String,
    pub rule: AggregationRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub label: String,
    pub attack: AttackModel,
}

/// Methods x attacks over one shared setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Adds the fault-free FedAvg line (no Byzantine agents) to every chart.
    #[serde(default = "yes")]
    pub reference: bool,
    pub setup: Setup,
    #[serde(default)]
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
}

impl MatrixConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let config: Self = parse_toml(text, origin)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        check_name(&self.name)?;
        self.setup.validate()?;
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            if !labels.insert(m.label.as_str()) {
                return Err(ExpError::Config(format!("duplicate method label {:?}", m.label)));
            }
        }
        let mut slugs = BTreeSet::new();
        for a in &self.attacks {
            if !slugs.insert(slug(&a.label)) {
                return Err(ExpError::Config(format!("duplicate attack label {:?}", a.label)));
            }
        }
        if !self.reference && (self.methods.is_empty() || self.attacks.is_empty()) {
            return Err(ExpError::Config("matrix has nothing to run".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        canonical_hash(&copy)
    }
}

fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| ExpError::Parse { path: origin.to_path_buf(), message: e.to_string() })
}

fn check_schema(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(ExpError::Config(format!(
            "schema_version {version} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(ExpError::Config(format!("name {name:?} must be non-empty ASCII letters, digits, '-' or '_'")));
    }
    Ok(())
}

pub(crate) fn canonical_hash<T: Serialize>(value: &T) -> String {
    // serde_json maps are BTreeMaps, so keys come out sorted
    let value = serde_json::to_value(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Lowercase file-name form of a label.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}
