use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{ConfigError, CostModel};

/// Control-plane and data-plane implementation under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Cached control plane, copy-on-fork sharing, user-space data path.
    Swift,
    /// Empty cache; a forked child sets everything up from scratch.
    Uncached,
    /// Cached-equivalent control plane with a single kernel connect call;
    /// every data-plane operation pays the syscall penalty.
    KernelMediated,
    /// No RDMA at all.
    Baseline,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Swift,
        Scheme::Uncached,
        Scheme::KernelMediated,
        Scheme::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Swift => "swift",
            Scheme::Uncached => "uncached",
            Scheme::KernelMediated => "kernel",
            Scheme::Baseline => "baseline",
        }
    }

    pub fn uses_rdma(self) -> bool {
        self != Scheme::Baseline
    }

    pub fn cached(self) -> bool {
        matches!(self, Scheme::Swift | Scheme::KernelMediated)
    }

    pub fn kernel_mediated(self) -> bool {
        self == Scheme::KernelMediated
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "swift" => Ok(Scheme::Swift),
            "uncached" => Ok(Scheme::Uncached),
            "kernel" | "kernel-mediated" | "kernel_mediated" => Ok(Scheme::KernelMediated),
            "baseline" => Ok(Scheme::Baseline),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// QPs each INIT creates and pre-connects.
    pub initial_qps: usize,
    /// Replenish when fewer than this many QPs are unassigned.
    pub threshold: usize,
    /// QPs created per replenish round.
    pub batch: usize,
    /// Hard cap on QPs per INIT.
    pub max_qps: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            initial_qps: 8,
            threshold: 4,
            batch: 4,
            max_qps: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub trials: usize,
    /// Periodic re-profile interval in virtual seconds; absent disables it.
    pub reprofile_period_s: Option<f64>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            trials: 16,
            reprofile_period_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinHandler {
    Noop,
    Echo,
    KvRead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerBinding {
    pub function: String,
    pub handler: BuiltinHandler,
}

/// A scenario file: costs, pool parameters and handler bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub costs: CostModel,
    pub pool: PoolConfig,
    pub cache: CacheConfig,
    pub handlers: Vec<HandlerBinding>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            costs: CostModel::default(),
            pool: PoolConfig::default(),
            cache: CacheConfig::default(),
            handlers: vec![
                HandlerBinding {
                    function: "noop".into(),
                    handler: BuiltinHandler::Noop,
                },
                HandlerBinding {
                    function: "echo".into(),
                    handler: BuiltinHandler::Echo,
                },
                HandlerBinding {
                    function: "kv-read".into(),
                    handler: BuiltinHandler::KvRead,
                },
            ],
        }
    }
}

impl ScenarioConfig {
    /// Parses a scenario. A file with none of the scenario sections is read
    /// as a bare cost model.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let sections = ["costs", "pool", "cache", "handlers"];
        if !table.is_empty() && !sections.iter().any(|s| table.contains_key(*s)) {
            return Ok(Self {
                costs: CostModel::from_toml_str(text)?,
                ..Self::default()
            });
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.costs.validate()?;
        if config.pool.max_qps < config.pool.initial_qps {
            return Err(ConfigError::Parse(
                "pool.max_qps must be >= pool.initial_qps".into(),
            ));
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is always serialisable")
    }
}
