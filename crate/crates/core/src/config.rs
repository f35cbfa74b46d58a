//! Cluster configuration file (TOML) and operating-point tables on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{calibrate, Anchor, CostError, CostParams, ModelSize};
use crate::demand::{Extrapolation, DEFAULT_DEMAND_FLOOR, DEFAULT_HISTORY_DEPTH};
use crate::domain::{validate_adapters, Adapter, DomainError, OperatingPointTable, Rank};
use crate::pool::DEFAULT_GPU_SLOTS;
use crate::sim::{SimConfig, DEFAULT_REBALANCE_SECONDS, DEFAULT_TIMEOUT_SECONDS};
use crate::traces::{load_adapters, TraceError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("operating point key {0:?} is not a rank")]
    BadRankKey(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Simulator knobs that live under `[sim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub rebalance_window: f64,
    pub timeout: f64,
    pub gpu_slots: usize,
    pub demand_floor: f64,
    pub history_depth: usize,
    pub extrapolation: Extrapolation,
    pub audit: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            rebalance_window: DEFAULT_REBALANCE_SECONDS,
            timeout: DEFAULT_TIMEOUT_SECONDS,
            gpu_slots: DEFAULT_GPU_SLOTS,
            demand_floor: DEFAULT_DEMAND_FLOOR,
            history_depth: DEFAULT_HISTORY_DEPTH,
            extrapolation: Extrapolation::Linear,
            audit: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub servers: usize,
    pub tp: u32,
    /// P95 TTFT target in seconds.
    pub slo: f64,
    /// When set, `cost` is recalibrated for this model size.
    pub model: Option<ModelSize>,
    pub cost: CostParams,
    pub sim: SimSettings,
    /// Rank (as a string key) to tokens/s.
    pub operating_points: BTreeMap<String, f64>,
    pub adapters: Vec<Adapter>,
    /// CSV of `id,rank,size_bytes`, relative to the config file.
    pub adapters_file: Option<PathBuf>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            servers: 4,
            tp: 1,
            slo: 10.0,
            model: None,
            cost: CostParams::default(),
            sim: SimSettings::default(),
            operating_points: BTreeMap::new(),
            adapters: Vec::new(),
            adapters_file: None,
        }
    }
}

impl ClusterConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: path.to_owned(),
            source,
        })?;
        if let Some(file) = cfg.adapters_file.take() {
            let full = match path.parent() {
                Some(dir) if file.is_relative() => dir.join(&file),
                _ => file,
            };
            cfg.adapters.extend(load_adapters(&full)?);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.servers == 0 {
            return Err(ConfigError::Invalid("servers must be >= 1".into()));
        }
        if self.tp == 0 {
            return Err(ConfigError::Invalid("tp must be >= 1".into()));
        }
        if !(self.slo > 0.0) {
            return Err(ConfigError::Invalid(format!("slo must be positive, got {}", self.slo)));
        }
        if !(self.sim.rebalance_window > 0.0) || !(self.sim.timeout > 0.0) {
            return Err(ConfigError::Invalid("rebalance_window and timeout must be positive".into()));
        }
        validate_adapters(&self.adapters)?;
        self.cost_params()?;
        self.operating_point_table()?;
        Ok(())
    }

    /// Cost parameters with the model preset and tensor parallelism applied.
    pub fn cost_params(&self) -> Result<CostParams, ConfigError> {
        let base = match self.model {
            Some(m) => calibrate(&self.cost, m, &Anchor::defaults())?,
            None => self.cost.clone(),
        };
        let p = base.with_tp(self.tp);
        p.validate()?;
        Ok(p)
    }

    /// `None` when no operating points are configured.
    pub fn operating_point_table(&self) -> Result<Option<OperatingPointTable>, ConfigError> {
        if self.operating_points.is_empty() {
            return Ok(None);
        }
        let mut map = BTreeMap::new();
        for (k, v) in &self.operating_points {
            let rank: Rank = k.trim().parse().map_err(|_| ConfigError::BadRankKey(k.clone()))?;
            map.insert(rank, *v);
        }
        Ok(Some(OperatingPointTable::new(map)?))
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        Ok(SimConfig {
            servers: self.servers,
            cost: self.cost_params()?,
            rebalance_window: self.sim.rebalance_window,
            timeout: self.sim.timeout,
            gpu_slots: self.sim.gpu_slots,
            demand_floor: self.sim.demand_floor,
            history_depth: self.sim.history_depth,
            extrapolation: self.sim.extrapolation,
            audit: self.sim.audit,
            ..SimConfig::default()
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OpRow {
    rank: Rank,
    max_tps: f64,
}

pub fn write_operating_points(path: &Path, table: &OperatingPointTable) -> Result<(), ConfigError> {
    let io = |e: csv::Error| ConfigError::Io {
        path: path.to_owned(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for (&rank, &max_tps) in table.as_map() {
        w.serialize(OpRow { rank, max_tps }).map_err(io)?;
    }
    w.flush().map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_operating_points(path: &Path) -> Result<OperatingPointTable, ConfigError> {
    let io = |e: csv::Error| ConfigError::Io {
        path: path.to_owned(),
        source: std::io::Error::other(e),
    };
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(io)?;
    let mut map = BTreeMap::new();
    for row in r.deserialize::<OpRow>() {
        let row = row.map_err(io)?;
        map.insert(row.rank, row.max_tps);
    }
    Ok(OperatingPointTable::new(map)?)
}
