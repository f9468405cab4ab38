//! Cluster configuration, read from TOML.
//!
//! ```toml
//! [refresh]
//! max_docs = 4096
//! max_age_ms = 5000
//! [poll]
//! interval_ms = 15000
//! [realtime]
//! interval_ms = 50
//! [merge]
//! unit = 1024
//! [split]
//! threshold_bytes = 268435456
//! [store]
//! root = "data/store"
//! [log]
//! root = "data/log"
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memindex::DEFAULT_UNIT;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshConfig {
    pub max_docs: u32,
    pub max_bytes: usize,
    pub max_age_ms: u64,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        RefreshConfig { max_docs: 4096, max_bytes: 64 << 20, max_age_ms: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalConfig {
    pub interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub threshold_bytes: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { threshold_bytes: 256 << 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootConfig {
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub unit: u32,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { unit: DEFAULT_UNIT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub refresh: RefreshConfig,
    /// Search-node segment polling.
    pub poll: IntervalConfig,
    /// Search-node consumption of in-place updates.
    pub realtime: IntervalConfig,
    pub split: SplitConfig,
    pub merge: MergeConfig,
    pub store: RootConfig,
    pub log: RootConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            refresh: RefreshConfig::default(),
            poll: IntervalConfig { interval_ms: 15_000 },
            realtime: IntervalConfig { interval_ms: 50 },
            split: SplitConfig::default(),
            merge: MergeConfig::default(),
            store: RootConfig::default(),
            log: RootConfig::default(),
        }
    }
}

impl ClusterConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ClusterConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.refresh.max_docs == 0 {
            return bad("refresh.max_docs must be at least 1");
        }
        if self.poll.interval_ms == 0 || self.realtime.interval_ms == 0 {
            return bad("intervals must be positive");
        }
        if self.merge.unit == 0 {
            return bad("merge.unit must be at least 1");
        }
        Ok(())
    }

    /// Shrinks the segment-path intervals (refresh age and poll) by
    /// `factor`, keeping them at least 1 ms. The in-place consumer interval
    /// is left alone.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |ms: u64| ((ms as f64 * factor).round() as u64).max(1);
        let mut c = self.clone();
        c.refresh.max_age_ms = s(c.refresh.max_age_ms);
        c.poll.interval_ms = s(c.poll.interval_ms);
        c
    }
}
