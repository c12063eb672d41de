use std::path::{Path, PathBuf};
use std::time::Duration;

use milab_core::engine::OffTrackPolicy;
use milab_core::gateway::GatewayConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::{BusyMode, ServiceOptions};
use crate::token::WEEK_SECS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Remote,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

/// Service settings. The model API key is read from the environment only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub backend: Backend,
    /// JSON-lines journal; in-memory only when unset.
    pub journal: Option<PathBuf>,
    /// Scripted replies for the mock backend, `{"agent": ["reply", ...]}`.
    pub mock_script: Option<PathBuf>,
    /// Directory of prompt files overriding the vendored ones.
    pub prompts: Option<PathBuf>,
    pub profile: String,
    pub offtrack_policy: OffTrackPolicy,
    pub busy_mode: BusyMode,
    pub handler_timeout_secs: u64,
    pub week_delay_secs: i64,
    pub context_volleys: usize,
    pub gateway: GatewayConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            backend: Backend::Remote,
            journal: None,
            mock_script: None,
            prompts: None,
            profile: "final".into(),
            offtrack_policy: OffTrackPolicy::FlagOnly,
            busy_mode: BusyMode::Queue,
            handler_timeout_secs: 180,
            week_delay_secs: WEEK_SECS,
            context_volleys: milab_core::automisc::DEFAULT_CONTEXT_VOLLEYS,
            gateway: GatewayConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid { path: path.display().to_string(), message };
        let raw = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
        toml::from_str(&raw).map_err(|e| invalid(e.to_string()))
    }

    pub fn options(&self) -> ServiceOptions {
        ServiceOptions {
            busy_mode: self.busy_mode,
            handler_timeout: Duration::from_secs(self.handler_timeout_secs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_toml() {
        let cfg: ServiceConfig = toml::from_str(
            "backend = \"mock\"\nbusy_mode = \"reject\"\n[gateway]\nmax_attempts = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.backend, Backend::Mock);
        assert_eq!(cfg.busy_mode, BusyMode::Reject);
        assert_eq!(cfg.gateway.max_attempts, 5);
        assert_eq!(cfg.week_delay_secs, WEEK_SECS);
        assert!(toml::from_str::<ServiceConfig>("api_key = \"x\"").is_err());
    }
}
