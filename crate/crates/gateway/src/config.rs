//! Gateway configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use verde_core::rag::{DEFAULT_THRESHOLD, DEFAULT_TOP_K};

use crate::guard::GuardrailConfig;
use crate::history::DEFAULT_HISTORY_BUDGET;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub server: ServerConfig,
    pub secrets: SecretsConfig,
    pub storage: StorageConfig,
    pub guardrails: GuardrailConfig,
    pub rag: RagConfig,
    pub history: HistoryConfig,
    pub login: LoginConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen_addr: SocketAddr,
    /// Operator token for `/admin` routes; `VERDE_ADMIN_TOKEN` overrides it.
    pub admin_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { listen_addr: SocketAddr::from(([127, 0, 0, 1], 8080)), admin_token: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecretsConfig {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// Data directory. Unset keeps everything in memory.
    pub path: Option<PathBuf>,
    pub sync: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagConfig {
    pub default_top_k: usize,
    pub default_threshold: f64,
}

impl Default for RagConfig {
    fn default() -> Self {
        Self { default_top_k: DEFAULT_TOP_K, default_threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoryConfig {
    pub token_budget: u64,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self { token_budget: DEFAULT_HISTORY_BUDGET }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoginConfig {
    /// Hex Ed25519 public key that signs identity assertions.
    pub public_key: Option<String>,
}

impl GatewayConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        let mut config = Self::parse(&text)?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.secrets.path, &mut config.storage.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.guardrails.validate().map_err(anyhow::Error::msg)?;
        anyhow::ensure!(self.rag.default_top_k >= 1, "rag.default_top_k must be at least 1");
        anyhow::ensure!(
            (-1.0..=1.0).contains(&self.rag.default_threshold),
            "rag.default_threshold must be in [-1, 1]"
        );
        Ok(())
    }
}
