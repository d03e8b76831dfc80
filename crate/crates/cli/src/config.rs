//! Backend, embedder and service configuration shared by the CLI and the
//! HTTP service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lte_core::backend::{
    Backend, ChatClientConfig, ChatCompletionClient, MockOracle, MockOracleConfig,
};
use lte_core::embed::{
    Embedder, ReferenceEmbedder, ReferenceEmbedderConfig, RemoteEmbedder, RemoteEmbedderConfig,
};
use lte_core::prompt::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock(MockOracleConfig),
    Remote(ChatClientConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock(MockOracleConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Arc<dyn Backend>> {
        Ok(match self {
            BackendConfig::Mock(c) => {
                Arc::new(MockOracle::new(c.clone()).context("mock backend config")?)
            }
            BackendConfig::Remote(c) => {
                Arc::new(ChatCompletionClient::new(c.clone()).context("chat backend config")?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Reference(ReferenceEmbedderConfig),
    Remote(RemoteEmbedderConfig),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Reference(ReferenceEmbedderConfig::default())
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self {
            EmbedderConfig::Reference(c) => {
                Arc::new(ReferenceEmbedder::new(*c).context("reference embedder config")?)
            }
            EmbedderConfig::Remote(c) => Arc::new(
                RemoteEmbedder::connect(c.clone()).context("connecting to embedding service")?,
            ),
        })
    }
}

/// TOML configuration for `lte serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    /// Default retrieval count for `/query`.
    pub k: usize,
    pub template: PromptTemplate,
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    /// Restored at startup when present; written by `POST /snapshot`.
    pub snapshot_path: Option<PathBuf>,
    /// Maximum concurrent backend calls.
    pub max_concurrent_generations: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            k: 3,
            template: PromptTemplate::default(),
            backend: BackendConfig::default(),
            embedder: EmbedderConfig::default(),
            snapshot_path: None,
            max_concurrent_generations: 64,
        }
    }
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ServeConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.k >= 1, "k must be >= 1");
        anyhow::ensure!(
            self.max_concurrent_generations >= 1,
            "max_concurrent_generations must be >= 1"
        );
        Ok(())
    }
}
