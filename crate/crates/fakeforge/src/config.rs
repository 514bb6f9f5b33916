//! Harness configuration file and per-run metadata.
//!
//! One TOML file declares every model endpoint by name and assigns them to
//! pipeline roles (annotators, aggregator, classifier, embedder, models under
//! test). Every artifact-producing run writes a run-metadata file whose digest
//! ties outputs to the exact configuration, prompt texts, and seed in play.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::EndpointConfig;
use crate::prompts::PromptCatalog;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(default)]
    pub annotators: Vec<String>,
    #[serde(default)]
    pub aggregator: Option<String>,
    #[serde(default)]
    pub classifier: Option<String>,
    #[serde(default)]
    pub embedder: Option<String>,
    #[serde(default)]
    pub models_under_test: Vec<String>,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    /// Alternative prompt asset directory; builtin texts when absent.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(default)]
    pub roles: Roles,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            workers: default_workers(),
            seed: 0,
            prompt_dir: None,
            endpoints: BTreeMap::new(),
            roles: Roles::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: HarnessConfig =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // endpoint names come from the table keys
        for (name, endpoint) in &mut config.endpoints {
            endpoint.name = name.clone();
            endpoint.validate()?;
        }
        config.validate_roles()?;
        Ok(config)
    }

    fn validate_roles(&self) -> Result<()> {
        let known = |name: &String| self.endpoints.contains_key(name);
        for name in &self.roles.annotators {
            if !known(name) {
                return Err(Error::Config(format!("unknown annotator endpoint {name:?}")));
            }
        }
        for role in [
            &self.roles.aggregator,
            &self.roles.classifier,
            &self.roles.embedder,
        ]
        .into_iter()
        .flatten()
        {
            if !known(role) {
                return Err(Error::Config(format!("unknown endpoint {role:?} in roles")));
            }
        }
        for name in &self.roles.models_under_test {
            if !known(name) {
                return Err(Error::Config(format!("unknown model-under-test {name:?}")));
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, name: &str) -> Result<&EndpointConfig> {
        self.endpoints
            .get(name)
            .ok_or_else(|| Error::Config(format!("no endpoint named {name:?} in config")))
    }

    pub fn annotator_endpoints(&self) -> Result<Vec<EndpointConfig>> {
        if self.roles.annotators.is_empty() {
            return Err(Error::Config("roles.annotators is empty".into()));
        }
        self.roles
            .annotators
            .iter()
            .map(|n| self.endpoint(n).cloned())
            .collect()
    }

    pub fn catalog(&self) -> Result<PromptCatalog> {
        match &self.prompt_dir {
            Some(dir) => PromptCatalog::from_dir(dir),
            None => PromptCatalog::builtin(),
        }
    }

    /// Digest of the canonical serialized config.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// What went into a run: enough to tell two artifact sets apart without
/// trusting filenames. Deliberately timestamp-free so identical runs produce
/// identical metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
    pub prompt_digests: BTreeMap<String, String>,
    /// endpoint name -> model name, for the roles this run used.
    pub endpoints: BTreeMap<String, String>,
    pub harness_version: String,
}

impl RunMetadata {
    pub fn new(command: &str, config: &HarnessConfig, catalog: &PromptCatalog) -> Self {
        RunMetadata {
            command: command.to_string(),
            seed: config.seed,
            config_digest: config.digest(),
            prompt_digests: catalog.digests().clone(),
            endpoints: config
                .endpoints
                .iter()
                .map(|(name, e)| (name.clone(), e.model_name.clone()))
                .collect(),
            harness_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("run metadata serializes")
                .as_bytes(),
        )
    }

    /// Write `run_meta.json` under the output directory; returns its digest.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<String> {
        let dir = out_dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_meta.json");
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(self.digest())
    }
}
