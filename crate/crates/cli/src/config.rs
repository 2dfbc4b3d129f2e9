//! Run configuration documents (TOML).

use std::path::{Path, PathBuf};

use ptmap::component::ComponentConfig;
use ptmap::harness::{FilterConfig, Lorenz63Params, Method};
use ptmap::wavy::WavyConfig;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fit,
    Wavy,
    Lorenz63,
}

/// Only AICc is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Aicc,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub component: ComponentConfig,
    pub fit: Option<FitSection>,
    pub wavy: Option<WavyConfig>,
    pub lorenz63: Option<LorenzSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Comma-separated table, relative to the config file.
    pub input: PathBuf,
    /// Defaults to the dense lower-triangular structure.
    pub parent_sets: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub block_split: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzSection {
    #[serde(default = "default_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub model: Lorenz63Params,
    #[serde(default = "default_order")]
    pub update_order: [usize; 3],
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_sizes() -> Vec<usize> {
    vec![50, 250, 1000]
}

fn default_methods() -> Vec<Method> {
    vec![Method::Transport, Method::LinearBaseline]
}

fn default_order() -> [usize; 3] {
    [0, 1, 2]
}

fn default_true() -> bool {
    true
}

/// A parsed config with its location and content hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let sha256 = hex::encode(Sha256::digest(&bytes));
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, dir, sha256 };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |m: String| Err(CliError::Config(m));
        if c.seeds.is_empty() {
            return bad("seeds list is empty".into());
        }
        match c.experiment {
            Experiment::Fit => {
                let Some(fit) = &c.fit else {
                    return bad("experiment = \"fit\" needs a [fit] section".into());
                };
                if let Some(ps) = &fit.parent_sets {
                    ptmap::map::validate_parent_sets(ps, ps.len()).map_err(|e| CliError::Config(e.to_string()))?;
                }
            }
            Experiment::Wavy => {
                c.wavy
                    .clone()
                    .unwrap_or_default()
                    .validate()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            Experiment::Lorenz63 => {
                let l = c.lorenz63.clone().unwrap_or_else(default_lorenz);
                if l.ensemble_sizes.is_empty() || l.methods.is_empty() {
                    return bad("ensemble_sizes and methods must be non-empty".into());
                }
                if let Some(&n) = l.ensemble_sizes.iter().find(|&&n| n < 16) {
                    return bad(format!("ensemble size {n} is below 16"));
                }
                self.filter_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn lorenz(&self) -> LorenzSection {
        self.config.lorenz63.clone().unwrap_or_else(default_lorenz)
    }

    pub fn filter_config(&self) -> FilterConfig {
        let l = self.lorenz();
        FilterConfig {
            model: l.model,
            component: self.config.component,
            update_order: l.update_order,
            warm_start: l.warm_start,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

fn default_lorenz() -> LorenzSection {
    LorenzSection {
        ensemble_sizes: default_sizes(),
        methods: default_methods(),
        model: Lorenz63Params::default(),
        update_order: default_order(),
        warm_start: true,
    }
}
