//! TOML configuration file.
//!
//! ```toml
//! [fit]
//! iterations = 5000
//! mode = "unified"          # unified | fixed-product | fixed-godel | bilinear
//! holdout_points = 200000
//! [fit.sampler]
//! batch_size = 4096
//! [fit.adam]
//! lr = 1e-3
//! [model]
//! depth = 4
//! primitive = "quadric"     # quadric | sphere | plane
//! [prune]
//! threshold = 1e-3
//! points = 200000
//! ```
//!
//! Every key is optional; command-line flags override file values.

use std::path::Path;

use anyhow::{bail, Context};
use fuzzycsg::optimizer::FitConfig;
use fuzzycsg::primitives::PrimitiveKind;
use fuzzycsg::prune::{DEFAULT_PRUNE_POINTS, DEFAULT_PRUNE_THRESHOLD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub fit: FitConfig,
    pub model: ModelConfig,
    pub prune: PruneSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub primitive: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            primitive: "quadric".into(),
        }
    }
}

impl ModelConfig {
    pub fn kind(&self) -> anyhow::Result<PrimitiveKind> {
        match PrimitiveKind::from_name(&self.primitive) {
            Some(k) => Ok(k),
            None => bail!("unknown primitive family '{}'", self.primitive),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSettings {
    pub threshold: f64,
    pub points: usize,
}

impl Default for PruneSettings {
    fn default() -> Self {
        PruneSettings {
            threshold: DEFAULT_PRUNE_THRESHOLD,
            points: DEFAULT_PRUNE_POINTS,
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
