//! JSON config file. Every section is optional; command-line flags are
//! applied on top of it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use farms::allocators::{LrScheduleConfig, Metric, SparsityConfig};
use farms::analysis::SubsampleOverride;
use farms::bench::toy::ToyExperimentConfig;
use farms::SubsampleConfig;
use serde::Deserialize;

use crate::output::Format;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<String>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub metric: Option<Metric>,
    pub subsample: SubsampleConfig,
    pub layer_overrides: BTreeMap<String, SubsampleOverride>,
    pub lr: LrScheduleConfig,
    pub sparsity: SparsityConfig,
    pub mp_check: MpCheckSection,
    pub bias_bench: BiasBenchSection,
    pub toy: ToyExperimentConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpCheckSection {
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    pub bins: usize,
}

impl Default for MpCheckSection {
    fn default() -> Self {
        Self {
            m: 1000,
            n: 4000,
            trials: 5,
            bins: 50,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasBenchSection {
    pub shapes: Vec<(usize, usize)>,
    pub trials: usize,
}

impl Default for BiasBenchSection {
    fn default() -> Self {
        Self {
            shapes: vec![(100, 100), (200, 100), (512, 100), (1024, 100)],
            trials: 20,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Parses `ROWSxCOLS`.
pub fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((p(a)?, p(b)?))
}
