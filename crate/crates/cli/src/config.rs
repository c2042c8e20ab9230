// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::{Path, PathBuf};

use countlab::constructor::CircuitSpec;
use countlab::harness::default_bins;
use countlab::mediation::{EdgeSelector, Role};
use serde::{Deserialize, Serialize};

/// Problem with the configuration or command line; exits with code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Construct(CircuitSpec),
    Weights(PathBuf),
}

impl Default for ModelSource {
    fn default() -> Self {
        Self::Construct(CircuitSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    /// Mode labels such as `structured/steps`.
    pub modes: Vec<String>,
    pub bins: Vec<(usize, usize)>,
    pub per_bin: usize,
    pub size_range: (usize, usize),
    /// Read tasks from a JSONL file instead of sampling.
    pub file: Option<PathBuf>,
    /// Explicit structured/steps tasks for the experiments.
    pub partitions: Option<Vec<Vec<usize>>>,
    pub item: String,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            modes: ["unstructured/no_steps", "unstructured/steps", "structured/no_steps", "structured/steps"]
                .map(String::from)
                .to_vec(),
            bins: default_bins().iter().map(|b| (b.lo, b.hi)).collect(),
            per_bin: 100,
            size_range: (3, 9),
            file: None,
            partitions: None,
            item: "apple".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Sampled structured/steps tasks per bin when no partitions are given.
    pub tasks_per_bin: usize,
    pub edges: Option<EdgeSelector>,
    pub role: Role,
    pub layers: Option<Vec<usize>>,
    pub step: usize,
    pub pair: (Vec<usize>, Vec<usize>),
    /// Additional random pairs for the cross-context patch.
    pub random_pairs: usize,
    pub heatmap_counts: Vec<usize>,
    pub heatmap_items: Vec<String>,
    pub heatmap_steps: bool,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            tasks_per_bin: 2,
            edges: None,
            role: Role::Boundary,
            layers: None,
            step: 2,
            pair: (vec![7, 4, 8], vec![5, 6, 3]),
            random_pairs: 0,
            heatmap_counts: (1..=30).collect(),
            heatmap_items: vec!["apple".into()],
            heatmap_steps: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub tasks: TaskParams,
    pub experiment: ExperimentParams,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
    }

    pub fn require_seed(&self, command: &str) -> anyhow::Result<u64> {
        self.seed.ok_or_else(|| {
            config_error(format!(
                "`{command}` samples tasks and needs a seed (--seed, config `seed`, or COUNTLAB_SEED)"
            ))
        })
    }
}
