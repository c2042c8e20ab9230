// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::trace::ActivationTrace;
use super::ModelConfig;
use crate::error::{LabError, Result};

/// A declared change to one forward pass.
///
/// Residual edits act on the stream *after* a layer's block (post-MLP). All
/// zero ablations are applied before any patch or restore; patches and
/// restores then apply in list order, later ones overriding earlier ones.
#[derive(Debug, Clone)]
pub enum Intervention {
    /// Zero the post-block residual at each position for each listed layer.
    ZeroAblate {
        positions: Vec<usize>,
        layers: Vec<usize>,
    },
    /// Overwrite the post-block residual at `dst_pos` with the donor's vector
    /// at `src_pos`, for each listed layer.
    PatchResid {
        source: Arc<ActivationTrace>,
        src_pos: usize,
        dst_pos: usize,
        layers: Vec<usize>,
    },
    /// Block attention from the listed queries to the listed keys in one head.
    Knockout {
        layer: usize,
        head: usize,
        queries: Vec<usize>,
        keys: Vec<usize>,
    },
    /// Put back the clean post-block residual of `layer` at `positions`.
    RestoreLayer {
        positions: Vec<usize>,
        layer: usize,
        source: Arc<ActivationTrace>,
    },
}

/// How knocked-out attention edges are removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutMode {
    /// Scores become −∞ before the softmax; survivors renormalise.
    #[default]
    PreSoftmax,
    /// Weights are zeroed after the softmax without renormalising.
    PostSoftmaxZero,
}

/// How much of the run to record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    /// Residuals, attention patterns, head outputs and logits.
    #[default]
    Full,
    /// Residuals and logits only.
    Lite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    #[serde(default)]
    pub knockout_mode: KnockoutMode,
    #[serde(default)]
    pub trace: TraceLevel,
}

impl RunOptions {
    pub fn lite() -> Self {
        Self {
            trace: TraceLevel::Lite,
            ..Self::default()
        }
    }
}

/// Serializable form of [`Intervention`]; donor traces are referred to by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionSpec {
    ZeroAblate {
        positions: Vec<usize>,
        layers: Vec<usize>,
    },
    PatchResid {
        source: String,
        src_pos: usize,
        dst_pos: usize,
        layers: Vec<usize>,
    },
    Knockout {
        layer: usize,
        head: usize,
        queries: Vec<usize>,
        keys: Vec<usize>,
    },
    RestoreLayer {
        positions: Vec<usize>,
        layer: usize,
        source: String,
    },
}

impl InterventionSpec {
    pub fn resolve(&self, sources: &HashMap<String, Arc<ActivationTrace>>) -> Result<Intervention> {
        let get = |name: &String| {
            sources
                .get(name)
                .cloned()
                .ok_or_else(|| LabError::Patch(format!("no donor trace named {name:?}")))
        };
        Ok(match self {
            Self::ZeroAblate { positions, layers } => Intervention::ZeroAblate {
                positions: positions.clone(),
                layers: layers.clone(),
            },
            Self::PatchResid {
                source,
                src_pos,
                dst_pos,
                layers,
            } => Intervention::PatchResid {
                source: get(source)?,
                src_pos: *src_pos,
                dst_pos: *dst_pos,
                layers: layers.clone(),
            },
            Self::Knockout {
                layer,
                head,
                queries,
                keys,
            } => Intervention::Knockout {
                layer: *layer,
                head: *head,
                queries: queries.clone(),
                keys: keys.clone(),
            },
            Self::RestoreLayer {
                positions,
                layer,
                source,
            } => Intervention::RestoreLayer {
                positions: positions.clone(),
                layer: *layer,
                source: get(source)?,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Compiled plan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum Write {
    Zero,
    Copy(Arc<ActivationTrace>, usize),
}

/// Query set and key set of one knockout.
type EdgeSets = (HashSet<usize>, HashSet<usize>);

#[derive(Debug, Default)]
pub(crate) struct Plan {
    writes: HashMap<(usize, usize), Write>,
    knocks: HashMap<(usize, usize), Vec<EdgeSets>>,
}

impl Plan {
    /// Validate every site against the model and a sequence length limit.
    pub(crate) fn compile(
        interventions: &[Intervention],
        config: &ModelConfig,
        seq_limit: usize,
    ) -> Result<Self> {
        let layer_ok = |l: usize| {
            if l < config.n_layers {
                Ok(())
            } else {
                Err(LabError::Site(format!("layer {l} ≥ n_layers {}", config.n_layers)))
            }
        };
        let pos_ok = |p: usize| {
            if p < seq_limit {
                Ok(())
            } else {
                Err(LabError::Site(format!("position {p} ≥ sequence length {seq_limit}")))
            }
        };
        let source_ok = |src: &ActivationTrace, layer: usize, pos: usize| -> Result<()> {
            match src.resid_at(layer, pos) {
                Some(v) if v.len() == config.d_model => Ok(()),
                Some(v) => Err(LabError::Patch(format!(
                    "donor d_model {} differs from {}",
                    v.len(),
                    config.d_model
                ))),
                None => Err(LabError::Patch(format!(
                    "donor has no residual at layer {layer}, position {pos}"
                ))),
            }
        };

        let mut plan = Plan::default();
        for iv in interventions {
            if let Intervention::ZeroAblate { positions, layers } = iv {
                for &l in layers {
                    layer_ok(l)?;
                    for &p in positions {
                        pos_ok(p)?;
                        plan.writes.insert((l, p), Write::Zero);
                    }
                }
            }
        }
        for iv in interventions {
            match iv {
                Intervention::ZeroAblate { .. } => {}
                Intervention::PatchResid {
                    source,
                    src_pos,
                    dst_pos,
                    layers,
                } => {
                    pos_ok(*dst_pos)?;
                    for &l in layers {
                        layer_ok(l)?;
                        source_ok(source, l, *src_pos)?;
                        plan.writes.insert((l, *dst_pos), Write::Copy(source.clone(), *src_pos));
                    }
                }
                Intervention::RestoreLayer {
                    positions,
                    layer,
                    source,
                } => {
                    layer_ok(*layer)?;
                    for &p in positions {
                        pos_ok(p)?;
                        source_ok(source, *layer, p)?;
                        plan.writes.insert((*layer, p), Write::Copy(source.clone(), p));
                    }
                }
                Intervention::Knockout {
                    layer,
                    head,
                    queries,
                    keys,
                } => {
                    layer_ok(*layer)?;
                    if *head >= config.n_heads {
                        return Err(LabError::Site(format!(
                            "head {head} ≥ n_heads {}",
                            config.n_heads
                        )));
                    }
                    for &p in queries.iter().chain(keys) {
                        pos_ok(p)?;
                    }
                    plan.knocks.entry((*layer, *head)).or_default().push((
                        queries.iter().copied().collect(),
                        keys.iter().copied().collect(),
                    ));
                }
            }
        }
        Ok(plan)
    }

    pub(crate) fn write_at(&self, layer: usize, pos: usize) -> Option<&Write> {
        if self.writes.is_empty() {
            return None;
        }
        self.writes.get(&(layer, pos))
    }

    /// Keys knocked out for this query in this head, if any.
    pub(crate) fn knocked(&self, layer: usize, head: usize, query: usize) -> Option<HashSet<usize>> {
        let rules = self.knocks.get(&(layer, head))?;
        let mut out = HashSet::new();
        for (qs, ks) in rules {
            if qs.contains(&query) {
                out.extend(ks.iter().copied());
            }
        }
        (!out.is_empty()).then_some(out)
    }
}
