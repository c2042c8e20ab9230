// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with full activation recording and declarative
//! interventions.
//!
//! Each block is `x + Σ_h Attn_h(x)` followed by `+ MLP(·)` with a ReLU MLP.
//! There is no layer normalisation. Attention projections carry no bias;
//! the MLP does. Token, position and segment embeddings are summed.

mod engine;
mod intervention;
mod trace;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Matrix;

pub use engine::{apply_knockout_semantics, forward, forward_with, generate, generate_with, Generated, Session};
pub use intervention::{Intervention, InterventionSpec, KnockoutMode, RunOptions, TraceLevel};
pub use trace::ActivationTrace;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Number of rows in the segment embedding table.
    pub max_segments: usize,
    /// Named residual channels (segment id, position, magnitude, …).
    #[serde(default)]
    pub channels: BTreeMap<String, usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("max_segments", self.max_segments),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::Config(format!("{name} must be at least 1")));
        }
        if self.d_head * self.n_heads > self.d_model {
            return Err(LabError::Config(format!(
                "d_head × n_heads = {} exceeds d_model = {}",
                self.d_head * self.n_heads,
                self.d_model
            )));
        }
        if let Some((name, &c)) = self.channels.iter().find(|(_, &c)| c >= self.d_model) {
            return Err(LabError::Config(format!(
                "channel {name} = {c} outside d_model {}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Residual index of a named channel.
    pub fn channel(&self, name: &str) -> Result<usize> {
        self.channels
            .get(name)
            .copied()
            .ok_or_else(|| LabError::Config(format!("no channel named {name:?}")))
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Projections of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// `d_model × d_head`
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `d_head × d_model`
    pub w_o: Matrix,
}

impl HeadWeights {
    pub fn zeros(d_model: usize, d_head: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_model, d_head),
            w_k: Matrix::zeros(d_model, d_head),
            w_v: Matrix::zeros(d_model, d_head),
            w_o: Matrix::zeros(d_head, d_model),
        }
    }

    /// A head whose output projection is zero writes nothing.
    pub fn is_inert(&self) -> bool {
        self.w_o.is_zero() || self.w_v.is_zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    /// `d_model × d_mlp`
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    /// `d_mlp × d_model`
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl MlpWeights {
    pub fn zeros(d_model: usize, d_mlp: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d_model, d_mlp),
            b_in: vec![0.0; d_mlp],
            w_out: Matrix::zeros(d_mlp, d_model),
            b_out: vec![0.0; d_model],
        }
    }

    pub fn is_inert(&self) -> bool {
        self.w_out.is_zero() && self.b_out.iter().all(|&b| b == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub mlp: MlpWeights,
}

/// Complete parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size × d_model`
    pub tok_emb: Matrix,
    /// `max_seq × d_model`
    pub pos_emb: Matrix,
    /// `max_segments × d_model`
    pub seg_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model × vocab_size`
    pub unembed: Matrix,
}

impl ModelWeights {
    /// All-zero weights of the right shapes.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let layer = LayerWeights {
            heads: vec![HeadWeights::zeros(c.d_model, c.d_head); c.n_heads],
            mlp: MlpWeights::zeros(c.d_model, c.d_mlp),
        };
        Ok(Self {
            tok_emb: Matrix::zeros(c.vocab_size, c.d_model),
            pos_emb: Matrix::zeros(c.max_seq, c.d_model),
            seg_emb: Matrix::zeros(c.max_segments, c.d_model),
            layers: vec![layer; c.n_layers],
            unembed: Matrix::zeros(c.d_model, c.vocab_size),
            config,
        })
    }

    /// Check every shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let check = |name: &str, m: &Matrix, r: usize, k: usize| -> Result<()> {
            if m.rows() != r || m.cols() != k {
                return Err(LabError::Shape(format!(
                    "{name} is {}x{}, expected {r}x{k}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.all_finite() {
                return Err(LabError::Shape(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        check("tok_emb", &self.tok_emb, c.vocab_size, c.d_model)?;
        check("pos_emb", &self.pos_emb, c.max_seq, c.d_model)?;
        check("seg_emb", &self.seg_emb, c.max_segments, c.d_model)?;
        check("unembed", &self.unembed, c.d_model, c.vocab_size)?;
        if self.layers.len() != c.n_layers {
            return Err(LabError::Shape(format!(
                "{} layers, expected {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.n_heads {
                return Err(LabError::Shape(format!("layer {l} has {} heads", layer.heads.len())));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                check(&format!("L{l}H{h}.w_q"), &head.w_q, c.d_model, c.d_head)?;
                check(&format!("L{l}H{h}.w_k"), &head.w_k, c.d_model, c.d_head)?;
                check(&format!("L{l}H{h}.w_v"), &head.w_v, c.d_model, c.d_head)?;
                check(&format!("L{l}H{h}.w_o"), &head.w_o, c.d_head, c.d_model)?;
            }
            check(&format!("L{l}.mlp.w_in"), &layer.mlp.w_in, c.d_model, c.d_mlp)?;
            check(&format!("L{l}.mlp.w_out"), &layer.mlp.w_out, c.d_mlp, c.d_model)?;
            let biases_ok = layer.mlp.b_in.len() == c.d_mlp
                && layer.mlp.b_out.len() == c.d_model
                && layer.mlp.b_in.iter().chain(&layer.mlp.b_out).all(|b| b.is_finite());
            if !biases_ok {
                return Err(LabError::Shape(format!("layer {l} MLP biases malformed")));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let w: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }
}
