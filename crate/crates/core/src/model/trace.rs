// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Matrix;

/// Everything recorded during one forward pass.
///
/// `resid[l][p]` is the residual stream after layer `l`'s block, after any
/// intervention at that site. `attn[l][h][q]` holds the post-softmax weights
/// of query `q` over keys `0..=q`. Attention rows and head outputs are empty
/// when the run used [`TraceLevel::Lite`](super::TraceLevel::Lite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub tokens: Vec<u32>,
    pub embed: Vec<Vec<f64>>,
    pub resid: Vec<Vec<Vec<f64>>>,
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
    pub head_out: Vec<Vec<Vec<Vec<f64>>>>,
    pub logits: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub(crate) fn new(n_layers: usize, n_heads: usize, full: bool) -> Self {
        let per_head = if full { n_heads } else { 0 };
        Self {
            tokens: Vec::new(),
            embed: Vec::new(),
            resid: vec![Vec::new(); n_layers],
            attn: vec![vec![Vec::new(); per_head]; n_layers],
            head_out: vec![vec![Vec::new(); per_head]; n_layers],
            logits: Vec::new(),
        }
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.resid.len()
    }

    pub fn has_attention(&self) -> bool {
        self.attn.first().is_some_and(|l| !l.is_empty())
    }

    pub fn resid_at(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.resid.get(layer)?.get(pos).map(Vec::as_slice)
    }

    /// Attention weights of query `q` over keys `0..=q`.
    pub fn attn_row(&self, layer: usize, head: usize, q: usize) -> Option<&[f64]> {
        self.attn.get(layer)?.get(head)?.get(q).map(Vec::as_slice)
    }

    /// Full query × key attention matrix with zeros above the diagonal.
    pub fn attn_matrix(&self, layer: usize, head: usize) -> Option<Matrix> {
        let rows = self.attn.get(layer)?.get(head)?;
        let n = rows.len();
        let mut m = Matrix::zeros(n, n);
        for (q, row) in rows.iter().enumerate() {
            m.row_mut(q)[..row.len()].copy_from_slice(row);
        }
        Some(m)
    }

    pub fn logits_at(&self, pos: usize) -> Option<&[f64]> {
        self.logits.get(pos).map(Vec::as_slice)
    }

    /// Write the trace as JSON.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
