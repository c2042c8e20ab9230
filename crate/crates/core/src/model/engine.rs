// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use super::intervention::{Intervention, KnockoutMode, Plan, RunOptions, TraceLevel, Write};
use super::trace::ActivationTrace;
use super::ModelWeights;
use crate::error::{LabError, Result};
use crate::numerics::{argmax_with_margin, row_softmax, softmax_masked_into, vecmat_acc, Matrix};
use crate::tokenizer::{TokenId, TokenSeq, Vocab, EOS};

// ---------------------------------------------------------------------------
// Incremental session
// ---------------------------------------------------------------------------

/// A forward pass that grows one position at a time.
///
/// Every position is computed exactly once, against cached keys and values
/// of the earlier positions, so a full forward and a token-by-token
/// generation produce bit-identical activations.
pub struct Session<'w> {
    weights: &'w ModelWeights,
    plan: Plan,
    opts: RunOptions,
    limit: usize,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    run_head: Vec<Vec<bool>>,
    run_mlp: Vec<bool>,
    trace: ActivationTrace,
}

impl<'w> Session<'w> {
    /// Interventions are validated against positions `0..seq_limit`.
    pub fn new(
        weights: &'w ModelWeights,
        interventions: &[Intervention],
        opts: RunOptions,
        seq_limit: usize,
    ) -> Result<Self> {
        let c = &weights.config;
        let plan = Plan::compile(interventions, c, seq_limit)?;
        let full = opts.trace == TraceLevel::Full;
        let knocked_heads: HashSet<(usize, usize)> = interventions
            .iter()
            .filter_map(|iv| match iv {
                Intervention::Knockout { layer, head, .. } => Some((*layer, *head)),
                _ => None,
            })
            .collect();
        let run_head = weights
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                layer
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(h, hw)| full || !hw.is_inert() || knocked_heads.contains(&(l, h)))
                    .collect()
            })
            .collect();
        Ok(Self {
            weights,
            plan,
            opts,
            limit: seq_limit.min(c.max_seq),
            keys: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            values: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            run_head,
            run_mlp: weights.layers.iter().map(|l| !l.mlp.is_inert()).collect(),
            trace: ActivationTrace::new(c.n_layers, c.n_heads, full),
        })
    }

    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }

    pub fn trace(&self) -> &ActivationTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ActivationTrace {
        self.trace
    }

    /// Logits at the most recent position.
    pub fn last_logits(&self) -> Option<&[f64]> {
        self.trace.logits.last().map(Vec::as_slice)
    }

    /// Run one more position and return its logits.
    pub fn push(&mut self, token: TokenId, segment: u32) -> Result<&[f64]> {
        let w = self.weights;
        let c = &w.config;
        let p = self.trace.len();
        if p >= self.limit {
            return Err(LabError::Sequence(format!(
                "position {p} exceeds the limit of {} positions",
                self.limit
            )));
        }
        if token as usize >= c.vocab_size {
            return Err(LabError::TokenRange {
                id: token,
                size: c.vocab_size,
            });
        }
        if segment as usize >= c.max_segments {
            return Err(LabError::Sequence(format!(
                "segment {segment} exceeds max_segments {}",
                c.max_segments
            )));
        }

        let mut x: Vec<f64> = w
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(w.pos_emb.row(p))
            .zip(w.seg_emb.row(segment as usize))
            .map(|((t, q), s)| t + q + s)
            .collect();
        self.trace.tokens.push(token);
        self.trace.embed.push(x.clone());

        let d_head = c.d_head;
        let scale = 1.0 / (d_head as f64).sqrt();
        let full = self.opts.trace == TraceLevel::Full;
        let mut q = vec![0.0; d_head];
        let mut k = vec![0.0; d_head];
        let mut v = vec![0.0; d_head];
        let mut z = vec![0.0; d_head];

        for (l, layer) in w.layers.iter().enumerate() {
            let mut mid = x.clone();
            for (h, hw) in layer.heads.iter().enumerate() {
                if !self.run_head[l][h] {
                    continue;
                }
                for buf in [&mut q, &mut k, &mut v] {
                    buf.fill(0.0);
                }
                vecmat_acc(&x, &hw.w_q, &mut q);
                vecmat_acc(&x, &hw.w_k, &mut k);
                vecmat_acc(&x, &hw.w_v, &mut v);
                self.keys[l][h].extend_from_slice(&k);
                self.values[l][h].extend_from_slice(&v);

                let keys = &self.keys[l][h];
                let scores: Vec<f64> = keys
                    .chunks_exact(d_head)
                    .map(|kj| kj.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let knocked = self.plan.knocked(l, h, p);
                let mut weights_row = vec![0.0; p + 1];
                attend(&scores, knocked.as_ref(), self.opts.knockout_mode, &mut weights_row)
                    .map_err(|_| LabError::DegenerateRow { row: p })?;

                z.fill(0.0);
                for (a, vj) in weights_row.iter().zip(self.values[l][h].chunks_exact(d_head)) {
                    if *a != 0.0 {
                        for (zi, vi) in z.iter_mut().zip(vj) {
                            *zi += a * vi;
                        }
                    }
                }
                let mut out = vec![0.0; c.d_model];
                vecmat_acc(&z, &hw.w_o, &mut out);
                for (m, o) in mid.iter_mut().zip(&out) {
                    *m += o;
                }
                if full {
                    self.trace.attn[l][h].push(weights_row);
                    self.trace.head_out[l][h].push(out);
                }
            }

            x = mid;
            if self.run_mlp[l] {
                let mlp = &layer.mlp;
                let mut hidden = mlp.b_in.clone();
                vecmat_acc(&x, &mlp.w_in, &mut hidden);
                for a in hidden.iter_mut() {
                    *a = a.max(0.0);
                }
                let mut out = mlp.b_out.clone();
                vecmat_acc(&hidden, &mlp.w_out, &mut out);
                for (xi, o) in x.iter_mut().zip(&out) {
                    *xi += o;
                }
            }

            match self.plan.write_at(l, p) {
                Some(Write::Zero) => x.fill(0.0),
                Some(Write::Copy(src, sp)) => {
                    x.copy_from_slice(src.resid_at(l, *sp).ok_or_else(|| {
                        LabError::Patch(format!("donor has no residual at layer {l}, position {sp}"))
                    })?)
                }
                None => {}
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Numeric { layer: l, position: p });
            }
            self.trace.resid[l].push(x.clone());
        }

        let mut logits = vec![0.0; c.vocab_size];
        vecmat_acc(&x, &w.unembed, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric {
                layer: c.n_layers,
                position: p,
            });
        }
        self.trace.logits.push(logits);
        Ok(self.trace.logits.last().map(Vec::as_slice).unwrap_or_default())
    }
}

fn attend(
    scores: &[f64],
    knocked: Option<&HashSet<usize>>,
    mode: KnockoutMode,
    out: &mut [f64],
) -> Result<()> {
    let Some(knocked) = knocked else {
        let keep = vec![true; scores.len()];
        return softmax_masked_into(scores, &keep, out);
    };
    let keep: Vec<bool> = (0..scores.len()).map(|j| !knocked.contains(&j)).collect();
    if !keep.iter().any(|&k| k) {
        return Err(LabError::DegenerateRow { row: 0 });
    }
    match mode {
        KnockoutMode::PreSoftmax => softmax_masked_into(scores, &keep, out),
        KnockoutMode::PostSoftmaxZero => {
            softmax_masked_into(scores, &vec![true; scores.len()], out)?;
            for (o, &k) in out.iter_mut().zip(&keep) {
                if !k {
                    *o = 0.0;
                }
            }
            Ok(())
        }
    }
}

/// Causal softmax of one head's score matrix with `(query, key)` edges removed.
pub fn apply_knockout_semantics(
    scores: &Matrix,
    knocked: &[(usize, usize)],
    mode: KnockoutMode,
) -> Result<Matrix> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(LabError::Shape("attention scores must be square".into()));
    }
    let causal: Vec<Vec<bool>> = (0..n).map(|q| (0..n).map(|k| k <= q).collect()).collect();
    let mut keep = causal.clone();
    for &(q, k) in knocked {
        if q >= n || k >= n {
            return Err(LabError::Site(format!("edge ({q}, {k}) outside {n}x{n}")));
        }
        keep[q][k] = false;
    }
    if let Some(row) = keep.iter().position(|r| !r.iter().any(|&b| b)) {
        return Err(LabError::DegenerateRow { row });
    }
    match mode {
        KnockoutMode::PreSoftmax => row_softmax(scores, Some(&keep)),
        KnockoutMode::PostSoftmaxZero => {
            let mut m = row_softmax(scores, Some(&causal))?;
            for (q, row) in keep.iter().enumerate() {
                for (k, &kept) in row.iter().enumerate() {
                    if !kept {
                        m.set(q, k, 0.0);
                    }
                }
            }
            Ok(m)
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-sequence entry points
// ---------------------------------------------------------------------------

pub fn forward(
    seq: &TokenSeq,
    weights: &ModelWeights,
    interventions: &[Intervention],
) -> Result<ActivationTrace> {
    forward_with(seq, weights, interventions, RunOptions::default())
}

pub fn forward_with(
    seq: &TokenSeq,
    weights: &ModelWeights,
    interventions: &[Intervention],
    opts: RunOptions,
) -> Result<ActivationTrace> {
    check_len(seq.len(), weights)?;
    let mut s = Session::new(weights, interventions, opts, seq.len())?;
    for (&id, &seg) in seq.ids.iter().zip(&seq.segment_ids) {
        s.push(id, seg)?;
    }
    Ok(s.into_trace())
}

fn check_len(len: usize, weights: &ModelWeights) -> Result<()> {
    if len == 0 {
        return Err(LabError::Sequence("empty sequence".into()));
    }
    if len > weights.config.max_seq {
        return Err(LabError::Sequence(format!(
            "length {len} exceeds max_seq {}",
            weights.config.max_seq
        )));
    }
    Ok(())
}

/// Result of greedy decoding.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Prompt followed by the generated tokens.
    pub seq: TokenSeq,
    pub prompt_len: usize,
    /// Logit lead of each chosen token over the runner-up.
    pub margins: Vec<f64>,
    /// Activations of every position whose logits were computed.
    pub trace: ActivationTrace,
}

impl Generated {
    pub fn new_tokens(&self) -> &[TokenId] {
        &self.seq.ids[self.prompt_len..]
    }

    pub fn text(&self, vocab: &Vocab) -> Result<String> {
        vocab.decode_ids(self.new_tokens())
    }
}

pub fn generate(
    prompt: &TokenSeq,
    vocab: &Vocab,
    weights: &ModelWeights,
    max_new: usize,
    interventions: &[Intervention],
) -> Result<Generated> {
    generate_with(prompt, vocab, weights, max_new, interventions, RunOptions::lite())
}

/// Greedy decoding; stops after `<eos>`, after `max_new` tokens, or when the
/// context is full.
pub fn generate_with(
    prompt: &TokenSeq,
    vocab: &Vocab,
    weights: &ModelWeights,
    max_new: usize,
    interventions: &[Intervention],
    opts: RunOptions,
) -> Result<Generated> {
    check_len(prompt.len(), weights)?;
    let eos = vocab.id(EOS);
    let limit = prompt.len() + max_new;
    let mut s = Session::new(weights, interventions, opts, limit)?;
    let mut seq = prompt.clone();
    let mut margins = Vec::new();
    for (&id, &seg) in prompt.ids.iter().zip(&prompt.segment_ids) {
        s.push(id, seg)?;
    }
    for _ in 0..max_new {
        let logits = s.last_logits().unwrap_or_default();
        let (next, margin) = argmax_with_margin(logits)?;
        let next = next as TokenId;
        seq.push(next, vocab)?;
        margins.push(margin);
        if Some(next) == eos || seq.len() >= weights.config.max_seq || seq.len() >= limit {
            break;
        }
        let seg = *seq.segment_ids.last().unwrap_or(&0);
        s.push(next, seg)?;
    }
    Ok(Generated {
        seq,
        prompt_len: prompt.len(),
        margins,
        trace: s.into_trace(),
    })
}
