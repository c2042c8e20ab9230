// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal experiments on a model: attention profiles, probing, ablation,
//! attention knockout, cross-context patching and layer localization.
//!
//! Every experiment works on the *clean* greedy continuation of a task. Token
//! positions are picked by [`Role`], so a config can say "the final comma of
//! each partition" instead of listing indices.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::answer_budget;
use crate::model::{
    forward_with, generate, generate_with, ActivationTrace, Intervention, ModelWeights, RunOptions,
};
use crate::numerics::{log_softmax, softmax, Matrix};
use crate::tasks::{parse_answer, templates, CountingTask};
use crate::tokenizer::{TokenClass, TokenId, TokenSeq, Vocab, ANSWER, FINAL, PART, SPACE};

// ---------------------------------------------------------------------------
// Token roles
// ---------------------------------------------------------------------------

/// Named token positions in a prompt plus its generated answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Bos,
    FirstItem,
    NonFinalItem,
    FinalItem,
    FinalComma,
    /// Final item and final comma of a partition.
    Boundary,
    Separator,
    StepIndex,
    StepColon,
    /// Position whose output is an intermediate count.
    StepSpace,
    StepNumber,
    AnswerColon,
    /// Position whose output is the final answer.
    AnswerSpace,
    AnswerNumber,
}

/// Positions of one partition in the item list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub items: Vec<usize>,
    pub commas: Vec<usize>,
    pub separator: Option<usize>,
}

/// Positions of one generated `part i: c` line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLayout {
    pub part: usize,
    pub index: usize,
    pub colon: usize,
    pub space: usize,
    pub number: Option<usize>,
}

/// Positions of the generated `Final answer: n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerLayout {
    pub colon: usize,
    pub space: usize,
    pub number: Option<usize>,
}

/// Role positions of a prompt and its continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub prompt_len: usize,
    pub partitions: Vec<PartitionLayout>,
    pub steps: Vec<StepLayout>,
    pub answer: Option<AnswerLayout>,
}

impl Layout {
    pub fn new(vocab: &Vocab, seq: &TokenSeq, prompt_len: usize) -> Result<Self> {
        let class = |p: usize| vocab.class(seq.ids[p]);
        let prompt_len = prompt_len.min(seq.len());
        let mut start = None;
        for p in 0..prompt_len {
            if class(p)? == TokenClass::Item {
                start = Some(p);
                break;
            }
        }
        let mut partitions: Vec<PartitionLayout> = Vec::new();
        if let Some(start) = start {
            let base = seq.segment_ids[start];
            for p in start..prompt_len {
                let g = (seq.segment_ids[p] - base) as usize;
                if partitions.len() <= g {
                    partitions.resize(g + 1, PartitionLayout::default());
                }
                match class(p)? {
                    TokenClass::Item => partitions[g].items.push(p),
                    TokenClass::Comma => partitions[g].commas.push(p),
                    TokenClass::Separator => partitions[g].separator = Some(p),
                    _ => {}
                }
            }
        }

        let id = |t: &str| vocab.id(t);
        let (part, final_, answer, colon, space) =
            (id(PART), id(FINAL), id(ANSWER), id(":"), id(SPACE));
        let at = |p: usize| seq.ids.get(p).copied();
        let is_num = |p: usize| -> bool {
            at(p).is_some_and(|t| vocab.class(t).ok() == Some(TokenClass::Number))
        };
        let mut steps = Vec::new();
        let mut answer_layout = None;
        for p in prompt_len..seq.len() {
            if at(p) == part && is_num(p + 1) && at(p + 2) == colon && at(p + 3) == space {
                steps.push(StepLayout {
                    part: p,
                    index: p + 1,
                    colon: p + 2,
                    space: p + 3,
                    number: is_num(p + 4).then_some(p + 4),
                });
            }
            if answer_layout.is_none()
                && at(p) == final_
                && at(p + 1) == answer
                && at(p + 2) == colon
                && at(p + 3) == space
            {
                answer_layout = Some(AnswerLayout {
                    colon: p + 2,
                    space: p + 3,
                    number: is_num(p + 4).then_some(p + 4),
                });
            }
        }
        Ok(Self {
            prompt_len,
            partitions,
            steps,
            answer: answer_layout,
        })
    }

    /// `(group, position)` pairs for a role. Groups are 1-based partition or
    /// step indices; BOS and answer roles use group 0.
    pub fn positions(&self, role: Role) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let parts = self.partitions.iter().enumerate().map(|(i, p)| (i + 1, p));
        let steps = self.steps.iter().enumerate().map(|(i, s)| (i + 1, s));
        match role {
            Role::Bos => out.push((0, 0)),
            Role::FirstItem => out.extend(parts.filter_map(|(g, p)| Some((g, *p.items.first()?)))),
            Role::NonFinalItem => {
                for (g, p) in parts {
                    let n = p.items.len().saturating_sub(1);
                    out.extend(p.items[..n].iter().map(|&x| (g, x)));
                }
            }
            Role::FinalItem => out.extend(parts.filter_map(|(g, p)| Some((g, *p.items.last()?)))),
            Role::FinalComma => out.extend(parts.filter_map(|(g, p)| Some((g, *p.commas.last()?)))),
            Role::Boundary => {
                for (g, p) in parts {
                    out.extend(p.commas.last().map(|&x| (g, x)));
                    out.extend(p.items.last().map(|&x| (g, x)));
                }
            }
            Role::Separator => out.extend(parts.filter_map(|(g, p)| Some((g, p.separator?)))),
            Role::StepIndex => out.extend(steps.map(|(g, s)| (g, s.index))),
            Role::StepColon => out.extend(steps.map(|(g, s)| (g, s.colon))),
            Role::StepSpace => out.extend(steps.map(|(g, s)| (g, s.space))),
            Role::StepNumber => out.extend(steps.filter_map(|(g, s)| Some((g, s.number?)))),
            Role::AnswerColon => out.extend(self.answer.as_ref().map(|a| (0, a.colon))),
            Role::AnswerSpace => out.extend(self.answer.as_ref().map(|a| (0, a.space))),
            Role::AnswerNumber => {
                out.extend(self.answer.as_ref().and_then(|a| a.number).map(|n| (0, n)))
            }
        }
        out
    }

    /// Positions of a role, optionally restricted to one group.
    pub fn select(&self, sel: &TokenSelector) -> Vec<usize> {
        self.positions(sel.role)
            .into_iter()
            .filter(|(g, _)| sel.group.is_none_or(|want| want == *g))
            .map(|(_, p)| p)
            .collect()
    }
}

/// A role, optionally limited to one partition or step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSelector {
    pub role: Role,
    #[serde(default)]
    pub group: Option<usize>,
}

impl TokenSelector {
    pub fn all(role: Role) -> Self {
        Self { role, group: None }
    }
}

/// Attention edges from a query role to a key role. When `paired`, queries of
/// group `g` only connect to keys of group `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSelector {
    pub query: Role,
    pub key: Role,
    #[serde(default)]
    pub paired: bool,
}

impl EdgeSelector {
    /// Step count positions to the boundary tokens of their partition.
    pub const INTERMEDIATE: Self = Self {
        query: Role::StepSpace,
        key: Role::Boundary,
        paired: true,
    };
    /// Final answer position to every emitted step count.
    pub const FINAL: Self = Self {
        query: Role::AnswerSpace,
        key: Role::StepNumber,
        paired: false,
    };

    /// `(query, keys)` groups.
    pub fn resolve(&self, layout: &Layout) -> Vec<(usize, Vec<usize>)> {
        let keys = layout.positions(self.key);
        layout
            .positions(self.query)
            .into_iter()
            .map(|(g, q)| {
                let ks = keys
                    .iter()
                    .filter(|(kg, k)| *k <= q && (!self.paired || *kg == g))
                    .map(|(_, k)| *k)
                    .collect();
                (q, ks)
            })
            .filter(|(_, ks): &(usize, Vec<usize>)| !ks.is_empty())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Clean runs
// ---------------------------------------------------------------------------

/// A task's greedy continuation with its full trace.
#[derive(Debug, Clone)]
pub struct CleanRun {
    pub seq: TokenSeq,
    pub layout: Layout,
    pub trace: Arc<ActivationTrace>,
}

impl CleanRun {
    pub fn new(weights: &ModelWeights, vocab: &Vocab, task: &CountingTask) -> Result<Self> {
        let prompt = vocab.encode(&task.render_prompt())?;
        Self::from_prompt(weights, vocab, &prompt, answer_budget(task))
    }

    pub fn from_prompt(
        weights: &ModelWeights,
        vocab: &Vocab,
        prompt: &TokenSeq,
        max_new: usize,
    ) -> Result<Self> {
        let out = generate(prompt, vocab, weights, max_new, &[])?;
        let trace = forward_with(&out.seq, weights, &[], RunOptions::default())?;
        let layout = Layout::new(vocab, &out.seq, prompt.len())?;
        Ok(Self {
            seq: out.seq,
            layout,
            trace: Arc::new(trace),
        })
    }

    /// Token that follows position `p` in the clean run.
    pub fn next_token(&self, p: usize) -> Result<TokenId> {
        self.seq
            .ids
            .get(p + 1)
            .copied()
            .ok_or_else(|| LabError::Selector(format!("no token after position {p}")))
    }
}

fn run_lite(
    weights: &ModelWeights,
    seq: &TokenSeq,
    interventions: &[Intervention],
) -> Result<ActivationTrace> {
    forward_with(seq, weights, interventions, RunOptions::lite())
}

fn prob_of(trace: &ActivationTrace, pos: usize, token: TokenId) -> f64 {
    softmax(trace.logits_at(pos).unwrap_or_default())[token as usize]
}

fn logprob_of(trace: &ActivationTrace, pos: usize, token: TokenId) -> f64 {
    log_softmax(trace.logits_at(pos).unwrap_or_default())[token as usize]
}

// ---------------------------------------------------------------------------
// Attention profile
// ---------------------------------------------------------------------------

/// Mean attention mass from query positions to key positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// `n_layers × n_heads`
    pub values: Matrix,
    /// Mean over heads for each layer.
    pub layer_mean: Vec<f64>,
}

impl AttentionProfile {
    pub fn argmax(&self) -> (usize, usize) {
        argmax_cell(&self.values)
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(&self.values, "attention")
    }
}

fn argmax_cell(m: &Matrix) -> (usize, usize) {
    let mut best = (0, 0);
    for l in 0..m.rows() {
        for h in 0..m.cols() {
            if m.get(l, h) > m.get(best.0, best.1) {
                best = (l, h);
            }
        }
    }
    best
}

fn matrix_csv(m: &Matrix, value: &str) -> String {
    let mut s = format!("layer,head,{value}\n");
    for l in 0..m.rows() {
        for h in 0..m.cols() {
            s.push_str(&format!("{l},{h},{}\n", m.get(l, h)));
        }
    }
    s
}

pub fn attention_profile(
    weights: &ModelWeights,
    vocab: &Vocab,
    tasks: &[CountingTask],
    edges: &EdgeSelector,
) -> Result<AttentionProfile> {
    let c = &weights.config;
    let per_task = tasks
        .par_iter()
        .map(|task| {
            let run = CleanRun::new(weights, vocab, task)?;
            profile_run(&run, edges, c.n_layers, c.n_heads)
        })
        .collect::<Result<Vec<_>>>()?;
    if per_task.is_empty() {
        return Err(LabError::Selector("no tasks".into()));
    }
    let mut values = Matrix::zeros(c.n_layers, c.n_heads);
    for m in &per_task {
        for l in 0..c.n_layers {
            for h in 0..c.n_heads {
                values.add_at(l, h, m.get(l, h) / per_task.len() as f64);
            }
        }
    }
    let layer_mean = (0..c.n_layers)
        .map(|l| values.row(l).iter().sum::<f64>() / c.n_heads as f64)
        .collect();
    Ok(AttentionProfile { values, layer_mean })
}

/// Attention mass of one clean run.
pub fn profile_run(
    run: &CleanRun,
    edges: &EdgeSelector,
    n_layers: usize,
    n_heads: usize,
) -> Result<Matrix> {
    let groups = edges.resolve(&run.layout);
    if groups.is_empty() {
        return Err(LabError::Selector(format!(
            "no {:?} → {:?} edges in this task",
            edges.query, edges.key
        )));
    }
    let mut m = Matrix::zeros(n_layers, n_heads);
    for l in 0..n_layers {
        for h in 0..n_heads {
            let mut total = 0.0;
            for (q, ks) in &groups {
                let row = run
                    .trace
                    .attn_row(l, h, *q)
                    .ok_or_else(|| LabError::Selector("trace has no attention".into()))?;
                total += ks.iter().map(|&k| row[k]).sum::<f64>();
            }
            m.set(l, h, total / groups.len() as f64);
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

/// Question-answer prompt with a single item; the item is the probe slot.
pub fn blank_probe_prompt(vocab: &Vocab, item: &str) -> Result<(TokenSeq, usize)> {
    let seq = vocab.encode(&templates::probe_prompt(item, item))?;
    let slot = seq.len() - 1;
    Ok((seq, slot))
}

/// Patch a donor residual into the probe slot and return the number
/// distribution (`0..=max_number`) at that slot.
pub fn countscope_probe(
    weights: &ModelWeights,
    vocab: &Vocab,
    donor: &Arc<ActivationTrace>,
    token_pos: usize,
    layers: &[usize],
    blank: &TokenSeq,
    slot: usize,
) -> Result<Vec<f64>> {
    let iv = Intervention::PatchResid {
        source: donor.clone(),
        src_pos: token_pos,
        dst_pos: slot,
        layers: layers.to_vec(),
    };
    let trace = run_lite(weights, blank, &[iv])?;
    let probs = softmax(trace.logits_at(slot).unwrap_or_default());
    Ok(vocab.number_ids().iter().map(|&id| probs[id as usize]).collect())
}

/// One probed position of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub position: usize,
    pub token: String,
    /// 1-based partition, 0 outside the item list.
    pub partition: usize,
    pub items_so_far: usize,
    pub partition_size: usize,
    pub decoded: usize,
    pub p_partition_size: f64,
    pub p_items_so_far: f64,
}

/// Probe every position of the task's item list.
pub fn countscope_scan(
    weights: &ModelWeights,
    vocab: &Vocab,
    task: &CountingTask,
    layers: &[usize],
) -> Result<Vec<ProbeRow>> {
    let prompt = vocab.encode(&task.render_prompt())?;
    let donor = Arc::new(run_lite(weights, &prompt, &[])?);
    let layout = Layout::new(vocab, &prompt, prompt.len())?;
    let (blank, slot) = blank_probe_prompt(vocab, &task.item)?;
    let mut rows = Vec::new();
    for (g, part) in layout.partitions.iter().enumerate() {
        let mut positions: Vec<usize> = part
            .items
            .iter()
            .chain(&part.commas)
            .chain(part.separator.iter())
            .copied()
            .collect();
        positions.sort_unstable();
        for p in positions {
            let dist = countscope_probe(weights, vocab, &donor, p, layers, &blank, slot)?;
            let so_far = part.items.iter().filter(|&&i| i <= p).count();
            let size = part.items.len();
            let decoded = dist
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (n, &v)| if v > b.1 { (n, v) } else { b })
                .0;
            rows.push(ProbeRow {
                position: p,
                token: vocab.token(prompt.ids[p])?.to_string(),
                partition: g + 1,
                items_so_far: so_far,
                partition_size: size,
                decoded,
                p_partition_size: dist.get(size).copied().unwrap_or(0.0),
                p_items_so_far: dist.get(so_far).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Drop tables
// ---------------------------------------------------------------------------

/// Probability of a target token before and after an intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub baseline: f64,
    pub intervened: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropTable {
    pub rows: Vec<DropRow>,
}

impl DropTable {
    /// Row with the largest drop.
    pub fn argmax(&self) -> Option<&DropRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&DropRow>, r| match best {
                Some(b) if b.drop >= r.drop => Some(b),
                _ => Some(r),
            })
    }

    pub fn cell(&self, layer: usize, head: usize) -> Option<&DropRow> {
        self.rows
            .iter()
            .find(|r| r.layer == Some(layer) && r.head == Some(head))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,layer,head,baseline,intervened,drop\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                opt(r.layer),
                opt(r.head),
                r.baseline,
                r.intervened,
                r.drop
            ));
        }
        s
    }

    /// Element-wise mean of tables with identical row labels.
    pub fn mean(tables: &[DropTable]) -> Result<DropTable> {
        let first = tables
            .first()
            .ok_or_else(|| LabError::Selector("no tables to average".into()))?;
        let n = tables.len() as f64;
        let mut out = first.clone();
        for (i, row) in out.rows.iter_mut().enumerate() {
            let mut b = 0.0;
            let mut v = 0.0;
            for t in tables {
                let r = t
                    .rows
                    .get(i)
                    .filter(|r| r.label == row.label)
                    .ok_or_else(|| LabError::Selector("tables have different rows".into()))?;
                b += r.baseline;
                v += r.intervened;
            }
            row.baseline = b / n;
            row.intervened = v / n;
            row.drop = row.baseline - row.intervened;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Zero ablation
// ---------------------------------------------------------------------------

/// For each partition, zero the role's tokens of that partition at every
/// layer and record the drop of the partition's count at its step.
pub fn zero_ablation_experiment(
    weights: &ModelWeights,
    vocab: &Vocab,
    task: &CountingTask,
    target: Role,
) -> Result<DropTable> {
    let run = CleanRun::new(weights, vocab, task)?;
    zero_ablation_on(weights, &run, target)
}

pub fn zero_ablation_on(weights: &ModelWeights, run: &CleanRun, target: Role) -> Result<DropTable> {
    let all_layers: Vec<usize> = (0..weights.config.n_layers).collect();
    let baseline = run_lite(weights, &run.seq, &[])?;
    let mut rows = Vec::new();
    for (i, step) in run.layout.steps.iter().enumerate() {
        let g = i + 1;
        let positions = run.layout.select(&TokenSelector {
            role: target,
            group: Some(g),
        });
        let token = run.next_token(step.space)?;
        let intervened = if positions.is_empty() {
            baseline.clone()
        } else {
            run_lite(
                weights,
                &run.seq,
                &[Intervention::ZeroAblate {
                    positions,
                    layers: all_layers.clone(),
                }],
            )?
        };
        let b = prob_of(&baseline, step.space, token);
        let v = prob_of(&intervened, step.space, token);
        rows.push(DropRow {
            label: format!("partition{g}"),
            layer: None,
            head: None,
            baseline: b,
            intervened: v,
            drop: b - v,
        });
    }
    Ok(DropTable { rows })
}

// ---------------------------------------------------------------------------
// Knockout sweep
// ---------------------------------------------------------------------------

/// Knock out the selected edges in each head in turn and record the mean
/// drop of the clean next token at the query positions.
pub fn knockout_sweep(
    weights: &ModelWeights,
    vocab: &Vocab,
    task: &CountingTask,
    edges: &EdgeSelector,
) -> Result<DropTable> {
    let run = CleanRun::new(weights, vocab, task)?;
    knockout_sweep_on(weights, &run, edges)
}

pub fn knockout_sweep_on(
    weights: &ModelWeights,
    run: &CleanRun,
    edges: &EdgeSelector,
) -> Result<DropTable> {
    let groups = edges.resolve(&run.layout);
    if groups.is_empty() {
        return Err(LabError::Selector(format!(
            "no {:?} → {:?} edges in this task",
            edges.query, edges.key
        )));
    }
    let targets: Vec<(usize, TokenId)> = groups
        .iter()
        .map(|(q, _)| Ok((*q, run.next_token(*q)?)))
        .collect::<Result<_>>()?;
    let mean_prob = |t: &ActivationTrace| {
        targets.iter().map(|&(q, tok)| prob_of(t, q, tok)).sum::<f64>() / targets.len() as f64
    };
    let baseline = mean_prob(&run_lite(weights, &run.seq, &[])?);
    let c = &weights.config;
    let cells: Vec<(usize, usize)> = (0..c.n_layers)
        .flat_map(|l| (0..c.n_heads).map(move |h| (l, h)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(l, h)| {
            let ivs: Vec<Intervention> = groups
                .iter()
                .map(|(q, ks)| Intervention::Knockout {
                    layer: l,
                    head: h,
                    queries: vec![*q],
                    keys: ks.clone(),
                })
                .collect();
            let v = mean_prob(&run_lite(weights, &run.seq, &ivs)?);
            Ok(DropRow {
                label: format!("L{l}H{h}"),
                layer: Some(l),
                head: Some(h),
                baseline,
                intervened: v,
                drop: baseline - v,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DropTable { rows })
}

// ---------------------------------------------------------------------------
// Cross-context patching
// ---------------------------------------------------------------------------

/// Outcome of swapping one step between two contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPatchReport {
    pub step: usize,
    pub layers: Vec<usize>,
    pub step_values: (u64, u64),
    pub old_totals: (u64, u64),
    pub new_totals: (u64, u64),
    /// `[context][candidate]` log-probabilities at the answer position before
    /// patching; candidates are the old and the new total of that context.
    pub logprob_before: [[f64; 2]; 2],
    pub logprob_after: [[f64; 2]; 2],
}

struct Patched {
    total: u64,
    logprobs: [f64; 2],
}

/// Swap the residuals of step `step`'s `:`, space and number between the two
/// contexts over `layers`, then regenerate both final answers.
pub fn cross_context_patch(
    weights: &ModelWeights,
    vocab: &Vocab,
    task_a: &CountingTask,
    task_b: &CountingTask,
    step: usize,
    layers: &[usize],
) -> Result<CrossPatchReport> {
    let a = CleanRun::new(weights, vocab, task_a)?;
    let b = CleanRun::new(weights, vocab, task_b)?;
    cross_context_patch_runs(weights, vocab, &a, &b, step, layers)
}

pub fn cross_context_patch_runs(
    weights: &ModelWeights,
    vocab: &Vocab,
    a: &CleanRun,
    b: &CleanRun,
    step: usize,
    layers: &[usize],
) -> Result<CrossPatchReport> {
    let old_a = final_total(vocab, a)?;
    let old_b = final_total(vocab, b)?;
    let sites = |run: &CleanRun, tag: &str| -> Result<[usize; 3]> {
        let s = step
            .checked_sub(1)
            .and_then(|i| run.layout.steps.get(i))
            .ok_or_else(|| LabError::Patch(format!("context {tag} has no step {step}")))?;
        let n = s
            .number
            .ok_or_else(|| LabError::Patch(format!("context {tag} step {step} has no number")))?;
        Ok([s.colon, s.space, n])
    };
    let (sa, sb) = (sites(a, "A")?, sites(b, "B")?);
    let value = |run: &CleanRun, p: usize| vocab.value(run.seq.ids[p]).unwrap_or(0) as u64;
    let (va, vb) = (value(a, sa[2]), value(b, sb[2]));

    let pa = regenerate(weights, vocab, a, b, &sa, &sb, layers)?;
    let pb = regenerate(weights, vocab, b, a, &sb, &sa, layers)?;
    let before = |run: &CleanRun, old: u64, new: u64| -> Result<[f64; 2]> {
        let pos = run
            .layout
            .answer
            .as_ref()
            .ok_or_else(|| LabError::Patch("clean run has no final answer".into()))?
            .space;
        Ok([
            logprob_of(&run.trace, pos, number_id(vocab, old)?),
            logprob_of(&run.trace, pos, number_id(vocab, new)?),
        ])
    };
    Ok(CrossPatchReport {
        step,
        layers: layers.to_vec(),
        step_values: (va, vb),
        old_totals: (old_a, old_b),
        new_totals: (pa.total, pb.total),
        logprob_before: [before(a, old_a, pa.total)?, before(b, old_b, pb.total)?],
        logprob_after: [
            [pa.logprobs[0], pa.logprobs[1]],
            [pb.logprobs[0], pb.logprobs[1]],
        ],
    })
}

fn number_id(vocab: &Vocab, n: u64) -> Result<TokenId> {
    u32::try_from(n)
        .ok()
        .and_then(|n| vocab.number(n))
        .ok_or_else(|| LabError::Patch(format!("total {n} has no number token")))
}

fn final_total(vocab: &Vocab, run: &CleanRun) -> Result<u64> {
    let text = vocab.decode_ids(&run.seq.ids[run.layout.prompt_len..])?;
    Ok(parse_answer(&text)?.final_answer)
}

fn regenerate(
    weights: &ModelWeights,
    vocab: &Vocab,
    target: &CleanRun,
    donor: &CleanRun,
    target_sites: &[usize; 3],
    donor_sites: &[usize; 3],
    layers: &[usize],
) -> Result<Patched> {
    let answer = target
        .layout
        .answer
        .as_ref()
        .ok_or_else(|| LabError::Patch("clean run has no final answer".into()))?;
    // Cut right before `Final`.
    let cut = answer.colon - 2;
    let prefix = target.seq.prefix(cut);
    let ivs: Vec<Intervention> = target_sites
        .iter()
        .zip(donor_sites)
        .map(|(&dst, &src)| Intervention::PatchResid {
            source: donor.trace.clone(),
            src_pos: src,
            dst_pos: dst,
            layers: layers.to_vec(),
        })
        .collect();
    let out = generate_with(&prefix, vocab, weights, 8, &ivs, RunOptions::lite())?;
    let text = out.text(vocab)?;
    let total = parse_answer(&text)?.final_answer;
    let old = final_total(vocab, target)?;
    let pos = cut + 3;
    Ok(Patched {
        total,
        logprobs: [
            logprob_of(&out.trace, pos, number_id(vocab, old)?),
            logprob_of(&out.trace, pos, number_id(vocab, total)?),
        ],
    })
}

// ---------------------------------------------------------------------------
// Layer localization
// ---------------------------------------------------------------------------

/// Log-probability of the intermediate counts under per-layer masking and
/// unmasking of the target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurves {
    pub clean: f64,
    pub all_masked: f64,
    /// `masking[l]`: change when the targets are zeroed at layer `l` only.
    pub masking: Vec<f64>,
    /// `unmasking[l]`: gain over `all_masked` when layer `l` is restored.
    pub unmasking: Vec<f64>,
    /// `unmasking[l] / (clean − all_masked)`.
    pub recovery: Vec<f64>,
}

impl LayerCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,masking_delta,unmasking_delta,recovery\n");
        for l in 0..self.masking.len() {
            s.push_str(&format!(
                "{l},{},{},{}\n",
                self.masking[l], self.unmasking[l], self.recovery[l]
            ));
        }
        s
    }
}

pub fn layer_localization(
    weights: &ModelWeights,
    vocab: &Vocab,
    task: &CountingTask,
    target: Role,
) -> Result<LayerCurves> {
    let run = CleanRun::new(weights, vocab, task)?;
    layer_localization_on(weights, &run, target)
}

pub fn layer_localization_on(
    weights: &ModelWeights,
    run: &CleanRun,
    target: Role,
) -> Result<LayerCurves> {
    let positions = run.layout.select(&TokenSelector::all(target));
    if positions.is_empty() {
        return Err(LabError::Selector(format!("no {target:?} tokens")));
    }
    let measured: Vec<(usize, TokenId)> = run
        .layout
        .steps
        .iter()
        .map(|s| Ok((s.space, run.next_token(s.space)?)))
        .collect::<Result<_>>()?;
    if measured.is_empty() {
        return Err(LabError::Selector("no intermediate steps to measure".into()));
    }
    let score = |t: &ActivationTrace| {
        measured.iter().map(|&(p, tok)| logprob_of(t, p, tok)).sum::<f64>() / measured.len() as f64
    };
    let n_layers = weights.config.n_layers;
    let clean = score(&run_lite(weights, &run.seq, &[])?);
    let mask_all = Intervention::ZeroAblate {
        positions: positions.clone(),
        layers: (0..n_layers).collect(),
    };
    let all_masked = score(&run_lite(weights, &run.seq, std::slice::from_ref(&mask_all))?);
    let per_layer = (0..n_layers)
        .into_par_iter()
        .map(|l| {
            let masked = score(&run_lite(
                weights,
                &run.seq,
                &[Intervention::ZeroAblate {
                    positions: positions.clone(),
                    layers: vec![l],
                }],
            )?);
            let restored = score(&run_lite(
                weights,
                &run.seq,
                &[
                    mask_all.clone(),
                    Intervention::RestoreLayer {
                        positions: positions.clone(),
                        layer: l,
                        source: run.trace.clone(),
                    },
                ],
            )?);
            Ok((masked - clean, restored - all_masked))
        })
        .collect::<Result<Vec<_>>>()?;
    let lost = clean - all_masked;
    Ok(LayerCurves {
        clean,
        all_masked,
        masking: per_layer.iter().map(|p| p.0).collect(),
        unmasking: per_layer.iter().map(|p| p.1).collect(),
        recovery: per_layer
            .iter()
            .map(|p| if lost != 0.0 { p.1 / lost } else { 0.0 })
            .collect(),
    })
}
