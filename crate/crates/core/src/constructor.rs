// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-written weights for a staged counting circuit.
//!
//! The residual stream is a set of named scalar channels. Three stages run in
//! three designated layers:
//!
//! * **counter layer**: one head attends uniformly over BOS and the items of
//!   the query's own partition, writing `c/(c+1)`; sibling heads fetch the
//!   previous token, the latest number and the latest of item/`part`/`Final`.
//!   The MLP lets a comma anticipate the next item so that the last comma of a
//!   partition carries the partition's full count.
//! * **transfer layer**: at the space before an intermediate count, a head
//!   reads the step index `i` and attends to the highest-count item or comma of
//!   partition `i`, copying its fraction.
//! * **aggregate layer**: a head averages the emitted step counts; the MLP
//!   scales the mean by the number of partitions and drives every output rule.
//!
//! Numbers are decoded from the fraction channel with a quadratic readout plus
//! a log-frequency prior whose weight fixes the largest reliable count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::Matrix;
use crate::tokenizer::{TokenClass, Vocab, ANSWER, EOS, FINAL, NEWLINE, PART, SPACE};

// ---------------------------------------------------------------------------
// Spec and oracles
// ---------------------------------------------------------------------------

/// Tunable parameters of the constructed circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircuitSpec {
    /// Largest single-partition count that decodes correctly.
    pub n_reliable: usize,
    /// Sharpness β of the fraction readout.
    pub readout_sharpness: f64,
    pub counter_layer: usize,
    pub transfer_layer: usize,
    pub aggregate_layer: usize,
    /// Residual index that carries the integer value of NUMBER tokens.
    pub magnitude_channel: usize,
}

impl Default for CircuitSpec {
    fn default() -> Self {
        Self {
            n_reliable: 9,
            readout_sharpness: 1e6,
            counter_layer: 0,
            transfer_layer: 1,
            aggregate_layer: 3,
            magnitude_channel: CHANNEL_NAMES
                .iter()
                .position(|&n| n == "mag")
                .unwrap_or_default(),
        }
    }
}

/// Value of the counter channel after `c` items: `c/(c+1)`.
pub fn counter_fraction_oracle(c: usize) -> f64 {
    c as f64 / (c as f64 + 1.0)
}

/// Distance between consecutive counter values, `1/((c+1)(c+2))`.
pub fn fraction_gap(c: usize) -> f64 {
    let c = c as f64;
    1.0 / ((c + 1.0) * (c + 2.0))
}

/// Weight λ of the `ln(n+1)` prior.
///
/// Count `c` survives the prior when `β·gap(c-1)² > λ·ln((c+1)/c)`; λ is set
/// to the geometric mean of the thresholds of `n_reliable` and `n_reliable+1`.
pub fn prior_weight(spec: &CircuitSpec) -> f64 {
    let threshold = |c: usize| {
        let g = fraction_gap(c - 1);
        g * g / ((c as f64 + 1.0) / c as f64).ln()
    };
    let r = spec.n_reliable;
    spec.readout_sharpness * (threshold(r) * threshold(r + 1)).sqrt()
}

/// Number logits `0..=max_n` produced by the fraction readout for a channel
/// value `x`.
pub fn readout_logits(spec: &CircuitSpec, x: f64, max_n: usize) -> Vec<f64> {
    let beta = spec.readout_sharpness;
    let lambda = prior_weight(spec);
    (0..=max_n)
        .map(|n| {
            let f = counter_fraction_oracle(n);
            2.0 * beta * f * x - beta * f * f - lambda * (n as f64 + 1.0).ln()
        })
        .collect()
}

/// Lead of count `c` over the best other number when the channel holds `c/(c+1)`.
/// Negative once `c` is no longer decoded.
pub fn readout_margin(spec: &CircuitSpec, c: usize, max_n: usize) -> f64 {
    let logits = readout_logits(spec, counter_fraction_oracle(c), max_n);
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != c)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[c] - other
}

// ---------------------------------------------------------------------------
// Channel layout
// ---------------------------------------------------------------------------

const CHANNEL_NAMES: [&str; 44] = [
    "one", "bos", "item", "comma", "sep", "num", "colon", "space", "newline", "part", "final",
    "answer", "steps_mark", "qa_mark", "mag", "seg", "seg2", "pos", "pos2", "frac", "prev_part",
    "prev_space", "last_num", "st_item", "st_part", "st_final", "is_idx", "is_cnt", "xfer",
    "last_idx", "agg", "steps", "qa", "frac_r", "frac_on", "mag_r", "mag_on", "next_part",
    "next_final", "next_answer", "next_colon", "next_space", "next_newline", "next_eos",
];

/// Residual index of every named channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels(BTreeMap<String, usize>);

impl Channels {
    /// Default order with the magnitude channel moved to `magnitude_channel`.
    pub fn layout(magnitude_channel: usize) -> Result<Self> {
        let mut names: Vec<&str> = CHANNEL_NAMES.to_vec();
        if magnitude_channel >= names.len() {
            return Err(LabError::Construction(format!(
                "magnitude_channel {magnitude_channel} is outside the {} circuit channels",
                names.len()
            )));
        }
        let mag = names.iter().position(|&n| n == "mag").unwrap_or_default();
        names.swap(mag, magnitude_channel);
        Ok(Self(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i))
                .collect(),
        ))
    }

    pub fn get(&self, name: &str) -> usize {
        self.0[name]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map(&self) -> &BTreeMap<String, usize> {
        &self.0
    }
}

/// Where each circuit component lives, as `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSites {
    pub counter: (usize, usize),
    pub previous_token: (usize, usize),
    pub last_number: (usize, usize),
    pub stage: (usize, usize),
    pub transfer: (usize, usize),
    pub last_index: (usize, usize),
    pub aggregate: (usize, usize),
    pub steps_mode: (usize, usize),
    pub qa_mode: (usize, usize),
}

impl CircuitSites {
    pub fn new(spec: &CircuitSpec) -> Self {
        let (c, t, a) = (spec.counter_layer, spec.transfer_layer, spec.aggregate_layer);
        Self {
            counter: (c, 0),
            previous_token: (c, 1),
            last_number: (c, 2),
            stage: (c, 3),
            transfer: (t, 0),
            last_index: (t, 1),
            aggregate: (a, 0),
            steps_mode: (a, 1),
            qa_mode: (a, 2),
        }
    }

    /// Every head that writes to the residual stream.
    pub fn all(&self) -> [(usize, usize); 9] {
        [
            self.counter,
            self.previous_token,
            self.last_number,
            self.stage,
            self.transfer,
            self.last_index,
            self.aggregate,
            self.steps_mode,
            self.qa_mode,
        ]
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.all().contains(&(layer, head))
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

const COUNTER_GAIN: f64 = 60.0;
const RECENCY: f64 = 40.0;
const MODE_GAIN: f64 = 60.0;
const TRANSFER_GAIN: f64 = 1e7;
const TRANSFER_FRAC_GAIN: f64 = 1e6;
const AGG_GAIN: f64 = 60.0;
const GATE: f64 = 4.0;
const WIDE_GATE: f64 = 128.0;
const SUM_STEP: f64 = 256.0;
const SUM_GATE: f64 = 2e4;
const GRAMMAR_GAIN: f64 = 30.0;
const MAG_SHARPNESS: f64 = 20.0;
const COMMA_GATE: f64 = 2.0;

/// Architecture that fits the circuit for a vocabulary.
pub fn default_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        n_heads: 4,
        d_model: 48,
        d_head: 4,
        d_mlp: 256,
        vocab_size: vocab.len(),
        max_seq: 1024,
        max_segments: 64,
        channels: BTreeMap::new(),
    }
}

fn check_capacity(spec: &CircuitSpec, vocab: &Vocab, c: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    if !(spec.counter_layer < spec.transfer_layer && spec.transfer_layer < spec.aggregate_layer) {
        problems.push("layers must satisfy counter < transfer < aggregate".to_string());
    }
    if spec.aggregate_layer >= c.n_layers {
        problems.push(format!(
            "aggregate_layer {} needs n_layers > {}",
            spec.aggregate_layer, spec.aggregate_layer
        ));
    }
    if spec.n_reliable < 3 {
        problems.push("n_reliable must be at least 3".into());
    }
    if spec.n_reliable as u32 + 1 > vocab.max_number() {
        problems.push("n_reliable exceeds the number vocabulary".into());
    }
    if !(spec.readout_sharpness.is_finite() && spec.readout_sharpness > 0.0) {
        problems.push("readout_sharpness must be positive".into());
    }
    if c.d_model < CHANNEL_NAMES.len() {
        problems.push(format!(
            "d_model {} < {} circuit channels",
            c.d_model,
            CHANNEL_NAMES.len()
        ));
    }
    if c.n_heads < 4 {
        problems.push(format!("n_heads {} < 4 heads needed in the counter layer", c.n_heads));
    }
    if c.d_head < 3 {
        problems.push(format!("d_head {} < 3", c.d_head));
    }
    let counter_units = vocab.max_number() as usize + 3;
    let readout_units = 2 * c.max_segments + 24;
    if c.d_mlp < counter_units.max(readout_units) {
        problems.push(format!(
            "d_mlp {} < {} hidden units",
            c.d_mlp,
            counter_units.max(readout_units)
        ));
    }
    if c.vocab_size != vocab.len() {
        problems.push(format!(
            "vocab_size {} differs from vocabulary size {}",
            c.vocab_size,
            vocab.len()
        ));
    }
    if c.max_segments as f64 > SUM_STEP {
        problems.push("max_segments too large for the sum readout".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(LabError::Construction(problems.join("; ")))
    }
}

/// Appends ReLU units to an MLP one at a time.
struct MlpBuilder<'a> {
    w_in: &'a mut Matrix,
    b_in: &'a mut [f64],
    w_out: &'a mut Matrix,
    next: usize,
}

impl MlpBuilder<'_> {
    fn unit(&mut self, inputs: &[(usize, f64)], bias: f64, outputs: &[(usize, f64)]) -> Result<()> {
        let u = self.next;
        if u >= self.b_in.len() {
            return Err(LabError::Construction("ran out of MLP units".into()));
        }
        for &(ch, w) in inputs {
            self.w_in.add_at(ch, u, w);
        }
        self.b_in[u] = bias;
        for &(ch, w) in outputs {
            self.w_out.add_at(u, ch, w);
        }
        self.next += 1;
        Ok(())
    }
}

/// Build the counting model.
pub fn build_counting_model(
    spec: &CircuitSpec,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<ModelWeights> {
    check_capacity(spec, vocab, config)?;
    let ch = Channels::layout(spec.magnitude_channel)?;
    let mut config = config.clone();
    config.channels = ch.map().clone();
    let mut w = ModelWeights::zeros(config)?;
    let c = |name: &str| ch.get(name);

    embed(&mut w, vocab, &ch)?;

    let q_scale = (w.config.d_head as f64).sqrt();
    let far = RECENCY * w.config.max_seq as f64 + 60.0;
    let sites = CircuitSites::new(spec);

    // Counter layer heads.
    {
        let head = &mut w.layers[sites.counter.0].heads[sites.counter.1];
        head.w_q.set(c("seg"), 0, q_scale);
        head.w_q.set(c("one"), 1, q_scale);
        head.w_q.set(c("seg2"), 2, q_scale);
        head.w_k.set(c("seg"), 0, 2.0 * COUNTER_GAIN);
        head.w_k.set(c("seg2"), 1, -COUNTER_GAIN);
        head.w_k.set(c("item"), 1, COUNTER_GAIN);
        head.w_k.set(c("bos"), 1, COUNTER_GAIN);
        head.w_k.set(c("bos"), 2, COUNTER_GAIN);
        head.w_v.set(c("item"), 0, 1.0);
        head.w_o.set(0, c("frac"), 1.0);
    }
    {
        let head = &mut w.layers[sites.previous_token.0].heads[sites.previous_token.1];
        head.w_q.set(c("pos"), 0, q_scale);
        head.w_q.set(c("one"), 0, -q_scale);
        head.w_q.set(c("one"), 1, q_scale);
        head.w_k.set(c("pos"), 0, 2.0 * RECENCY);
        head.w_k.set(c("pos2"), 1, -RECENCY);
        head.w_v.set(c("part"), 0, 1.0);
        head.w_v.set(c("space"), 1, 1.0);
        head.w_o.set(0, c("prev_part"), 1.0);
        head.w_o.set(1, c("prev_space"), 1.0);
    }
    {
        let head = &mut w.layers[sites.last_number.0].heads[sites.last_number.1];
        head.w_q.set(c("one"), 0, q_scale);
        head.w_k.set(c("num"), 0, far);
        head.w_k.set(c("pos"), 0, RECENCY);
        head.w_v.set(c("mag"), 0, 1.0);
        head.w_o.set(0, c("last_num"), 1.0);
    }
    {
        let head = &mut w.layers[sites.stage.0].heads[sites.stage.1];
        head.w_q.set(c("one"), 0, q_scale);
        for name in ["item", "part", "final"] {
            head.w_k.set(c(name), 0, far);
        }
        head.w_k.set(c("pos"), 0, RECENCY);
        head.w_v.set(c("item"), 0, 1.0);
        head.w_v.set(c("part"), 1, 1.0);
        head.w_v.set(c("final"), 2, 1.0);
        head.w_o.set(0, c("st_item"), 1.0);
        head.w_o.set(1, c("st_part"), 1.0);
        head.w_o.set(2, c("st_final"), 1.0);
    }
    counter_mlp(&mut w, spec, vocab, &ch)?;

    // Transfer layer heads.
    {
        let head = &mut w.layers[sites.transfer.0].heads[sites.transfer.1];
        head.w_q.set(c("last_num"), 0, q_scale);
        head.w_q.set(c("one"), 0, -q_scale);
        head.w_q.set(c("one"), 1, q_scale);
        head.w_k.set(c("seg"), 0, 2.0 * TRANSFER_GAIN);
        head.w_k.set(c("item"), 1, TRANSFER_GAIN);
        head.w_k.set(c("comma"), 1, TRANSFER_GAIN);
        head.w_k.set(c("seg2"), 1, -TRANSFER_GAIN);
        head.w_k.set(c("frac"), 1, TRANSFER_FRAC_GAIN);
        head.w_v.set(c("frac"), 0, 1.0);
        head.w_o.set(0, c("xfer"), 1.0);
    }
    {
        let head = &mut w.layers[sites.last_index.0].heads[sites.last_index.1];
        head.w_q.set(c("one"), 0, q_scale);
        head.w_k.set(c("is_idx"), 0, far);
        head.w_k.set(c("bos"), 0, far);
        head.w_k.set(c("pos"), 0, RECENCY);
        head.w_v.set(c("mag"), 0, 1.0);
        head.w_o.set(0, c("last_idx"), 1.0);
    }

    // Aggregate layer heads.
    {
        let head = &mut w.layers[sites.aggregate.0].heads[sites.aggregate.1];
        head.w_q.set(c("one"), 0, q_scale);
        head.w_k.set(c("is_cnt"), 0, AGG_GAIN);
        head.w_v.set(c("mag"), 0, 1.0);
        head.w_o.set(0, c("agg"), 1.0);
    }
    for (site, mark, out) in [
        (sites.steps_mode, "steps_mark", "steps"),
        (sites.qa_mode, "qa_mark", "qa"),
    ] {
        let head = &mut w.layers[site.0].heads[site.1];
        head.w_q.set(c("one"), 0, q_scale);
        head.w_k.set(c(mark), 0, 2.0 * MODE_GAIN);
        head.w_k.set(c("bos"), 0, MODE_GAIN);
        head.w_k.set(c("one"), 0, -MODE_GAIN);
        head.w_v.set(c(mark), 0, 1.0);
        head.w_o.set(0, c(out), 1.0);
    }
    readout_mlp(&mut w, spec, &ch)?;
    unembed(&mut w, spec, vocab, &ch)?;
    w.validate()?;
    Ok(w)
}

fn embed(w: &mut ModelWeights, vocab: &Vocab, ch: &Channels) -> Result<()> {
    for (id, e) in vocab.entries().iter().enumerate() {
        let row = w.tok_emb.row_mut(id);
        row[ch.get("one")] = 1.0;
        let class_channel = match e.class {
            TokenClass::Bos => Some("bos"),
            TokenClass::Item => Some("item"),
            TokenClass::Comma => Some("comma"),
            TokenClass::Separator => Some("sep"),
            TokenClass::Number => Some("num"),
            TokenClass::Colon => Some("colon"),
            TokenClass::Keyword | TokenClass::Whitespace => None,
        };
        if let Some(name) = class_channel {
            row[ch.get(name)] = 1.0;
        }
        if let Some(v) = e.value.filter(|_| e.class == TokenClass::Number) {
            row[ch.get("mag")] = v as f64;
        }
        let marker = match e.token.as_str() {
            t if t == SPACE => Some("space"),
            t if t == NEWLINE => Some("newline"),
            t if t == PART => Some("part"),
            t if t == FINAL => Some("final"),
            t if t == ANSWER => Some("answer"),
            "x1" | "step" => Some("steps_mark"),
            "Question" => Some("qa_mark"),
            _ => None,
        };
        if let Some(name) = marker {
            row[ch.get(name)] = 1.0;
        }
    }
    for p in 0..w.config.max_seq {
        let row = w.pos_emb.row_mut(p);
        row[ch.get("pos")] = p as f64;
        row[ch.get("pos2")] = (p * p) as f64;
    }
    for s in 0..w.config.max_segments {
        let row = w.seg_emb.row_mut(s);
        row[ch.get("seg")] = s as f64;
        row[ch.get("seg2")] = (s * s) as f64;
    }
    Ok(())
}

fn counter_mlp(w: &mut ModelWeights, spec: &CircuitSpec, vocab: &Vocab, ch: &Channels) -> Result<()> {
    let c = |n: &str| ch.get(n);
    let mlp = &mut w.layers[spec.counter_layer].mlp;
    let mut b = MlpBuilder {
        w_in: &mut mlp.w_in,
        b_in: &mut mlp.b_in,
        w_out: &mut mlp.w_out,
        next: 0,
    };
    // On a comma, move the fraction from f(n) to f(n+1) with a piecewise
    // linear interpolant of the gap through the points f(0..=N).
    b.unit(&[(c("comma"), 1.0)], 0.0, &[(c("frac"), fraction_gap(0))])?;
    let slope = |j: usize| (fraction_gap(j + 1) - fraction_gap(j)) / fraction_gap(j);
    let top = vocab.max_number() as usize;
    for j in 0..top {
        let a = if j == 0 { slope(0) } else { slope(j) - slope(j - 1) };
        let fj = counter_fraction_oracle(j);
        b.unit(
            &[(c("frac"), 1.0), (c("comma"), COMMA_GATE)],
            -fj - COMMA_GATE,
            &[(c("frac"), a)],
        )?;
    }
    b.unit(&[(c("num"), 1.0), (c("prev_part"), 1.0)], -1.0, &[(c("is_idx"), 1.0)])?;
    b.unit(&[(c("num"), 1.0), (c("prev_space"), 1.0)], -1.0, &[(c("is_cnt"), 1.0)])?;
    Ok(())
}

fn readout_mlp(w: &mut ModelWeights, spec: &CircuitSpec, ch: &Channels) -> Result<()> {
    let c = |n: &str| ch.get(n);
    let max_segments = w.config.max_segments;
    let mlp = &mut w.layers[spec.aggregate_layer].mlp;
    let mut b = MlpBuilder {
        w_in: &mut mlp.w_in,
        b_in: &mut mlp.b_in,
        w_out: &mut mlp.w_out,
        next: 0,
    };
    let (qa, space) = (c("qa"), c("space"));

    // Intermediate count: copy the transferred fraction.
    b.unit(
        &[(c("xfer"), 1.0), (space, GATE), (c("st_part"), GATE), (qa, -GATE)],
        -2.0 * GATE,
        &[(c("frac_r"), 1.0)],
    )?;
    b.unit(&[(space, 1.0), (c("st_part"), 1.0), (qa, -1.0)], -1.0, &[(c("frac_on"), 1.0)])?;

    // Single-pass answer: decode the local fraction.
    b.unit(
        &[
            (c("frac"), 1.0),
            (space, GATE),
            (c("st_final"), GATE),
            (c("steps"), -GATE),
            (qa, -GATE),
        ],
        -2.0 * GATE,
        &[(c("frac_r"), 1.0)],
    )?;
    b.unit(
        &[(space, 1.0), (c("st_final"), 1.0), (c("steps"), -1.0), (qa, -1.0)],
        -1.0,
        &[(c("frac_on"), 1.0)],
    )?;

    // Question-answer prompt: decode the fraction of an item, comma or bar.
    let list = [(c("item"), 1.0), (c("comma"), 1.0), (c("sep"), 1.0), (qa, 1.0)];
    let mut gated = vec![(c("frac"), 1.0)];
    gated.extend(list.iter().map(|&(k, v)| (k, v * GATE)));
    b.unit(&gated, -2.0 * GATE, &[(c("frac_r"), 1.0)])?;
    b.unit(&list, -1.0, &[(c("frac_on"), 1.0)])?;

    // Final total: mean of step counts times the number of partitions.
    let gate_terms = [
        (space, SUM_GATE),
        (c("st_final"), SUM_GATE),
        (c("steps"), SUM_GATE),
        (qa, -SUM_GATE),
    ];
    for j in 1..=max_segments {
        let mut with_agg = vec![(c("agg"), 1.0), (c("seg"), SUM_STEP)];
        with_agg.extend(gate_terms);
        let mut without = vec![(c("seg"), SUM_STEP)];
        without.extend(gate_terms);
        let bias = SUM_STEP * (1.0 - j as f64) - 3.0 * SUM_GATE;
        b.unit(&with_agg, bias, &[(c("mag_r"), 1.0)])?;
        b.unit(&without, bias, &[(c("mag_r"), -1.0)])?;
    }
    b.unit(
        &[(space, 1.0), (c("st_final"), 1.0), (c("steps"), 1.0), (qa, -1.0)],
        -2.0,
        &[(c("mag_on"), 1.0)],
    )?;

    // Step index after `part`.
    b.unit(
        &[(c("last_idx"), 1.0), (c("part"), WIDE_GATE), (qa, -WIDE_GATE)],
        1.0 - WIDE_GATE,
        &[(c("mag_r"), 1.0)],
    )?;
    b.unit(&[(c("part"), 1.0), (qa, -1.0)], 0.0, &[(c("mag_on"), 1.0)])?;

    // Grammar.
    let (item, steps) = (c("item"), c("steps"));
    b.unit(&[(item, 1.0), (steps, 1.0), (qa, -1.0)], -1.0, &[(c("next_part"), 1.0)])?;
    b.unit(&[(item, 1.0), (steps, -1.0), (qa, -1.0)], 0.0, &[(c("next_final"), 1.0)])?;
    b.unit(&[(c("is_idx"), 1.0), (qa, -1.0)], 0.0, &[(c("next_colon"), 1.0)])?;
    b.unit(&[(c("answer"), 1.0), (qa, -1.0)], 0.0, &[(c("next_colon"), 1.0)])?;
    b.unit(&[(c("final"), 1.0), (qa, -1.0)], 0.0, &[(c("next_answer"), 1.0)])?;
    b.unit(&[(c("colon"), 1.0), (qa, -1.0)], 0.0, &[(c("next_space"), 1.0)])?;
    b.unit(
        &[(c("is_cnt"), 1.0), (c("st_part"), 1.0), (qa, -1.0)],
        -1.0,
        &[(c("next_newline"), 1.0)],
    )?;
    b.unit(
        &[(c("is_cnt"), 1.0), (c("st_final"), 1.0), (qa, -1.0)],
        -1.0,
        &[(c("next_eos"), 1.0)],
    )?;
    // After a step's newline: another `part` while partitions remain, else `Final`.
    b.unit(
        &[
            (c("seg"), 1.0),
            (c("last_idx"), -1.0),
            (c("newline"), WIDE_GATE),
            (c("st_part"), WIDE_GATE),
            (qa, -WIDE_GATE),
        ],
        1.0 - 2.0 * WIDE_GATE,
        &[(c("next_part"), 1.0)],
    )?;
    b.unit(
        &[(c("newline"), 1.0), (c("st_part"), 1.0), (qa, -1.0)],
        -1.0,
        &[(c("next_final"), 0.5)],
    )?;
    Ok(())
}

fn unembed(w: &mut ModelWeights, spec: &CircuitSpec, vocab: &Vocab, ch: &Channels) -> Result<()> {
    let c = |n: &str| ch.get(n);
    let beta = spec.readout_sharpness;
    let lambda = prior_weight(spec);
    for (n, &id) in vocab.number_ids().iter().enumerate() {
        let f = counter_fraction_oracle(n);
        let nf = n as f64;
        let col = id as usize;
        w.unembed.set(c("frac_r"), col, 2.0 * beta * f);
        w.unembed.set(c("frac_on"), col, -(beta * f * f + lambda * (nf + 1.0).ln()));
        w.unembed.set(c("mag_r"), col, 2.0 * MAG_SHARPNESS * nf);
        w.unembed.set(c("mag_on"), col, -MAG_SHARPNESS * nf * nf);
    }
    for (token, channel) in [
        (PART, "next_part"),
        (FINAL, "next_final"),
        (ANSWER, "next_answer"),
        (":", "next_colon"),
        (SPACE, "next_space"),
        (NEWLINE, "next_newline"),
        (EOS, "next_eos"),
    ] {
        let id = vocab.expect_id(token)? as usize;
        w.unembed.set(c(channel), id, GRAMMAR_GAIN);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_small_cases() {
        assert_eq!(counter_fraction_oracle(0), 0.0);
        assert_eq!(counter_fraction_oracle(1), 0.5);
        let ratio = fraction_gap(30) / fraction_gap(3);
        assert!((ratio - 20.0 / 992.0).abs() < 1e-15);
    }

    #[test]
    fn gap_matches_difference() {
        for c in 0..200 {
            let d = counter_fraction_oracle(c + 1) - counter_fraction_oracle(c);
            assert!((d - fraction_gap(c)).abs() < 1e-15);
        }
    }

    #[test]
    fn readout_saturates_after_n_reliable() {
        let spec = CircuitSpec::default();
        for c in 1..=100 {
            let margin = readout_margin(&spec, c, 200);
            assert_eq!(margin > 0.0, c <= spec.n_reliable, "c = {c}, margin = {margin}");
        }
        let margins: Vec<f64> = (1..=100).map(|c| readout_margin(&spec, c, 200)).collect();
        assert!(margins.windows(2).all(|m| m[0] > m[1]));
    }

    #[test]
    fn magnitude_channel_relocates() {
        let ch = Channels::layout(3).unwrap();
        assert_eq!(ch.get("mag"), 3);
        assert_eq!(ch.get("comma"), 14);
        assert!(Channels::layout(60).is_err());
    }

    #[test]
    fn capacity_violations_listed() {
        let vocab = Vocab::standard();
        let mut cfg = default_config(&vocab);
        cfg.d_mlp = 16;
        cfg.n_heads = 2;
        let spec = CircuitSpec {
            transfer_layer: 5,
            ..CircuitSpec::default()
        };
        match build_counting_model(&spec, &vocab, &cfg) {
            Err(LabError::Construction(msg)) => {
                assert!(msg.contains("d_mlp"));
                assert!(msg.contains("n_heads"));
                assert!(msg.contains("counter < transfer < aggregate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
