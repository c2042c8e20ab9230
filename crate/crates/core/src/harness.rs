// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioural evaluation: binned accuracy and MAE per mode, and the
//! probability heatmap of decoded answers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{generate, ModelWeights};
use crate::numerics::{softmax, Matrix};
use crate::tasks::{parse_answer, CountingTask, Mode, Steps};
use crate::tokenizer::{TokenSeq, Vocab, ANSWER, FINAL, SPACE};

/// Inclusive range of totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bin {
    pub lo: usize,
    pub hi: usize,
}

impl Bin {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, total: usize) -> bool {
        (self.lo..=self.hi).contains(&total)
    }
}

/// 11–20 … 41–50 followed by 51–60 … 91–100.
pub fn default_bins() -> Vec<Bin> {
    (1..10).map(|k| Bin::new(10 * k + 1, 10 * k + 10)).collect()
}

// ---------------------------------------------------------------------------
// Single tasks
// ---------------------------------------------------------------------------

/// What the model produced for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: CountingTask,
    pub generated: String,
    pub prediction: Option<u64>,
    pub steps: Vec<(u64, u64)>,
    pub correct: bool,
    /// `|prediction − total|`, with a parse failure scored as a prediction of 0.
    pub abs_error: u64,
    pub parse_failed: bool,
}

/// Token budget large enough for every step line plus the final answer.
pub fn answer_budget(task: &CountingTask) -> usize {
    let steps = match task.mode.steps {
        Steps::With => task.partition_sizes.len(),
        Steps::Without => 0,
    };
    6 * steps + 12
}

pub fn run_task(weights: &ModelWeights, vocab: &Vocab, task: &CountingTask) -> Result<TaskOutcome> {
    let prompt = vocab.encode(&task.render_prompt())?;
    let out = generate(&prompt, vocab, weights, answer_budget(task), &[])?;
    let generated = out.text(vocab)?;
    Ok(score(task, generated))
}

fn score(task: &CountingTask, generated: String) -> TaskOutcome {
    let truth = task.total as u64;
    let (prediction, steps) = match parse_answer(&generated) {
        Ok(a) => (Some(a.final_answer), a.steps),
        Err(_) => (None, Vec::new()),
    };
    TaskOutcome {
        task: task.clone(),
        prediction,
        steps,
        correct: prediction == Some(truth),
        abs_error: prediction.unwrap_or(0).abs_diff(truth),
        parse_failed: prediction.is_none(),
        generated,
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Accuracy and MAE of predictions; `None` is a parse failure scored as 0.
pub fn bin_metrics(predictions: &[Option<u64>], truths: &[u64]) -> (f64, f64) {
    let n = truths.len().max(1) as f64;
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| **p == Some(**t))
        .count();
    let err: u64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| p.unwrap_or(0).abs_diff(*t))
        .sum();
    (correct as f64 / n, err as f64 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub mode: Mode,
    pub bin: Bin,
    pub n: usize,
    pub accuracy: f64,
    pub mae: f64,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<BinRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Heatmap>,
}

impl EvalReport {
    pub fn row(&self, mode: Mode, bin: Bin) -> Option<&BinRow> {
        self.rows.iter().find(|r| r.mode == mode && r.bin == bin)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,lo,hi,n,accuracy,mae,parse_failures\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.mode.label(),
                r.bin.lo,
                r.bin.hi,
                r.n,
                r.accuracy,
                r.mae,
                r.parse_failures
            ));
        }
        s
    }
}

/// Aggregate outcomes into one row per mode and bin.
pub fn report(outcomes: &[TaskOutcome], bins: &[Bin]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        for &bin in bins {
            let sel: Vec<&TaskOutcome> = outcomes
                .iter()
                .filter(|o| o.task.mode == mode && bin.contains(o.task.total))
                .collect();
            if sel.is_empty() {
                continue;
            }
            let preds: Vec<Option<u64>> = sel.iter().map(|o| o.prediction).collect();
            let truths: Vec<u64> = sel.iter().map(|o| o.task.total as u64).collect();
            let (accuracy, mae) = bin_metrics(&preds, &truths);
            rows.push(BinRow {
                mode,
                bin,
                n: sel.len(),
                accuracy,
                mae,
                parse_failures: sel.iter().filter(|o| o.parse_failed).count(),
            });
        }
    }
    Ok(EvalReport {
        rows,
        heatmap: None,
    })
}

/// Run every task and aggregate per mode and bin.
pub fn evaluate(
    weights: &ModelWeights,
    vocab: &Vocab,
    tasks: &[CountingTask],
    bins: &[Bin],
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(LabError::Config("no tasks to evaluate".into()));
    }
    if let Some(t) = tasks.iter().find(|t| !bins.iter().any(|b| b.contains(t.total))) {
        return Err(LabError::Config(format!("total {} falls in no bin", t.total)));
    }
    let outcomes = tasks
        .par_iter()
        .map(|t| run_task(weights, vocab, t))
        .collect::<Result<Vec<_>>>()?;
    report(&outcomes, bins)
}

// ---------------------------------------------------------------------------
// Heatmap
// ---------------------------------------------------------------------------

/// Row `t` is the answer distribution over numbers `0..=max` for `t` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub counts: Vec<usize>,
    pub max_number: usize,
    pub probs: Matrix,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("target");
        for n in 0..=self.max_number {
            s.push_str(&format!(",p{n}"));
        }
        s.push('\n');
        for (r, t) in self.counts.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in self.probs.row(r) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn diagonal(&self, t: usize) -> Option<f64> {
        let r = self.counts.iter().position(|&c| c == t)?;
        (t <= self.max_number).then(|| self.probs.get(r, t))
    }
}

/// Position whose logits choose the final number: the space after
/// `Final answer :`.
pub fn answer_position(seq: &TokenSeq, vocab: &Vocab, from: usize) -> Option<usize> {
    let want = [
        vocab.id(FINAL)?,
        vocab.id(ANSWER)?,
        vocab.id(":")?,
        vocab.id(SPACE)?,
    ];
    seq.ids
        .windows(4)
        .enumerate()
        .skip(from.saturating_sub(3))
        .find(|(_, w)| *w == want)
        .map(|(i, _)| i + 3)
}

/// Answer distributions of single-partition contexts, averaged over items.
pub fn output_prob_heatmap(
    weights: &ModelWeights,
    vocab: &Vocab,
    counts: &[usize],
    items: &[&str],
    steps: Steps,
) -> Result<Heatmap> {
    let max_number = counts.iter().copied().max().unwrap_or(0);
    if max_number > vocab.max_number() as usize {
        return Err(LabError::Config(format!(
            "count {max_number} has no number token"
        )));
    }
    if items.is_empty() {
        return Err(LabError::Config("no items for the heatmap".into()));
    }
    let rows = counts
        .par_iter()
        .map(|&t| {
            let mut row = vec![0.0; max_number + 1];
            for item in items {
                let task = CountingTask::unstructured(item, t, steps);
                let prompt = vocab.encode(&task.render_prompt())?;
                let out = generate(&prompt, vocab, weights, answer_budget(&task), &[])?;
                let pos = answer_position(&out.seq, vocab, prompt.len()).ok_or_else(|| {
                    LabError::Parse {
                        reason: "no answer position".into(),
                        raw: out.text(vocab).unwrap_or_default(),
                    }
                })?;
                let probs = softmax(out.trace.logits_at(pos).unwrap_or_default());
                for (n, r) in row.iter_mut().enumerate() {
                    let id = vocab.number(n as u32).unwrap_or_default() as usize;
                    *r += probs[id] / items.len() as f64;
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Heatmap {
        counts: counts.to_vec(),
        max_number,
        probs: Matrix::from_rows(&rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let (acc, mae) = bin_metrics(&[Some(5), Some(7), Some(9)], &[5, 8, 9]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!((mae - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bin_metrics(&[Some(4), Some(4)], &[4, 4]), (1.0, 0.0));
    }

    #[test]
    fn parse_failure_scores_zero() {
        let (acc, mae) = bin_metrics(&[None], &[12]);
        assert_eq!((acc, mae), (0.0, 12.0));
        let t = CountingTask::unstructured("cat", 12, Steps::Without);
        let o = score(&t, "nonsense".into());
        assert!(o.parse_failed && !o.correct);
        assert_eq!(o.abs_error, 12);
    }

    #[test]
    fn default_bin_edges() {
        let b = default_bins();
        assert_eq!(b.first(), Some(&Bin::new(11, 20)));
        assert_eq!(b.last(), Some(&Bin::new(91, 100)));
        assert_eq!(b.len(), 9);
    }
}
