// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counting tasks: generation, prompt rendering and answer parsing.

pub mod templates;

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tokenizer::ITEMS;

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Unstructured,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Steps {
    Without,
    With,
}

/// Input format crossed with prompting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mode {
    pub structure: Structure,
    pub steps: Steps,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::new(Structure::Unstructured, Steps::Without),
        Mode::new(Structure::Unstructured, Steps::With),
        Mode::new(Structure::Structured, Steps::Without),
        Mode::new(Structure::Structured, Steps::With),
    ];

    pub const fn new(structure: Structure, steps: Steps) -> Self {
        Self { structure, steps }
    }

    /// Short label such as `structured/steps`.
    pub fn label(&self) -> &'static str {
        match (self.structure, self.steps) {
            (Structure::Unstructured, Steps::Without) => "unstructured/no_steps",
            (Structure::Unstructured, Steps::With) => "unstructured/steps",
            (Structure::Structured, Steps::Without) => "structured/no_steps",
            (Structure::Structured, Steps::With) => "structured/steps",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == label)
            .ok_or_else(|| LabError::Config(format!("unknown mode {label:?}")))
    }
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

/// One counting problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountingTask {
    pub item: String,
    pub partition_sizes: Vec<usize>,
    pub total: usize,
    pub mode: Mode,
    pub seed: u64,
    /// The last partition was shortened below the size range to hit `total`.
    #[serde(default)]
    pub size_adjusted: bool,
}

impl CountingTask {
    /// Structured task with sizes drawn from `size_range` using `seed`.
    pub fn structured(
        item: &str,
        total: usize,
        size_range: (usize, usize),
        steps: Steps,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut task = gen_structured(item, total, size_range, &mut rng)?;
        task.mode.steps = steps;
        task.seed = seed;
        Ok(task)
    }

    /// Single-partition task of `n` items.
    pub fn unstructured(item: &str, n: usize, steps: Steps) -> Self {
        let mut task = gen_unstructured(item, n);
        task.mode.steps = steps;
        task
    }

    /// Task with explicit partition sizes.
    pub fn with_sizes(item: &str, sizes: Vec<usize>, mode: Mode) -> Result<Self> {
        check_item(item)?;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(LabError::Generation("partition sizes must be ≥ 1".into()));
        }
        if mode.structure == Structure::Unstructured && sizes.len() != 1 {
            return Err(LabError::Generation(
                "unstructured tasks have exactly one partition".into(),
            ));
        }
        Ok(Self {
            item: item.to_string(),
            total: sizes.iter().sum(),
            partition_sizes: sizes,
            mode,
            seed: 0,
            size_adjusted: false,
        })
    }

    pub fn render_prompt(&self) -> String {
        render_prompt(self)
    }

    /// The same items under the question-answer probe prompt.
    pub fn render_probe(&self) -> String {
        templates::probe_prompt(&self.item, &templates::item_list(&self.item, &self.partition_sizes))
    }
}

fn check_item(item: &str) -> Result<()> {
    if ITEMS.contains(&item) {
        Ok(())
    } else {
        Err(LabError::Generation(format!("unknown item {item:?}")))
    }
}

/// Split `total` into partitions whose sizes are uniform in `[lo, hi]`; the
/// last partition takes whatever remains.
pub fn gen_structured<R: Rng + ?Sized>(
    item: &str,
    total: usize,
    size_range: (usize, usize),
    rng: &mut R,
) -> Result<CountingTask> {
    check_item(item)?;
    let (lo, hi) = size_range;
    if lo == 0 || hi < lo {
        return Err(LabError::Generation(format!("invalid size range [{lo}, {hi}]")));
    }
    if total < lo {
        return Err(LabError::Generation(format!(
            "total {total} is below the minimum partition size {lo}"
        )));
    }
    let mut sizes = Vec::new();
    let mut remaining = total;
    while remaining > hi {
        let s = rng.gen_range(lo..=hi);
        sizes.push(s);
        remaining -= s;
    }
    sizes.push(remaining);
    Ok(CountingTask {
        item: item.to_string(),
        total,
        size_adjusted: remaining < lo,
        partition_sizes: sizes,
        mode: Mode::new(Structure::Structured, Steps::With),
        seed: 0,
    })
}

pub fn gen_unstructured(item: &str, n: usize) -> CountingTask {
    CountingTask {
        item: item.to_string(),
        partition_sizes: vec![n],
        total: n,
        mode: Mode::new(Structure::Unstructured, Steps::Without),
        seed: 0,
        size_adjusted: false,
    }
}

/// Header for the task's mode, a blank line, then the item list.
pub fn render_prompt(task: &CountingTask) -> String {
    format!(
        "{}\n\n{}",
        templates::header(task.mode),
        templates::item_list(&task.item, &task.partition_sizes)
    )
}

// ---------------------------------------------------------------------------
// Answers
// ---------------------------------------------------------------------------

/// Counts extracted from generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub final_answer: u64,
    pub steps: Vec<(u64, u64)>,
}

fn step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"part\s*(\d+)\s*:\s*(\d+)").expect("valid regex"))
}

fn final_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Final answer\s*:\s*\[?\s*(\d+)").expect("valid regex"))
}

pub fn parse_answer(generated: &str) -> Result<ParsedAnswer> {
    let num = |s: &str| {
        s.parse::<u64>().map_err(|_| LabError::Parse {
            reason: format!("number {s:?} out of range"),
            raw: generated.to_string(),
        })
    };
    let mut steps = Vec::new();
    for cap in step_re().captures_iter(generated) {
        steps.push((num(&cap[1])?, num(&cap[2])?));
    }
    let cap = final_re().captures(generated).ok_or_else(|| LabError::Parse {
        reason: "no final answer".into(),
        raw: generated.to_string(),
    })?;
    Ok(ParsedAnswer {
        final_answer: num(&cap[1])?,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Task sets
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TaskLine {
    #[serde(flatten)]
    task: CountingTask,
    prompt: String,
}

/// Write one JSON object per line, each with its rendered prompt.
pub fn write_jsonl(path: &Path, tasks: &[CountingTask]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for task in tasks {
        let line = TaskLine {
            task: task.clone(),
            prompt: task.render_prompt(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CountingTask>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TaskLine = serde_json::from_str(&line)?;
        out.push(parsed.task);
    }
    Ok(out)
}

/// Deterministic task set: `per_bin` tasks for each total range and mode,
/// cycling through items.
pub fn task_set(
    modes: &[Mode],
    bins: &[(usize, usize)],
    per_bin: usize,
    size_range: (usize, usize),
    seed: u64,
) -> Result<Vec<CountingTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &mode in modes {
        for &(lo, hi) in bins {
            for k in 0..per_bin {
                let item = ITEMS[k % ITEMS.len()];
                let total = rng.gen_range(lo..=hi);
                let task_seed: u64 = rng.gen();
                let task = match mode.structure {
                    Structure::Structured => {
                        let mut t =
                            CountingTask::structured(item, total, size_range, mode.steps, task_seed)?;
                        t.mode = mode;
                        t
                    }
                    Structure::Unstructured => {
                        let mut t = CountingTask::unstructured(item, total, mode.steps);
                        t.seed = task_seed;
                        t
                    }
                };
                out.push(task);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forced_single_partition() {
        let t = CountingTask::structured("apple", 3, (3, 3), Steps::With, 0).unwrap();
        assert_eq!(t.partition_sizes, [3]);
    }

    #[test]
    fn infeasible_total() {
        assert!(matches!(
            CountingTask::structured("apple", 2, (3, 5), Steps::With, 0),
            Err(LabError::Generation(_))
        ));
    }

    #[test]
    fn size_histogram_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hist = [0usize; 10];
        for _ in 0..1000 {
            let t = gen_structured("cat", 50, (6, 9), &mut rng).unwrap();
            assert_eq!(t.partition_sizes.iter().sum::<usize>(), 50);
            let (last, body) = t.partition_sizes.split_last().unwrap();
            assert!((1..=9).contains(last));
            for &s in body {
                hist[s] += 1;
            }
        }
        let n: usize = hist[6..=9].iter().sum();
        let expected = n as f64 / 4.0;
        // Chi-square with 3 degrees of freedom; 16.27 is the 0.999 quantile.
        let chi2: f64 = hist[6..=9]
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}, hist = {hist:?}");
        assert_eq!(hist[..6].iter().sum::<usize>(), 0);
    }

    #[test]
    fn structured_steps_prompt() {
        let t = CountingTask::with_sizes(
            "apple",
            vec![3, 4, 5],
            Mode::new(Structure::Structured, Steps::With),
        )
        .unwrap();
        let p = t.render_prompt();
        assert!(p.contains("part1: [x1]"));
        assert!(p.ends_with(
            "apple, apple, apple | apple, apple, apple, apple | apple, apple, apple, apple, apple"
        ));
    }

    #[test]
    fn unstructured_prompt_has_no_bar() {
        let p = CountingTask::unstructured("fig", 7, Steps::Without).render_prompt();
        assert!(p.contains("Final answer: [x]"));
        assert!(!p.contains('|'));
    }

    #[test]
    fn parse_examples() {
        let a = parse_answer("part1: 3 part2: 4 Final answer: 7").unwrap();
        assert_eq!(a.steps, [(1, 3), (2, 4)]);
        assert_eq!(a.final_answer, 7);
        let b = parse_answer("Final answer: 12").unwrap();
        assert!(b.steps.is_empty());
        assert_eq!(b.final_answer, 12);
        let c = parse_answer("part 1: 5\nFinal answer: 5").unwrap();
        assert_eq!(c.steps, [(1, 5)]);
        match parse_answer("garbage") {
            Err(LabError::Parse { raw, .. }) => assert_eq!(raw, "garbage"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let tasks = task_set(&Mode::ALL, &[(11, 20)], 3, (6, 9), 1).unwrap();
        let path = std::env::temp_dir().join(format!("countlab-tasks-{}.jsonl", std::process::id()));
        write_jsonl(&path, &tasks).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), tasks);
    }

    proptest! {
        #[test]
        fn generator_sums_and_bounds(total in 1usize..300, lo in 1usize..10, span in 0usize..10, seed: u64) {
            let hi = lo + span;
            prop_assume!(total >= lo);
            let a = CountingTask::structured("dog", total, (lo, hi), Steps::With, seed).unwrap();
            let b = CountingTask::structured("dog", total, (lo, hi), Steps::With, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.partition_sizes.iter().sum::<usize>(), total);
            let (last, body) = a.partition_sizes.split_last().unwrap();
            prop_assert!(*last >= 1 && *last <= hi);
            prop_assert!(body.iter().all(|&s| s >= lo && s <= hi));
            prop_assert_eq!(a.size_adjusted, *last < lo);
        }

        #[test]
        fn rendering_is_injective(
            a in proptest::collection::vec(1usize..6, 1..5),
            b in proptest::collection::vec(1usize..6, 1..5),
            ia in 0usize..16, ib in 0usize..16, ma in 0usize..4, mb in 0usize..4,
        ) {
            let ta = CountingTask::with_sizes(ITEMS[ia], a, Mode::ALL[2 + ma % 2]).unwrap();
            let tb = CountingTask::with_sizes(ITEMS[ib], b, Mode::ALL[2 + mb % 2]).unwrap();
            let same = ta.item == tb.item && ta.partition_sizes == tb.partition_sizes && ta.mode == tb.mode;
            prop_assert_eq!(same, ta.render_prompt() == tb.render_prompt());
        }
    }
}
