// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed prompt headers for the four task modes and the probing prompts.

use super::{Mode, Steps, Structure};
use crate::tokenizer::{ITEMS, N_FRUITS};

pub const UNSTRUCTURED_NO_STEPS: &str = "You will be given a list of items. Count the total number of objects.
Output the final result exactly in the following format:
Final answer: [x]";

pub const UNSTRUCTURED_STEPS: &str = "You will be given a list of items. Count the total number of objects.
Let's count step by step.
Output the final result exactly in the following format:
Final answer: [x]";

pub const STRUCTURED_NO_STEPS: &str = "You will be given multiple partitions of content separated by \"|\".
For each partition, count the number of items it contains.
After counting all partitions, compute the total by summing the counts.
Output the final result exactly in the following format:
Final answer: [x]";

pub const STRUCTURED_STEPS: &str = "You will be given multiple partitions of content separated by \"|\".
For each partition:
- Count the number of items it contains.
- Report the count separately using the format:
  part1: [x1]
  part2: [x2]
  ...
After counting all partitions:
- Compute the total by summing all individual counts.
- Output the final total exactly in this format:
Final answer: [x]";

/// Longer instruction block used for attention analysis.
pub const ATTENTION_ANALYSIS: &str = "You will be given a list of items, where groups (partitions) are separated by the \"|\" character.

For each partition:
- Count the number of items it contains.
- Report the count separately using the format:
  part1: x1
  part2: x2
  part3: x3
  ...

After counting all partitions:
- Compute the total by summing all individual counts.
- Output the final total exactly in this format:
Final answer: x
Just answer in this format without any extra things and follow the instructions.";

const PROBE_HEAD: &str = "Answer the question with just a number only (We've separated each group of items with \"|\" so you can calculate the final count easier).
Question: How many ";
const PROBE_TAIL: &str = " are there in the following sentence?
 ";

/// Header for a task mode.
pub fn header(mode: Mode) -> &'static str {
    match (mode.structure, mode.steps) {
        (Structure::Unstructured, Steps::Without) => UNSTRUCTURED_NO_STEPS,
        (Structure::Unstructured, Steps::With) => UNSTRUCTURED_STEPS,
        (Structure::Structured, Steps::Without) => STRUCTURED_NO_STEPS,
        (Structure::Structured, Steps::With) => STRUCTURED_STEPS,
    }
}

/// Category noun used by the question-answer probe prompt.
pub fn category(item: &str) -> &'static str {
    match ITEMS.iter().position(|&i| i == item) {
        Some(i) if i >= N_FRUITS => "animals",
        _ => "fruits",
    }
}

/// Question-answer prompt wrapped around an already rendered item list.
pub fn probe_prompt(item: &str, items_text: &str) -> String {
    format!("{PROBE_HEAD}{}{PROBE_TAIL}{items_text}", category(item))
}

/// Render partition sizes as `a, a | a, a, a`.
pub fn item_list(item: &str, sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(|&n| vec![item; n].join(", "))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Every header whose words belong in the vocabulary.
pub fn corpus_headers() -> Vec<String> {
    let mut out: Vec<String> = [
        UNSTRUCTURED_NO_STEPS,
        UNSTRUCTURED_STEPS,
        STRUCTURED_NO_STEPS,
        STRUCTURED_STEPS,
        ATTENTION_ANALYSIS,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    out.push(probe_prompt("apple", ""));
    out.push(probe_prompt("cat", ""));
    out
}

/// Full prompts covering every header, used for round-trip checks.
pub fn corpus_examples() -> Vec<String> {
    let list = item_list("apple", &[3, 4, 5]);
    let mut out: Vec<String> = [
        UNSTRUCTURED_NO_STEPS,
        UNSTRUCTURED_STEPS,
        STRUCTURED_NO_STEPS,
        STRUCTURED_STEPS,
        ATTENTION_ANALYSIS,
    ]
    .iter()
    .map(|h| format!("{h}\n\n{list}"))
    .collect();
    out.push(probe_prompt("apple", &list));
    out.push(probe_prompt("whale", "whale"));
    out
}
