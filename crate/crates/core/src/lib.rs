// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small transformer laboratory for partitioned counting.
//!
//! The crate builds a decoder-only transformer whose weights are written by
//! hand so that it counts items inside `|`-separated partitions, reports one
//! count per partition and sums them. Alongside the model it provides task
//! generation, behavioural evaluation and causal interventions (ablation,
//! activation patching, attention knockout) that run against the same engine.

pub mod constructor;
pub mod error;
pub mod harness;
pub mod mediation;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod tokenizer;

pub use error::{LabError, Result};
pub use numerics::Matrix;
pub use tasks::{CountingTask, Mode, Steps, Structure};
pub use tokenizer::{TokenClass, TokenId, TokenSeq, Vocab};
