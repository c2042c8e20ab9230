// SPDX-License-Identifier: MIT OR Apache-2.0

//! The ten acceptance criteria. Each test writes one `PASS`/`FAIL` line to
//! stdout (bypassing capture) and then asserts.

mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use countlab::constructor::{counter_fraction_oracle, CircuitSites, CircuitSpec};
use countlab::harness::{answer_position, evaluate, run_task, Bin};
use countlab::mediation::{
    attention_profile, countscope_scan, cross_context_patch, knockout_sweep, layer_localization,
    zero_ablation_experiment, DropTable, EdgeSelector, Role,
};
use countlab::model::{forward, generate, Intervention, ModelWeights};
use countlab::numerics::argmax_with_margin;
use countlab::tasks::{task_set, CountingTask, Mode, Steps, Structure};
use countlab::tokenizer::ITEMS;
use countlab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn steps_mode() -> Mode {
    Mode::new(Structure::Structured, Steps::With)
}

fn steps_task(item: &str, sizes: &[usize]) -> CountingTask {
    CountingTask::with_sizes(item, sizes.to_vec(), steps_mode()).unwrap()
}

/// Mechanism tasks: partition sizes 3–9 in varied orders.
fn mechanism_tasks() -> Vec<CountingTask> {
    (3..=9)
        .map(|s| steps_task(ITEMS[s], &[s, 12 - s, s.max(5) - 2]))
        .collect()
}

fn storage_layers(spec: &CircuitSpec) -> Vec<usize> {
    (spec.transfer_layer..spec.aggregate_layer).collect()
}

// ---------------------------------------------------------------------------

#[test]
fn c01_intervention_exactness() {
    let start = Instant::now();
    let (vocab, spec, w) = common::counting_model();
    let mut failures = Vec::new();
    let models: Vec<(&str, ModelWeights)> = vec![
        ("constructed", w),
        ("random", common::random_model(&vocab, 17)),
    ];
    for (name, w) in &models {
        let text = if *name == "constructed" {
            steps_task("cat", &[4, 3, 5]).render_prompt()
        } else {
            "cat, cat, cat | dog, dog".to_string()
        };
        let seq = vocab.encode(&text).unwrap();
        let n_layers = w.config.n_layers;
        let all_layers: Vec<usize> = (0..n_layers).collect();
        let clean = forward(&seq, w, &[]).unwrap();
        let src = Arc::new(clean.clone());

        if forward(&seq, w, &[]).unwrap() != clean {
            failures.push(format!("{name}: empty list"));
        }
        let swap: Vec<Intervention> = (0..seq.len())
            .map(|p| Intervention::PatchResid {
                source: src.clone(),
                src_pos: p,
                dst_pos: p,
                layers: all_layers.clone(),
            })
            .collect();
        if forward(&seq, w, &swap).unwrap() != clean {
            failures.push(format!("{name}: self-swap"));
        }
        let positions: Vec<usize> = (0..seq.len()).collect();
        let mut restore = vec![Intervention::ZeroAblate {
            positions: positions.clone(),
            layers: all_layers.clone(),
        }];
        restore.extend(all_layers.iter().map(|&layer| Intervention::RestoreLayer {
            positions: positions.clone(),
            layer,
            source: src.clone(),
        }));
        if forward(&seq, w, &restore).unwrap() != clean {
            failures.push(format!("{name}: full restore"));
        }

        let donor_seq = vocab.encode("dog, dog, dog, dog | cat").unwrap();
        let donor = Arc::new(forward(&donor_seq, w, &[]).unwrap());
        let (src_pos, dst_pos, layer) = (3, seq.len() - 2, n_layers / 2);
        let patched = forward(
            &seq,
            w,
            &[Intervention::PatchResid {
                source: donor.clone(),
                src_pos,
                dst_pos,
                layers: vec![layer],
            }],
        )
        .unwrap();
        if patched.resid[layer][dst_pos] != donor.resid[layer][src_pos] {
            failures.push(format!("{name}: patched site differs from donor"));
        }

        let q = seq.len() - 1;
        let head = CircuitSites::new(&spec).transfer;
        let head = if *name == "constructed" { head } else { (1, 0) };
        let ko = forward(
            &seq,
            w,
            &[Intervention::Knockout {
                layer: head.0,
                head: head.1,
                queries: vec![q, q - 1],
                keys: (0..q - 2).step_by(2).collect(),
            }],
        )
        .unwrap();
        for qq in [q, q - 1] {
            let sum: f64 = ko.attn_row(head.0, head.1, qq).unwrap().iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                failures.push(format!("{name}: knocked row sums to {sum}"));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "intervention exactness",
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!("violations {failures:?}, {elapsed:.2?}"),
    );
}

#[test]
fn c02_counter_oracle() {
    let start = Instant::now();
    let (vocab, spec, w) = common::counting_model();
    let frac = w.config.channels["frac"];
    let mut worst_err: f64 = 0.0;
    let mut wrong_decodes = Vec::new();
    let mut margins = Vec::new();
    for c in 1..=2 * spec.n_reliable {
        let task = CountingTask::unstructured("peach", c, Steps::Without);
        let prompt = vocab.encode(&task.render_prompt()).unwrap();
        let g = generate(&prompt, &vocab, &w, 8, &[]).unwrap();
        let channel = g.trace.resid[spec.counter_layer][prompt.len() - 1][frac];
        worst_err = worst_err.max((channel - counter_fraction_oracle(c)).abs());

        let pos = answer_position(&g.seq, &vocab, prompt.len()).unwrap();
        let logits = g.trace.logits_at(pos).unwrap();
        let truth = vocab.number(c as u32).unwrap() as usize;
        let (top, _) = argmax_with_margin(logits).unwrap();
        if c <= spec.n_reliable && top != truth {
            wrong_decodes.push(c);
        }
        let rival = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != truth)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        margins.push(logits[truth] - rival);
    }
    let decreasing = margins.windows(2).all(|p| p[1] < p[0]);
    let elapsed = start.elapsed();
    verdict(
        2,
        "counter oracle",
        worst_err < 1e-10
            && wrong_decodes.is_empty()
            && decreasing
            && elapsed < Duration::from_secs(60),
        format!(
            "max |frac − c/(c+1)| = {worst_err:.2e}, wrong decodes ≤ n_reliable {wrong_decodes:?}, \
             margin strictly decreasing {decreasing}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn c03_structured_vs_unstructured_curves() {
    let start = Instant::now();
    let (vocab, spec, w) = common::counting_model();
    let per_total = 20;
    let jobs: Vec<(usize, usize)> = (5..=100)
        .flat_map(|t| (0..per_total).map(move |k| (t, k)))
        .collect();
    let results: Vec<(usize, bool, bool)> = jobs
        .par_iter()
        .map(|&(total, k)| {
            let item = ITEMS[k % ITEMS.len()];
            let seed = (total * 1000 + k) as u64;
            let s = CountingTask::structured(item, total, (3, 9), Steps::With, seed).unwrap();
            let u = CountingTask::unstructured(item, total, Steps::Without);
            let s_ok = run_task(&w, &vocab, &s).unwrap().correct;
            let u_ok = run_task(&w, &vocab, &u).unwrap().correct;
            (total, s_ok, u_ok)
        })
        .collect();
    let acc = |f: &dyn Fn(&(usize, bool, bool)) -> bool, sel: &dyn Fn(usize) -> bool| {
        let v: Vec<_> = results.iter().filter(|r| sel(r.0)).collect();
        v.iter().filter(|r| f(r)).count() as f64 / v.len() as f64
    };
    let r = spec.n_reliable;
    let s_all = acc(&|x| x.1, &|_| true);
    let u_low = acc(&|x| x.2, &|t| t <= r);
    let worst_u_high = (3 * r..=100)
        .map(|t| acc(&|x| x.2, &|tt| tt == t))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        3,
        "structured/steps vs unstructured/no_steps",
        s_all == 1.0 && u_low == 1.0 && worst_u_high <= 0.10 && elapsed < Duration::from_secs(600),
        format!(
            "structured/steps acc {s_all:.3}, unstructured acc(total ≤ {r}) {u_low:.3}, \
             max unstructured acc(total ≥ {}) {worst_u_high:.3}, {} tasks, {elapsed:.2?}",
            3 * r,
            2 * results.len()
        ),
    );
}

#[test]
fn c04_four_mode_ordering() {
    let (vocab, _, w) = common::counting_model();
    let bins: Vec<(usize, usize)> = vec![(11, 20), (21, 30), (31, 40), (41, 50)];
    let tasks = task_set(&Mode::ALL, &bins, 25, (3, 9), 4).unwrap();
    let bin_list: Vec<Bin> = bins.iter().map(|&(a, b)| Bin::new(a, b)).collect();
    let report = evaluate(&w, &vocab, &tasks, &bin_list).unwrap();
    let acc = |m: Mode, b: Bin| report.row(m, b).unwrap().accuracy;
    let [u_ns, u_s, s_ns, s_s] = Mode::ALL;
    let mut dominates = true;
    let mut structure_only_dominates = true;
    let mut cells = Vec::new();
    for &b in &bin_list {
        let others = [acc(u_ns, b), acc(u_s, b), acc(s_ns, b)];
        dominates &= others.iter().all(|&o| acc(s_s, b) > o);
        structure_only_dominates &=
            acc(s_ns, b) > acc(u_ns, b) && acc(s_ns, b) > acc(u_s, b);
        cells.push(format!(
            "{}-{}: {:.2}/{:.2}/{:.2}/{:.2}",
            b.lo,
            b.hi,
            acc(u_ns, b),
            acc(u_s, b),
            acc(s_ns, b),
            acc(s_s, b)
        ));
    }
    verdict(
        4,
        "four-mode ordering",
        dominates && !structure_only_dominates,
        format!(
            "acc u/ns, u/s, s/ns, s/s per bin [{}]; structured/steps dominates {dominates}, \
             structured/no_steps dominates {structure_only_dominates}",
            cells.join("; ")
        ),
    );
}

#[test]
fn c05_countscope_localization() {
    let (vocab, spec, w) = common::counting_model();
    let mut final_item: f64 = 1.0;
    let mut final_comma: f64 = 1.0;
    let mut mid: f64 = 0.0;
    let mut reset: f64 = 1.0;
    for task in mechanism_tasks() {
        let rows = countscope_scan(&w, &vocab, &task, &[spec.counter_layer]).unwrap();
        for r in &rows {
            let is_item = r.token == task.item;
            if is_item && r.items_so_far == r.partition_size {
                final_item = final_item.min(r.p_partition_size);
            } else if r.token == "," && r.items_so_far + 1 == r.partition_size {
                final_comma = final_comma.min(r.p_partition_size);
            } else if is_item && r.items_so_far < r.partition_size {
                mid = mid.max(r.p_partition_size);
            }
            if is_item && r.partition > 1 && r.items_so_far == 1 {
                reset = reset.min(r.p_items_so_far);
            }
        }
    }
    verdict(
        5,
        "countscope localization",
        final_item > 0.9 && final_comma > 0.9 && mid < 0.2 && reset > 0.9,
        format!(
            "min mass final item {final_item:.4}, final comma {final_comma:.4}; \
             max mass mid items {mid:.4}; min mass on 1 after separator {reset:.4}"
        ),
    );
}

#[test]
fn c06_ablation_causality() {
    let (vocab, _, w) = common::counting_model();
    let mut min_boundary: f64 = 1.0;
    let mut max_mid: f64 = 0.0;
    let mut sizes_seen = Vec::new();
    for task in mechanism_tasks() {
        let b = zero_ablation_experiment(&w, &vocab, &task, Role::Boundary).unwrap();
        let m = zero_ablation_experiment(&w, &vocab, &task, Role::NonFinalItem).unwrap();
        for (i, &size) in task.partition_sizes.iter().enumerate() {
            if (3..=9).contains(&size) {
                sizes_seen.push(size);
                min_boundary = min_boundary.min(b.rows[i].drop);
                max_mid = max_mid.max(m.rows[i].drop.abs());
            }
        }
    }
    sizes_seen.sort_unstable();
    sizes_seen.dedup();
    verdict(
        6,
        "ablation causality",
        min_boundary > 0.5 && max_mid < 0.05 && sizes_seen == (3..=9).collect::<Vec<_>>(),
        format!(
            "min drop ablating final ', item' {min_boundary:.4}, max |drop| non-final items \
             {max_mid:.4}, sizes {sizes_seen:?}"
        ),
    );
}

fn mean_sweep(w: &ModelWeights, vocab: &Vocab, edges: &EdgeSelector) -> DropTable {
    let tables: Vec<DropTable> = mechanism_tasks()
        .iter()
        .map(|t| knockout_sweep(w, vocab, t, edges).unwrap())
        .collect();
    DropTable::mean(&tables).unwrap()
}

#[test]
fn c07_knockout_localization() {
    let (vocab, spec, w) = common::counting_model();
    let sites = CircuitSites::new(&spec);
    let inter = mean_sweep(&w, &vocab, &EdgeSelector::INTERMEDIATE);
    let fin = mean_sweep(&w, &vocab, &EdgeSelector::FINAL);
    let cell = |t: &DropTable| {
        let r = t.argmax().unwrap();
        (r.layer.unwrap(), r.head.unwrap())
    };
    let (ci, cf) = (cell(&inter), cell(&fin));
    let off_circuit = inter
        .rows
        .iter()
        .chain(&fin.rows)
        .filter(|r| !sites.contains(r.layer.unwrap(), r.head.unwrap()))
        .fold(0.0f64, |m, r| m.max(r.drop.abs()));
    verdict(
        7,
        "knockout localization",
        ci == sites.transfer && cf == sites.aggregate && ci != cf && off_circuit < 0.05,
        format!(
            "intermediate argmax L{}H{} (transfer L{}H{}), final argmax L{}H{} (aggregate L{}H{}), \
             max |drop| off-circuit {off_circuit:.2e}",
            ci.0, ci.1, sites.transfer.0, sites.transfer.1, cf.0, cf.1, sites.aggregate.0,
            sites.aggregate.1
        ),
    );
}

#[test]
fn c08_cross_context_arithmetic() {
    let (vocab, spec, w) = common::counting_model();
    let layers = storage_layers(&spec);
    let fixture = cross_context_patch(
        &w,
        &vocab,
        &steps_task("apple", &[7, 4, 8]),
        &steps_task("apple", &[5, 6, 3]),
        2,
        &layers,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(CountingTask, CountingTask, usize)> = (0..200)
        .map(|k| {
            let item = ITEMS[k % ITEMS.len()];
            let a = CountingTask::structured(item, rng.gen_range(6..=60), (3, 9), Steps::With, rng.gen())
                .unwrap();
            let b = CountingTask::structured(item, rng.gen_range(6..=60), (3, 9), Steps::With, rng.gen())
                .unwrap();
            let max_step = a.partition_sizes.len().min(b.partition_sizes.len());
            let step = rng.gen_range(1..=max_step);
            (a, b, step)
        })
        .collect();
    let bad: Vec<usize> = pairs
        .par_iter()
        .enumerate()
        .filter_map(|(i, (a, b, step))| {
            let r = cross_context_patch(&w, &vocab, a, b, *step, &layers).unwrap();
            let (sa, sb) = (
                a.partition_sizes[step - 1] as u64,
                b.partition_sizes[step - 1] as u64,
            );
            let want = (a.total as u64 - sa + sb, b.total as u64 - sb + sa);
            (r.new_totals != want).then_some(i)
        })
        .collect();
    verdict(
        8,
        "cross-context arithmetic",
        fixture.new_totals == (21, 12) && bad.is_empty(),
        format!(
            "fixture totals {:?} → {:?}, random pairs violating substitution {}/200",
            fixture.old_totals,
            fixture.new_totals,
            bad.len()
        ),
    );
}

#[test]
fn c09_layer_localization() {
    let (vocab, spec, w) = common::counting_model();
    let mut min_recovery: f64 = 1.0;
    let mut max_upper: f64 = 0.0;
    for task in mechanism_tasks() {
        let c = layer_localization(&w, &vocab, &task, Role::Boundary).unwrap();
        min_recovery = min_recovery.min(c.recovery[spec.counter_layer]);
        for l in spec.aggregate_layer + 1..w.config.n_layers {
            max_upper = max_upper.max(c.masking[l].abs());
        }
    }
    verdict(
        9,
        "layer localization",
        min_recovery >= 0.8 && max_upper < 1e-6,
        format!(
            "min recovery unmasking layer {} {min_recovery:.4}, max |Δ log p| masking layers > {} \
             {max_upper:.2e}",
            spec.counter_layer, spec.aggregate_layer
        ),
    );
}

#[test]
fn c10_attention_knockout_coincidence() {
    let (vocab, _, w) = common::counting_model();
    let tasks = mechanism_tasks();
    let prof = attention_profile(&w, &vocab, &tasks, &EdgeSelector::INTERMEDIATE).unwrap();
    let ko = mean_sweep(&w, &vocab, &EdgeSelector::INTERMEDIATE);
    let best = ko.argmax().unwrap();
    let ko_cell = (best.layer.unwrap(), best.head.unwrap());
    verdict(
        10,
        "attention/knockout coincidence",
        prof.argmax() == ko_cell,
        format!(
            "attention argmax L{}H{}, knockout argmax L{}H{}",
            prof.argmax().0,
            prof.argmax().1,
            ko_cell.0,
            ko_cell.1
        ),
    );
}
