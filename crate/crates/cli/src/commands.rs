// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use countlab::constructor::{build_counting_model, default_config, CircuitSites, CircuitSpec};
use countlab::harness::{evaluate, output_prob_heatmap, run_task, Bin};
use countlab::mediation::{
    attention_profile, countscope_scan, cross_context_patch, knockout_sweep, layer_localization,
    zero_ablation_experiment, CrossPatchReport, DropTable, EdgeSelector, LayerCurves,
};
use countlab::model::ModelWeights;
use countlab::tasks::{read_jsonl, task_set, write_jsonl, CountingTask, Mode, Steps, Structure};
use countlab::tokenizer::ITEMS;
use countlab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{config_error, ModelSource, RunConfig};
use crate::Command;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    vocab: Vocab,
    spec: CircuitSpec,
    weights: ModelWeights,
    out: PathBuf,
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = prepare_out(cfg, command)?;
    let (vocab, spec, weights) = load_model(cfg)?;
    let ctx = Ctx {
        cfg,
        vocab,
        spec,
        weights,
        out,
    };
    match command {
        Command::Build => build(&ctx),
        Command::Gen => gen(&ctx),
        Command::Eval => eval(&ctx),
        Command::Heatmap => heatmap(&ctx),
        Command::Attn => attn(&ctx),
        Command::Probe => probe(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::Knockout => knockout(&ctx),
        Command::Xpatch => xpatch(&ctx),
        Command::Layers => layers(&ctx),
    }
}

// ---------------------------------------------------------------------------
// Plumbing
// ---------------------------------------------------------------------------

fn prepare_out(cfg: &RunConfig, command: Command) -> anyhow::Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("countlab-out").join(command.name()));
    fs::create_dir_all(&out)
        .map_err(|e| config_error(format!("output directory {}: {e}", out.display())))?;
    let resolved = serde_json::to_string_pretty(cfg)?;
    fs::write(out.join("config.json"), resolved)
        .map_err(|e| config_error(format!("output directory {} is not writable: {e}", out.display())))?;
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<(Vocab, CircuitSpec, ModelWeights)> {
    let vocab = Vocab::standard();
    match &cfg.model {
        ModelSource::Construct(spec) => {
            let w = build_counting_model(spec, &vocab, &default_config(&vocab))?;
            Ok((vocab, spec.clone(), w))
        }
        ModelSource::Weights(path) => {
            let w = ModelWeights::load_json(path)
                .map_err(|e| config_error(format!("cannot load weights {}: {e}", path.display())))?;
            if w.config.vocab_size != vocab.len() {
                return Err(config_error(format!(
                    "weights expect {} tokens, the vocabulary has {}",
                    w.config.vocab_size,
                    vocab.len()
                )));
            }
            Ok((vocab, CircuitSpec::default(), w))
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    write(dir, name, &serde_json::to_string_pretty(value)?)
}

fn modes(cfg: &RunConfig) -> anyhow::Result<Vec<Mode>> {
    cfg.tasks
        .modes
        .iter()
        .map(|m| Mode::parse(m).map_err(|e| config_error(e.to_string())))
        .collect()
}

/// Tasks for `gen` and `eval`.
fn eval_tasks(ctx: &Ctx, command: Command) -> anyhow::Result<Vec<CountingTask>> {
    let t = &ctx.cfg.tasks;
    if let Some(file) = &t.file {
        return read_jsonl(file)
            .map_err(|e| config_error(format!("cannot read tasks {}: {e}", file.display())));
    }
    let seed = ctx.cfg.require_seed(command.name())?;
    Ok(task_set(&modes(ctx.cfg)?, &t.bins, t.per_bin, t.size_range, seed)?)
}

/// Structured tasks with steps for the mechanism experiments.
fn experiment_tasks(ctx: &Ctx, command: Command) -> anyhow::Result<Vec<CountingTask>> {
    let t = &ctx.cfg.tasks;
    let mode = Mode::new(Structure::Structured, Steps::With);
    if let Some(parts) = &t.partitions {
        return parts
            .iter()
            .map(|sizes| Ok(CountingTask::with_sizes(&t.item, sizes.clone(), mode)?))
            .collect();
    }
    if let Some(file) = &t.file {
        return read_jsonl(file)
            .map_err(|e| config_error(format!("cannot read tasks {}: {e}", file.display())));
    }
    let seed = ctx.cfg.require_seed(command.name())?;
    let n = ctx.cfg.experiment.tasks_per_bin;
    Ok(task_set(&[mode], &t.bins, n, t.size_range, seed)?)
}

fn edges(ctx: &Ctx) -> EdgeSelector {
    ctx.cfg.experiment.edges.unwrap_or(EdgeSelector::INTERMEDIATE)
}

fn prefix_csv(csv: &str, column: &str, value: &str, header: bool) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if header {
                out.push_str(&format!("{column},{line}\n"));
            }
        } else {
            out.push_str(&format!("{value},{line}\n"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn build(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.weights.save_json(&ctx.out.join("weights.json"))?;
    ctx.vocab.save_json(&ctx.out.join("vocab.json"))?;
    let sites = CircuitSites::new(&ctx.spec);
    write_json(&ctx.out, "circuit.json", &sites)?;
    let c = &ctx.weights.config;
    println!(
        "model: {} layers × {} heads, d_model {}, vocab {}",
        c.n_layers, c.n_heads, c.d_model, c.vocab_size
    );
    println!("counter   L{}H{}", sites.counter.0, sites.counter.1);
    println!("transfer  L{}H{}", sites.transfer.0, sites.transfer.1);
    println!("aggregate L{}H{}", sites.aggregate.0, sites.aggregate.1);
    println!("weights written to {}", ctx.out.join("weights.json").display());
    Ok(())
}

fn gen(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = eval_tasks(ctx, Command::Gen)?;
    write_jsonl(&ctx.out.join("tasks.jsonl"), &tasks)?;
    let outcomes = tasks
        .par_iter()
        .map(|t| run_task(&ctx.weights, &ctx.vocab, t))
        .collect::<countlab::Result<Vec<_>>>()?;
    let mut lines = String::new();
    for o in &outcomes {
        lines.push_str(&serde_json::to_string(o)?);
        lines.push('\n');
    }
    write(&ctx.out, "generations.jsonl", &lines)?;
    let correct = outcomes.iter().filter(|o| o.correct).count();
    println!("{} tasks, {} correct", outcomes.len(), correct);
    Ok(())
}

fn eval(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = eval_tasks(ctx, Command::Eval)?;
    let bins: Vec<Bin> = ctx.cfg.tasks.bins.iter().map(|&(a, b)| Bin::new(a, b)).collect();
    let report = evaluate(&ctx.weights, &ctx.vocab, &tasks, &bins)?;
    write(&ctx.out, "eval.csv", &report.to_csv())?;
    write_json(&ctx.out, "eval.json", &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn heatmap(ctx: &Ctx) -> anyhow::Result<()> {
    let e = &ctx.cfg.experiment;
    let items: Vec<&str> = e.heatmap_items.iter().map(String::as_str).collect();
    let steps = if e.heatmap_steps { Steps::With } else { Steps::Without };
    let h = output_prob_heatmap(&ctx.weights, &ctx.vocab, &e.heatmap_counts, &items, steps)?;
    write(&ctx.out, "heatmap.csv", &h.to_csv())?;
    for &t in &h.counts {
        println!("{t:>4}: p(correct) = {:.4}", h.diagonal(t).unwrap_or(0.0));
    }
    Ok(())
}

fn attn(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = experiment_tasks(ctx, Command::Attn)?;
    let p = attention_profile(&ctx.weights, &ctx.vocab, &tasks, &edges(ctx))?;
    write(&ctx.out, "attention.csv", &p.to_csv())?;
    write_json(&ctx.out, "attention.json", &p)?;
    let (l, h) = p.argmax();
    println!("{} tasks, most attentive head L{l}H{h}", tasks.len());
    Ok(())
}

fn probe(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = experiment_tasks(ctx, Command::Probe)?;
    let layers = ctx
        .cfg
        .experiment
        .layers
        .clone()
        .unwrap_or_else(|| vec![ctx.spec.counter_layer]);
    let mut csv = String::from(
        "task,position,token,partition,items_so_far,partition_size,decoded,p_partition_size,p_items_so_far\n",
    );
    let mut rows = 0;
    for (k, task) in tasks.iter().enumerate() {
        for r in countscope_scan(&ctx.weights, &ctx.vocab, task, &layers)? {
            let token = if r.token == "," { "\",\"".to_string() } else { r.token.clone() };
            csv.push_str(&format!(
                "{k},{},{token},{},{},{},{},{},{}\n",
                r.position,
                r.partition,
                r.items_so_far,
                r.partition_size,
                r.decoded,
                r.p_partition_size,
                r.p_items_so_far
            ));
            rows += 1;
        }
    }
    write(&ctx.out, "probe.csv", &csv)?;
    println!("{} tasks, {rows} probed positions, layers {layers:?}", tasks.len());
    Ok(())
}

fn ablate(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = experiment_tasks(ctx, Command::Ablate)?;
    let role = ctx.cfg.experiment.role;
    let tables = tasks
        .par_iter()
        .map(|t| zero_ablation_experiment(&ctx.weights, &ctx.vocab, t, role))
        .collect::<countlab::Result<Vec<_>>>()?;
    let mut csv = String::new();
    let mut drops = Vec::new();
    for (k, t) in tables.iter().enumerate() {
        csv.push_str(&prefix_csv(&t.to_csv(), "task", &k.to_string(), k == 0));
        drops.extend(t.rows.iter().map(|r| r.drop));
    }
    write(&ctx.out, "ablation.csv", &csv)?;
    let mean = drops.iter().sum::<f64>() / drops.len().max(1) as f64;
    println!("{} tasks, role {role:?}, mean drop {mean:.4}", tasks.len());
    Ok(())
}

fn knockout(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = experiment_tasks(ctx, Command::Knockout)?;
    let sel = edges(ctx);
    let tables = tasks
        .iter()
        .map(|t| knockout_sweep(&ctx.weights, &ctx.vocab, t, &sel))
        .collect::<countlab::Result<Vec<_>>>()?;
    let mean = DropTable::mean(&tables)?;
    write(&ctx.out, "knockout.csv", &mean.to_csv())?;
    write_json(&ctx.out, "knockout.json", &mean)?;
    if let Some(best) = mean.argmax() {
        println!("{} tasks, largest drop {:.4} at {}", tasks.len(), best.drop, best.label);
    }
    Ok(())
}

#[derive(Serialize)]
struct XpatchOutput {
    fixture: CrossPatchReport,
    random: Vec<CrossPatchReport>,
    random_exact: usize,
}

fn xpatch(ctx: &Ctx) -> anyhow::Result<()> {
    let e = &ctx.cfg.experiment;
    let layers = e
        .layers
        .clone()
        .unwrap_or_else(|| (ctx.spec.transfer_layer..ctx.spec.aggregate_layer).collect());
    let mode = Mode::new(Structure::Structured, Steps::With);
    let item = &ctx.cfg.tasks.item;
    let a = CountingTask::with_sizes(item, e.pair.0.clone(), mode)?;
    let b = CountingTask::with_sizes(item, e.pair.1.clone(), mode)?;
    let fixture = cross_context_patch(&ctx.weights, &ctx.vocab, &a, &b, e.step, &layers)?;

    let mut random = Vec::new();
    let mut exact = 0;
    if e.random_pairs > 0 {
        let seed = ctx.cfg.require_seed("xpatch")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = ctx.cfg.tasks.size_range;
        for k in 0..e.random_pairs {
            let it = ITEMS[k % ITEMS.len()];
            let draw = |rng: &mut ChaCha8Rng| {
                let total = rng.gen_range(2 * lo..=6 * hi);
                CountingTask::structured(it, total, (lo, hi), Steps::With, rng.gen())
            };
            let (ta, tb) = (draw(&mut rng)?, draw(&mut rng)?);
            let steps = ta.partition_sizes.len().min(tb.partition_sizes.len());
            let step = rng.gen_range(1..=steps);
            let r = cross_context_patch(&ctx.weights, &ctx.vocab, &ta, &tb, step, &layers)?;
            let (sa, sb) = (ta.partition_sizes[step - 1], tb.partition_sizes[step - 1]);
            let want = ((ta.total - sa + sb) as u64, (tb.total - sb + sa) as u64);
            exact += usize::from(r.new_totals == want);
            random.push(r);
        }
    }
    let mut csv = String::from("pair,step,old_a,old_b,new_a,new_b\n");
    for (k, r) in std::iter::once(&fixture).chain(&random).enumerate() {
        csv.push_str(&format!(
            "{k},{},{},{},{},{}\n",
            r.step, r.old_totals.0, r.old_totals.1, r.new_totals.0, r.new_totals.1
        ));
    }
    write(&ctx.out, "xpatch.csv", &csv)?;
    println!(
        "{:?} vs {:?}, step {}: totals {:?} -> {:?}",
        e.pair.0, e.pair.1, e.step, fixture.old_totals, fixture.new_totals
    );
    if !random.is_empty() {
        println!("random pairs with exact substitution: {exact}/{}", random.len());
    }
    write_json(
        &ctx.out,
        "xpatch.json",
        &XpatchOutput {
            fixture,
            random,
            random_exact: exact,
        },
    )
}

fn layers(ctx: &Ctx) -> anyhow::Result<()> {
    let tasks = experiment_tasks(ctx, Command::Layers)?;
    let role = ctx.cfg.experiment.role;
    let curves = tasks
        .par_iter()
        .map(|t| layer_localization(&ctx.weights, &ctx.vocab, t, role))
        .collect::<countlab::Result<Vec<_>>>()?;
    let n = curves.len() as f64;
    let avg = |f: fn(&LayerCurves) -> &Vec<f64>| -> Vec<f64> {
        (0..f(&curves[0]).len())
            .map(|l| curves.iter().map(|c| f(c)[l]).sum::<f64>() / n)
            .collect()
    };
    let mean = LayerCurves {
        clean: curves.iter().map(|c| c.clean).sum::<f64>() / n,
        all_masked: curves.iter().map(|c| c.all_masked).sum::<f64>() / n,
        masking: avg(|c| &c.masking),
        unmasking: avg(|c| &c.unmasking),
        recovery: avg(|c| &c.recovery),
    };
    write(&ctx.out, "layers.csv", &mean.to_csv())?;
    write_json(&ctx.out, "layers.json", &mean)?;
    let (best, rec) = mean
        .recovery
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (l, &r)| if r > b.1 { (l, r) } else { b });
    println!("{} tasks, role {role:?}: layer {best} recovers {:.1}%", tasks.len(), 100.0 * rec);
    Ok(())
}
