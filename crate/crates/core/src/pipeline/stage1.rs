//! Reasoning stages: supervised fine-tuning and mixed preference
//! optimization of the categorical policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::io::{read_json, read_jsonl, write_json, write_run_record, fmt4, RunLayout, Split, Table};
use super::synth::{reasoning_trace, visual_summary, Dataset, Item, TraceRecord};
use super::derive_seed;
use crate::cot_trace::{mutate_trace, render_trace, validate_format, Conclusion, Mutation, SceneType};
use crate::error::{DubError, Result};
use crate::policy::{CategoricalPolicy, Decisions};
use crate::preference::{mpo_step, sft_step, MpoItem, PolicyEvaluator, PreferenceSample};
use crate::reward::score_trace;

pub const SFT_CHECKPOINT: &str = "policy_sft";
pub const MPO_CHECKPOINT: &str = "policy_mpo";

/// Policy input: a bias followed by the pooled visual channels.
pub fn policy_query(item: &Item) -> Vec<f64> {
    let mut q = vec![1.0];
    q.extend(item.visual.pooled());
    q
}

/// Text the policy emits for a set of decisions. Ill-formed decisions
/// yield a randomly corrupted trace.
pub fn response_text<R: Rng + ?Sized>(d: &Decisions, query: &[f64], rng: &mut R) -> Result<String> {
    let (people, talking) = visual_summary(&query[1..]);
    let trace = reasoning_trace(people, talking, d.conclusion);
    if d.well_formed {
        render_trace(&trace)
    } else {
        let m = Mutation::ALL[rng.gen_range(0..Mutation::ALL.len())];
        mutate_trace(&trace, m, rng)
    }
}

/// Held-out scores in the layout of the reasoning-accuracy table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyScores {
    pub accuracy: f64,
    /// Recall on dialogue, monologue, narration.
    pub recall: [f64; 3],
    pub format_valid: f64,
}

impl PolicyScores {
    pub fn mean_recall(&self) -> f64 {
        self.recall.iter().sum::<f64>() / 3.0
    }
}

pub const POLICY_REPORT_HEADER: [&str; 7] = [
    "stage",
    "Ave.Acc",
    "Ave.Recall",
    "A.Recall",
    "B.Recall",
    "C.Recall",
    "FormatValid",
];

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn score_row(stage: &str, s: &PolicyScores) -> Vec<String> {
    vec![
        stage.into(),
        pct(s.accuracy),
        pct(s.mean_recall()),
        pct(s.recall[0]),
        pct(s.recall[1]),
        pct(s.recall[2]),
        pct(s.format_valid),
    ]
}

/// Greedy scene accuracy and per-class recall, plus the format-validity
/// rate of `samples` sampled traces per item (seeded by `seed`).
pub fn evaluate_policy(policy: &CategoricalPolicy, items: &[&Item], samples: usize, seed: u64) -> Result<PolicyScores> {
    if items.is_empty() {
        return Err(DubError::InvalidArgument("no held-out items to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    let mut valid = 0usize;
    for item in items {
        let q = policy_query(item);
        let gold = item.record.scene.index();
        let pred = policy.greedy(&q)?.conclusion.scene.index();
        totals[gold] += 1;
        if pred == gold {
            correct += 1;
            hits[gold] += 1;
        }
        for _ in 0..samples {
            let d = policy.sample(&q, &mut rng)?;
            if validate_format(&response_text(&d, &q, &mut rng)?).0 {
                valid += 1;
            }
        }
    }
    let mut recall = [0.0; 3];
    for k in 0..3 {
        recall[k] = if totals[k] == 0 { 0.0 } else { hits[k] as f64 / totals[k] as f64 };
    }
    Ok(PolicyScores {
        accuracy: correct as f64 / items.len() as f64,
        recall,
        format_valid: valid as f64 / (items.len() * samples) as f64,
    })
}

fn held_out(ds: &Dataset) -> Vec<&Item> {
    ds.split(Split::Test)
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "policy-eval")
}

pub fn load_policy(layout: &RunLayout, name: &str) -> Result<CategoricalPolicy> {
    read_json(&layout.checkpoint(name))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub policy: CategoricalPolicy,
    pub scores: PolicyScores,
    pub final_loss: f64,
}

/// Trains on the trace corpus: gold conclusions, with the format head
/// supervised by whether each corpus trace is well formed.
pub fn run_stage_sft(cfg: &RunConfig, layout: &RunLayout) -> Result<SftOutcome> {
    cfg.validate()?;
    let ds = Dataset::load(layout)?;
    let traces: Vec<TraceRecord> = read_jsonl(&layout.traces())?;
    let mut targets = Vec::new();
    for item in ds.split(Split::Train) {
        let text = traces
            .iter()
            .find(|t| t.id == item.record.id)
            .ok_or_else(|| DubError::Missing(format!("trace for {}", item.record.id)))?;
        let d = Decisions {
            well_formed: validate_format(&text.text).0,
            conclusion: item.record.conclusion(),
        };
        targets.push((policy_query(item), d));
    }
    if targets.is_empty() {
        return Err(DubError::InvalidArgument("training split is empty".into()));
    }
    let mut policy = CategoricalPolicy::new(targets[0].0.len());
    let mut final_loss = f64::NAN;
    let mut curve = Table::new(&["step", "loss"]);
    for step in 0..cfg.sft.steps {
        final_loss = sft_step(&mut policy, &targets, cfg.sft.lr)?;
        curve.push(vec![step.to_string(), fmt4(final_loss)])?;
    }
    let scores = evaluate_policy(&policy, &held_out(&ds), cfg.mpo.validity_samples, eval_seed(cfg))?;
    let mut report = Table::new(&POLICY_REPORT_HEADER);
    report.push(score_row("sft", &scores))?;

    let ckpt = layout.checkpoint(SFT_CHECKPOINT);
    write_json(&ckpt, &policy)?;
    report.write(&layout.report("sft"))?;
    curve.write(&layout.report("sft_curve"))?;
    write_run_record(
        layout,
        "train-sft",
        &cfg.to_toml()?,
        cfg.seed,
        &[layout.manifest(), layout.traces()],
        &[ckpt, layout.report("sft"), layout.report("sft_curve")],
    )?;
    Ok(SftOutcome {
        policy,
        scores,
        final_loss,
    })
}

/// Rejected response for a pair: a reference sample, pushed off the gold
/// answer when it happens to match it.
fn rejected_for<R: Rng + ?Sized>(
    reference: &CategoricalPolicy,
    query: &[f64],
    gold: &Decisions,
    rng: &mut R,
) -> Result<Decisions> {
    let mut r = reference.sample(query, rng)?;
    if r == *gold {
        let shift = 1 + rng.gen_range(0..2);
        let scene = SceneType::ALL[(gold.conclusion.scene.index() + shift) % 3];
        r.conclusion = Conclusion {
            scene,
            ..gold.conclusion
        };
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpoOutcome {
    pub policy: CategoricalPolicy,
    pub sft_scores: PolicyScores,
    pub scores: PolicyScores,
}

pub fn run_stage_mpo(cfg: &RunConfig, layout: &RunLayout) -> Result<MpoOutcome> {
    cfg.validate()?;
    let reference = load_policy(layout, SFT_CHECKPOINT)?;
    let ds = Dataset::load(layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mpo"));
    let dpo = cfg.mpo.dpo();

    let mut pairs = Vec::new();
    for item in ds.split(Split::Train) {
        let q = policy_query(item);
        let chosen = Decisions {
            well_formed: true,
            conclusion: item.record.conclusion(),
        };
        let rejected = rejected_for(&reference, &q, &chosen, &mut rng)?;
        pairs.push((
            item.record.conclusion(),
            PreferenceSample {
                ref_chosen: reference.log_prob(&q, &chosen),
                ref_rejected: reference.log_prob(&q, &rejected),
                query: q,
                chosen,
                rejected,
            },
        ));
    }
    if pairs.is_empty() {
        return Err(DubError::InvalidArgument("training split is empty".into()));
    }

    let mut policy = reference.clone();
    let mut curve = Table::new(&["step", "total", "preference", "quality", "generation", "format", "outcome"]);
    for step in 0..cfg.mpo.steps {
        let mut batch = Vec::with_capacity(cfg.mpo.batch_size);
        for _ in 0..cfg.mpo.batch_size {
            let (gold, pair) = &pairs[rng.gen_range(0..pairs.len())];
            let rollout = policy.sample(&pair.query, &mut rng)?;
            let text = response_text(&rollout, &pair.query, &mut rng)?;
            batch.push(MpoItem {
                pair: pair.clone(),
                rollout,
                flags: score_trace(&text, gold),
            });
        }
        let rep = mpo_step(&mut policy, &batch, &dpo, &cfg.mpo.weights, cfg.mpo.lr)?;
        let c = rep.components;
        curve.push(vec![
            step.to_string(),
            fmt4(rep.total),
            fmt4(c.preference),
            fmt4(c.quality),
            fmt4(c.generation),
            fmt4(c.format),
            fmt4(c.outcome),
        ])?;
    }

    let held = held_out(&ds);
    let sft_scores = evaluate_policy(&reference, &held, cfg.mpo.validity_samples, eval_seed(cfg))?;
    let scores = evaluate_policy(&policy, &held, cfg.mpo.validity_samples, eval_seed(cfg))?;
    let mut report = Table::new(&POLICY_REPORT_HEADER);
    report.push(score_row("sft", &sft_scores))?;
    report.push(score_row("mpo", &scores))?;

    let ckpt = layout.checkpoint(MPO_CHECKPOINT);
    write_json(&ckpt, &policy)?;
    report.write(&layout.report("mpo"))?;
    curve.write(&layout.report("mpo_curve"))?;
    write_run_record(
        layout,
        "train-mpo",
        &cfg.to_toml()?,
        cfg.seed,
        &[layout.manifest(), layout.checkpoint(SFT_CHECKPOINT)],
        &[ckpt, layout.report("mpo"), layout.report("mpo_curve")],
    )?;
    Ok(MpoOutcome {
        policy,
        sft_scores,
        scores,
    })
}
