//! Generator stages: transcript-and-prompt pretraining of the velocity
//! trunk, then condition-branch tuning with the duration predictor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::derive_seed;
use super::io::{fmt4, read_json, write_json, write_run_record, RunLayout, Split, Table};
use super::synth::{Dataset, Item, FEATURE_DIM, VISUAL_CHANNELS};
use crate::conditions::{
    dropout_conditions, ConclusionConditions, ConditionEncoder, DubbingConditions, EncoderSpec, SpeechPrompt,
};
use crate::duration::DurationPredictor;
use crate::error::{DubError, Result};
use crate::flow::{
    cfm_loss_grad_with_draws, cfm_loss_with_draws, stage2_loss_with_draws, CfmDraw, FeatureSeq, Stage2Draw,
    Stage2Example, TrainableVelocity,
};
use crate::optim::Adam;
use crate::velocity::ConditionalVelocity;

pub const PRETRAIN_CHECKPOINT: &str = "generator_pretrain";
pub const TUNE_CHECKPOINT: &str = "generator_tune";
pub const DURATION_CHECKPOINT: &str = "duration";

pub fn encoder_spec(cfg: &RunConfig, vocab_size: usize) -> EncoderSpec {
    EncoderSpec {
        visual_channels: VISUAL_CHANNELS,
        visual_dim: cfg.model.visual_dim,
        label_dim: cfg.model.label_dim,
        vocab_size,
        token_dim: cfg.model.token_dim,
        feature_dim: FEATURE_DIM,
        seed: derive_seed(cfg.seed, "encoder"),
    }
}

pub fn speech_prompt(item: &Item) -> SpeechPrompt {
    SpeechPrompt {
        features: item.target.clone(),
        transcript: item.tokens.clone(),
    }
}

/// Training items grouped by speaker.
pub fn speaker_pool(ds: &Dataset) -> BTreeMap<String, Vec<usize>> {
    let mut pool: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in ds.indices(Split::Train) {
        pool.entry(ds.items[i].record.speaker.clone()).or_default().push(i);
    }
    pool
}

/// Another training utterance of the same speaker, or the item itself when
/// the speaker has no other.
pub fn same_speaker_prompt<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &BTreeMap<String, Vec<usize>>,
    idx: usize,
    rng: &mut R,
) -> usize {
    let others: Vec<usize> = pool
        .get(&ds.items[idx].record.speaker)
        .map(|v| v.iter().copied().filter(|&j| j != idx).collect())
        .unwrap_or_default();
    if others.is_empty() {
        idx
    } else {
        others[rng.gen_range(0..others.len())]
    }
}

/// Training prompt: the target itself with probability `self_p`, otherwise
/// another utterance of the same speaker.
fn training_prompt<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &BTreeMap<String, Vec<usize>>,
    idx: usize,
    self_p: f64,
    rng: &mut R,
) -> usize {
    let u: f64 = rng.gen();
    let other = same_speaker_prompt(ds, pool, idx, rng);
    if u < self_p {
        idx
    } else {
        other
    }
}

/// A training utterance from a different speaker.
pub fn other_speaker_prompt<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &BTreeMap<String, Vec<usize>>,
    idx: usize,
    rng: &mut R,
) -> Result<usize> {
    let own = &ds.items[idx].record.speaker;
    let others: Vec<usize> = pool
        .iter()
        .filter(|(s, _)| *s != own)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    if others.is_empty() {
        return Err(DubError::InvalidArgument("no other speaker in the training split".into()));
    }
    Ok(others[rng.gen_range(0..others.len())])
}

fn pretrain_conds(ds: &Dataset, idx: usize, prompt: usize) -> DubbingConditions {
    DubbingConditions {
        visual: None,
        conclusion: None,
        transcript: Some(ds.items[idx].tokens.clone()),
        prompt: Some(speech_prompt(&ds.items[prompt])),
    }
}

/// Full gold conditions for an item with the given prompt utterance.
pub fn full_conds(ds: &Dataset, idx: usize, prompt: usize) -> DubbingConditions {
    let item = &ds.items[idx];
    DubbingConditions {
        visual: Some(item.visual.clone()),
        conclusion: Some(ConclusionConditions(item.record.conclusion())),
        transcript: Some(item.tokens.clone()),
        prompt: Some(speech_prompt(&ds.items[prompt])),
    }
}

fn train_indices(ds: &Dataset) -> Result<Vec<usize>> {
    let idx = ds.indices(Split::Train);
    if idx.is_empty() {
        return Err(DubError::InvalidArgument("training split is empty".into()));
    }
    Ok(idx)
}

/// Fixed monitoring batch: validation items (training items when there are
/// none) with frozen noise.
fn monitor_set(ds: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<CfmDraw>)> {
    let mut idx = ds.indices(Split::Val);
    if idx.is_empty() {
        idx = train_indices(ds)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = idx
        .iter()
        .map(|&i| CfmDraw::sample(ds.items[i].target.frames.dim(), &mut rng))
        .collect();
    Ok((idx, draws))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfmOutcome {
    pub model: ConditionalVelocity,
    /// (step, monitored loss) pairs, starting at step 0.
    pub curve: Vec<(usize, f64)>,
}

pub fn run_stage_cfm(cfg: &RunConfig, layout: &RunLayout) -> Result<CfmOutcome> {
    cfg.validate()?;
    let ds = Dataset::load(layout)?;
    let train = train_indices(&ds)?;
    let pool = speaker_pool(&ds);
    let encoder = ConditionEncoder::new(encoder_spec(cfg, ds.lexicon.len()));
    let mut model = ConditionalVelocity::new(FEATURE_DIM, cfg.model.knots, encoder)?;
    let mask = model.trunk_mask();
    let mut opt = Adam::new(model.params().len(), cfg.cfm.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cfm"));
    let sigma = cfg.cfm.sigma_min;

    let (mon_idx, mon_draws) = monitor_set(&ds, derive_seed(cfg.seed, "cfm-monitor"))?;
    let mon_x1: Vec<FeatureSeq> = mon_idx.iter().map(|&i| ds.items[i].target.clone()).collect();
    let mon_conds: Vec<DubbingConditions> = mon_idx.iter().map(|&i| pretrain_conds(&ds, i, i)).collect();

    let mut table = Table::new(&["step", "train_loss", "monitor_loss"]);
    let mut curve = Vec::new();
    let mut last_train = f64::NAN;
    for step in 0..=cfg.cfm.steps {
        if step % cfg.cfm.log_every == 0 || step == cfg.cfm.steps {
            let m = cfm_loss_with_draws(&model, &mon_x1, &mon_conds, &mon_draws, sigma)?;
            curve.push((step, m));
            table.push(vec![step.to_string(), fmt4(last_train), fmt4(m)])?;
        }
        if step == cfg.cfm.steps {
            break;
        }
        let mut x1 = Vec::with_capacity(cfg.cfm.batch_size);
        let mut conds = Vec::with_capacity(cfg.cfm.batch_size);
        let mut draws = Vec::with_capacity(cfg.cfm.batch_size);
        for _ in 0..cfg.cfm.batch_size {
            let i = train[rng.gen_range(0..train.len())];
            let p = training_prompt(&ds, &pool, i, cfg.cfm.self_prompt_p, &mut rng);
            let c = dropout_conditions(&pretrain_conds(&ds, i, p), cfg.cfm.dropout_p, &mut rng)?;
            draws.push(CfmDraw::sample(ds.items[i].target.frames.dim(), &mut rng));
            x1.push(ds.items[i].target.clone());
            conds.push(c);
        }
        let mut grad = vec![0.0; model.params().len()];
        last_train = cfm_loss_grad_with_draws(&model, &x1, &conds, &draws, sigma, &mut grad)?;
        opt.step(model.params_mut(), &grad, Some(&mask))?;
    }

    let ckpt = layout.checkpoint(PRETRAIN_CHECKPOINT);
    write_json(&ckpt, &model)?;
    table.write(&layout.report("cfm_curve"))?;
    write_run_record(
        layout,
        "train-cfm",
        &cfg.to_toml()?,
        cfg.seed,
        &[layout.manifest()],
        &[ckpt, layout.report("cfm_curve")],
    )?;
    Ok(CfmOutcome { model, curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub model: ConditionalVelocity,
    pub duration: DurationPredictor,
    /// Held-out mean absolute duration error of the predictor (seconds).
    pub duration_mae: f64,
    /// Same error for always predicting the mean training duration.
    pub baseline_mae: f64,
}

pub fn load_generator(layout: &RunLayout, name: &str) -> Result<ConditionalVelocity> {
    read_json(&layout.checkpoint(name))
}

pub fn load_duration(layout: &RunLayout) -> Result<DurationPredictor> {
    read_json(&layout.checkpoint(DURATION_CHECKPOINT))
}

fn duration_errors(ds: &Dataset, predictor: &DurationPredictor) -> Result<(f64, f64)> {
    let train = train_indices(ds)?;
    let mean_dur = train.iter().map(|&i| ds.items[i].record.duration_s).sum::<f64>() / train.len() as f64;
    let mut test = ds.indices(Split::Test);
    if test.is_empty() {
        test = train;
    }
    let mut mae = 0.0;
    let mut base = 0.0;
    for &i in &test {
        let it = &ds.items[i];
        let conclusion = ConclusionConditions(it.record.conclusion());
        let pred = predictor.predict_seconds(&it.visual, Some(&conclusion))?;
        mae += (pred - it.record.duration_s).abs();
        base += (mean_dur - it.record.duration_s).abs();
    }
    let n = test.len() as f64;
    Ok((mae / n, base / n))
}

pub fn run_stage_tune(cfg: &RunConfig, layout: &RunLayout) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut model = load_generator(layout, PRETRAIN_CHECKPOINT)?;
    let ds = Dataset::load(layout)?;
    let train = train_indices(&ds)?;
    let pool = speaker_pool(&ds);
    model.reset_branch();
    let mask = model.branch_mask();
    let mut opt = Adam::new(model.params().len(), cfg.tune.lr);
    let mut predictor = DurationPredictor::new(VISUAL_CHANNELS);
    let mut dur_opt = Adam::new(predictor.weights.len(), cfg.tune.duration_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tune"));
    let sigma = cfg.cfm.sigma_min;

    let mut table = Table::new(&["step", "total", "cfm", "duration"]);
    for step in 0..cfg.tune.steps {
        let mut batch = Vec::with_capacity(cfg.tune.batch_size);
        let mut draws = Vec::with_capacity(cfg.tune.batch_size);
        for _ in 0..cfg.tune.batch_size {
            let i = train[rng.gen_range(0..train.len())];
            let p = training_prompt(&ds, &pool, i, cfg.tune.self_prompt_p, &mut rng);
            let ex = Stage2Example {
                target: ds.items[i].target.clone(),
                conds: full_conds(&ds, i, p),
                true_duration_s: ds.items[i].record.duration_s,
            };
            draws.push(Stage2Draw::sample(&ex, cfg.tune.dropout_p, &mut rng)?);
            batch.push(ex);
        }
        let mut g_model = vec![0.0; model.params().len()];
        let mut g_dur = vec![0.0; predictor.weights.len()];
        let loss = stage2_loss_with_draws(&model, &predictor, &batch, &draws, sigma, Some((&mut g_model, &mut g_dur)))?;
        opt.step(model.params_mut(), &g_model, Some(&mask))?;
        dur_opt.step(&mut predictor.weights, &g_dur, None)?;
        if step % cfg.tune.log_every == 0 || step + 1 == cfg.tune.steps {
            table.push(vec![step.to_string(), fmt4(loss.total), fmt4(loss.cfm), fmt4(loss.duration)])?;
        }
    }
    let (duration_mae, baseline_mae) = duration_errors(&ds, &predictor)?;
    let mut report = Table::new(&["duration_mae_s", "mean_baseline_mae_s"]);
    report.push(vec![fmt4(duration_mae), fmt4(baseline_mae)])?;

    let ckpt = layout.checkpoint(TUNE_CHECKPOINT);
    let dur_ckpt = layout.checkpoint(DURATION_CHECKPOINT);
    write_json(&ckpt, &model)?;
    write_json(&dur_ckpt, &predictor)?;
    table.write(&layout.report("tune_curve"))?;
    report.write(&layout.report("tune"))?;
    write_run_record(
        layout,
        "train-tune",
        &cfg.to_toml()?,
        cfg.seed,
        &[layout.manifest(), layout.checkpoint(PRETRAIN_CHECKPOINT)],
        &[ckpt, dur_ckpt, layout.report("tune_curve"), layout.report("tune")],
    )?;
    Ok(TuneOutcome {
        model,
        duration: predictor,
        duration_mae,
        baseline_mae,
    })
}
