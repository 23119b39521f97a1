//! Objective evaluation of generated features against the references.

use super::config::RunConfig;
use super::infer::SETTINGS;
use super::io::{fmt4, read_features, write_run_record, RunLayout, Split, Table};
use super::synth::{Dataset, Lexicon, ATTR_DIMS};
use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;
use crate::metrics::{cepstra_from_log_features, cosine_sim, mcd, mcd_sl, wer};

pub const EVAL_HEADER: [&str; 8] = [
    "setting",
    "n_items",
    "SPK-SIM(%)",
    "WER(%)",
    "EMO-SIM(%)",
    "MCD",
    "MCD-SL",
    "fallbacks",
];

/// Centering statistics and settings shared by every scored pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub speaker_center: Vec<f64>,
    pub emotion_center: Vec<f64>,
    pub cepstral_order: usize,
    pub lexicon: Lexicon,
}

/// Speaker embedding: frame mean of the attribute dimensions.
pub fn speaker_embedding(f: &FeatureSeq) -> Vec<f64> {
    f.frame_mean()[..ATTR_DIMS].to_vec()
}

/// Emotion embedding: frame standard deviation of the attribute dimensions.
pub fn emotion_embedding(f: &FeatureSeq) -> Vec<f64> {
    f.frame_std()[..ATTR_DIMS].to_vec()
}

fn centered(v: Vec<f64>, c: &[f64]) -> Vec<f64> {
    v.into_iter().zip(c).map(|(a, b)| a - b).collect()
}

impl EvalContext {
    /// Centers are the mean embeddings of the training references.
    pub fn from_dataset(ds: &Dataset, cepstral_order: usize) -> Result<Self> {
        let train = ds.split(Split::Train);
        if train.is_empty() {
            return Err(DubError::InvalidArgument("training split is empty".into()));
        }
        let n = train.len() as f64;
        let mut spk = vec![0.0; ATTR_DIMS];
        let mut emo = vec![0.0; ATTR_DIMS];
        for it in &train {
            for (a, b) in spk.iter_mut().zip(speaker_embedding(&it.target)) {
                *a += b / n;
            }
            for (a, b) in emo.iter_mut().zip(emotion_embedding(&it.target)) {
                *a += b / n;
            }
        }
        Ok(Self {
            speaker_center: spk,
            emotion_center: emo,
            cepstral_order,
            lexicon: ds.lexicon.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub spk_sim: f64,
    pub emo_sim: f64,
    pub wer: f64,
    pub mcd: f64,
    pub mcd_sl: f64,
}

pub fn score_pair(ctx: &EvalContext, reference: &FeatureSeq, generated: &FeatureSeq, transcript: &str) -> Result<PairScores> {
    let spk_sim = cosine_sim(
        &centered(speaker_embedding(generated), &ctx.speaker_center),
        &centered(speaker_embedding(reference), &ctx.speaker_center),
    )?;
    let emo_sim = cosine_sim(
        &centered(emotion_embedding(generated), &ctx.emotion_center),
        &centered(emotion_embedding(reference), &ctx.emotion_center),
    )?;
    let words: Vec<String> = transcript.split_whitespace().map(String::from).collect();
    let wer = wer(&words, &ctx.lexicon.decode(generated))?;
    let a = cepstra_from_log_features(&reference.frames, ctx.cepstral_order)?;
    let b = cepstra_from_log_features(&generated.frames, ctx.cepstral_order)?;
    Ok(PairScores {
        spk_sim,
        emo_sim,
        wer,
        mcd: mcd(&a, &b)?,
        mcd_sl: mcd_sl(&a, &b)?,
    })
}

pub fn run_eval(cfg: &RunConfig, layout: &RunLayout) -> Result<Table> {
    cfg.validate()?;
    let ds = Dataset::load(layout)?;
    let ctx = EvalContext::from_dataset(&ds, cfg.eval.cepstral_order)?;
    let infer = Table::read(&layout.report("infer"))?;
    let col = |name: &str| {
        infer
            .column(name)
            .ok_or_else(|| DubError::Parse(format!("infer report lacks column {name}")))
    };
    let settings = col("setting")?;
    let ids = col("id")?;
    let valid = col("trace_valid")?;

    let mut summary = Table::new(&EVAL_HEADER);
    let mut per_item = Table::new(&["setting", "id", "SPK-SIM", "WER", "EMO-SIM", "MCD", "MCD-SL"]);
    let mut inputs = vec![layout.manifest(), layout.report("infer")];
    for setting in SETTINGS {
        let mut sums = [0.0; 5];
        let mut n = 0usize;
        let mut fallbacks = 0usize;
        for r in 0..settings.len() {
            if settings[r] != setting {
                continue;
            }
            let idx = ds
                .find(ids[r])
                .ok_or_else(|| DubError::Missing(format!("item {} is not in the manifest", ids[r])))?;
            let item = &ds.items[idx];
            let gen_path = layout.generated(setting).join(format!("{}.tsv", ids[r]));
            let generated = read_features(&gen_path)?;
            inputs.push(gen_path);
            let s = score_pair(&ctx, &item.target, &generated, &item.record.transcript)?;
            for (acc, v) in sums.iter_mut().zip([s.spk_sim, s.wer, s.emo_sim, s.mcd, s.mcd_sl]) {
                *acc += v;
            }
            per_item.push(vec![
                setting.into(),
                ids[r].into(),
                fmt4(s.spk_sim),
                fmt4(s.wer),
                fmt4(s.emo_sim),
                fmt4(s.mcd),
                fmt4(s.mcd_sl),
            ])?;
            n += 1;
            if valid[r] != "true" {
                fallbacks += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let m = sums.map(|v| v / n as f64);
        summary.push(vec![
            setting.into(),
            n.to_string(),
            format!("{:.2}", 100.0 * m[0]),
            format!("{:.2}", 100.0 * m[1]),
            format!("{:.2}", 100.0 * m[2]),
            fmt4(m[3]),
            fmt4(m[4]),
            fallbacks.to_string(),
        ])?;
    }
    if summary.rows.is_empty() {
        return Err(DubError::Missing("no generated outputs to evaluate".into()));
    }
    summary.write(&layout.report("eval"))?;
    per_item.write(&layout.report("eval_items"))?;
    write_run_record(
        layout,
        "eval",
        &cfg.to_toml()?,
        cfg.seed,
        &inputs,
        &[layout.report("eval"), layout.report("eval_items")],
    )?;
    Ok(summary)
}
