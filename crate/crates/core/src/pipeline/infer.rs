//! End-to-end inference: policy, trace, conditions, duration, sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::derive_seed;
use super::io::{write_features, write_json, write_run_record, RunLayout, Split, Table};
use super::stage1::{load_policy, policy_query, response_text, MPO_CHECKPOINT, SFT_CHECKPOINT};
use super::stage2::{
    full_conds, load_duration, load_generator, other_speaker_prompt, same_speaker_prompt, speaker_pool,
    TUNE_CHECKPOINT,
};
use super::synth::{cluster_mean, Dataset, ATTR_DIMS};
use crate::conditions::ConclusionConditions;
use crate::cot_trace::{extract_answer, parse_trace, Conclusion};
use crate::duration::DurationPredictor;
use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;
use crate::guidance::{integrate, predict_duration, GuidanceScales, OdeScheme, SamplerConfig};
use crate::policy::CategoricalPolicy;
use crate::velocity::ConditionalVelocity;

/// Prompt protocols: ground-truth utterance, or another utterance of the
/// same speaker.
pub const SETTINGS: [&str; 2] = ["dub1", "dub2"];

pub const INFER_HEADER: [&str; 10] = [
    "setting",
    "id",
    "trace_valid",
    "scene",
    "gender",
    "age",
    "emotion",
    "prompt_source",
    "prompt_id",
    "frames",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    GroundTruth,
    SameSpeaker,
    RandomSpeaker,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::GroundTruth => "ground_truth",
            PromptSource::SameSpeaker => "same_speaker",
            PromptSource::RandomSpeaker => "random_speaker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRow {
    pub setting: String,
    pub id: String,
    pub trace_valid: bool,
    pub conclusion: Option<Conclusion>,
    pub prompt_source: PromptSource,
    pub prompt_id: String,
    pub frames: usize,
}

impl InferRow {
    fn cells(&self) -> Vec<String> {
        let label = |f: &dyn Fn(&Conclusion) -> String| self.conclusion.as_ref().map(f).unwrap_or_else(|| "-".into());
        vec![
            self.setting.clone(),
            self.id.clone(),
            self.trace_valid.to_string(),
            label(&|c| c.scene.to_string()),
            label(&|c| c.attributes.gender.to_string()),
            label(&|c| c.attributes.age.to_string()),
            label(&|c| c.attributes.emotion.to_string()),
            self.prompt_source.as_str().into(),
            self.prompt_id.clone(),
            self.frames.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SamplerManifest {
    scales: GuidanceScales,
    steps: usize,
    scheme: OdeScheme,
    seed: u64,
    policy_checkpoint: String,
}

/// The MPO policy when present, otherwise the SFT one.
pub fn load_best_policy(layout: &RunLayout) -> Result<(CategoricalPolicy, &'static str)> {
    if layout.checkpoint(MPO_CHECKPOINT).exists() {
        Ok((load_policy(layout, MPO_CHECKPOINT)?, MPO_CHECKPOINT))
    } else {
        Ok((load_policy(layout, SFT_CHECKPOINT)?, SFT_CHECKPOINT))
    }
}

/// Policy decisions rendered to a trace and validated; `None` when the
/// trace does not parse.
pub fn reason(policy: &CategoricalPolicy, ds: &Dataset, idx: usize, seed: u64) -> Result<Option<Conclusion>> {
    let q = policy_query(&ds.items[idx]);
    let d = policy.greedy(&q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = response_text(&d, &q, &mut rng)?;
    Ok(parse_trace(&text).ok().map(|t| extract_answer(&t)))
}

/// Samples speech features for item `idx` with the given conclusion and
/// prompt utterance.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &ConditionalVelocity,
    predictor: &DurationPredictor,
    ds: &Dataset,
    idx: usize,
    conclusion: Option<Conclusion>,
    prompt_idx: usize,
    scales: &GuidanceScales,
    sampler: &SamplerConfig,
    frames: Option<usize>,
) -> Result<FeatureSeq> {
    let mut conds = full_conds(ds, idx, prompt_idx);
    conds.conclusion = conclusion.map(ConclusionConditions);
    let item = &ds.items[idx];
    let n = match frames {
        Some(n) => n,
        None => predict_duration(predictor, &item.visual, conds.conclusion.as_ref(), sampler.frame_hop)?,
    };
    integrate(model, &conds, n, scales, sampler)
}

fn select_items(ds: &Dataset, ids: Option<&[String]>) -> Result<Vec<usize>> {
    match ids {
        None => Ok(ds.indices(Split::Test)),
        Some(ids) => ids
            .iter()
            .map(|id| ds.find(id).ok_or_else(|| DubError::Missing(format!("item {id} is not in the manifest"))))
            .collect(),
    }
}

pub fn run_infer(cfg: &RunConfig, layout: &RunLayout, ids: Option<&[String]>) -> Result<Vec<InferRow>> {
    cfg.validate()?;
    let ds = Dataset::load(layout)?;
    let (policy, policy_name) = load_best_policy(layout)?;
    let model = load_generator(layout, TUNE_CHECKPOINT)?;
    let predictor = load_duration(layout)?;
    let pool = speaker_pool(&ds);
    let items = select_items(&ds, ids)?;
    if cfg.infer.scales.has_negative() {
        eprintln!("warning: negative guidance scale {:?}", cfg.infer.scales);
    }

    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for setting in SETTINGS {
        for &idx in &items {
            let id = &ds.items[idx].record.id;
            let gold = ds.items[idx].record.conclusion();
            let conclusion = reason(&policy, &ds, idx, derive_seed(cfg.seed, &format!("trace/{id}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("prompt/{setting}/{id}")));
            let scene_right = conclusion.is_some_and(|c| c.scene == gold.scene);
            let (source, prompt_idx) = if !scene_right {
                (PromptSource::RandomSpeaker, other_speaker_prompt(&ds, &pool, idx, &mut rng)?)
            } else if setting == "dub1" {
                (PromptSource::GroundTruth, idx)
            } else {
                (PromptSource::SameSpeaker, same_speaker_prompt(&ds, &pool, idx, &mut rng))
            };
            let sampler = SamplerConfig {
                steps: cfg.infer.steps,
                scheme: cfg.infer.scheme,
                seed: derive_seed(cfg.seed, &format!("noise/{id}")),
                frame_hop: cfg.data.frame_hop,
            };
            let out = generate(&model, &predictor, &ds, idx, conclusion, prompt_idx, &cfg.infer.scales, &sampler, None)?;
            let path = layout.generated(setting).join(format!("{id}.tsv"));
            write_features(&path, &out)?;
            outputs.push(path);
            rows.push(InferRow {
                setting: setting.into(),
                id: id.clone(),
                trace_valid: conclusion.is_some(),
                conclusion,
                prompt_source: source,
                prompt_id: ds.items[prompt_idx].record.id.clone(),
                frames: out.num_frames(),
            });
        }
    }

    let mut table = Table::new(&INFER_HEADER);
    for r in &rows {
        table.push(r.cells())?;
    }
    table.write(&layout.report("infer"))?;
    let sampler_path = layout.root.join("generated").join("sampler.json");
    write_json(
        &sampler_path,
        &SamplerManifest {
            scales: cfg.infer.scales,
            steps: cfg.infer.steps,
            scheme: cfg.infer.scheme,
            seed: cfg.seed,
            policy_checkpoint: policy_name.into(),
        },
    )?;
    outputs.push(layout.report("infer"));
    outputs.push(sampler_path);
    write_run_record(
        layout,
        "infer",
        &cfg.to_toml()?,
        cfg.seed,
        &[
            layout.manifest(),
            layout.checkpoint(policy_name),
            layout.checkpoint(TUNE_CHECKPOINT),
            layout.checkpoint(super::stage2::DURATION_CHECKPOINT),
        ],
        &outputs,
    )?;
    Ok(rows)
}

/// One point of a conclusion-guidance sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub lambda_c: f64,
    /// Mean distance between the generated attribute mean and the gold
    /// label-cluster mean.
    pub distance: f64,
    /// Mean displacement from the `λ_C = 0` output along the direction of
    /// the gold cluster mean, in units of that initial gap.
    pub projection: f64,
}

fn attr_mean(f: &FeatureSeq) -> Vec<f64> {
    f.frame_mean()[..ATTR_DIMS].to_vec()
}

/// Sweeps `λ_C` with `λ_V = λ_T = 1` over held-out items, conditioning on
/// the gold conclusion and a prompt from a different speaker. Frame
/// counts and noise are shared across the sweep.
pub fn guidance_sweep(cfg: &RunConfig, layout: &RunLayout, lambdas: &[f64], seed: u64) -> Result<Vec<SweepPoint>> {
    let ds = Dataset::load(layout)?;
    let model = load_generator(layout, TUNE_CHECKPOINT)?;
    let predictor = load_duration(layout)?;
    let pool = speaker_pool(&ds);
    let items = ds.indices(Split::Test);
    if items.is_empty() || lambdas.is_empty() {
        return Err(DubError::InvalidArgument("sweep needs held-out items and scales".into()));
    }
    // means[item][lambda]
    let mut means = Vec::with_capacity(items.len());
    let mut golds = Vec::with_capacity(items.len());
    for &idx in &items {
        let item = &ds.items[idx];
        let id = &item.record.id;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("sweep-prompt/{id}")));
        let prompt = other_speaker_prompt(&ds, &pool, idx, &mut rng)?;
        let sampler = SamplerConfig {
            steps: cfg.infer.steps,
            scheme: cfg.infer.scheme,
            seed: derive_seed(seed, &format!("sweep-noise/{id}")),
            frame_hop: cfg.data.frame_hop,
        };
        let gold = item.record.conclusion();
        let mut per = Vec::with_capacity(lambdas.len());
        for &l in lambdas {
            let scales = GuidanceScales {
                lambda_v: 1.0,
                lambda_c: l,
                lambda_t: 1.0,
            };
            let out = generate(
                &model,
                &predictor,
                &ds,
                idx,
                Some(gold),
                prompt,
                &scales,
                &sampler,
                Some(item.target.num_frames()),
            )?;
            per.push(attr_mean(&out));
        }
        means.push(per);
        golds.push(cluster_mean(&gold, item.tokens.tokens.len()).to_vec());
    }
    let n = items.len() as f64;
    Ok(lambdas
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let mut distance = 0.0;
            let mut projection = 0.0;
            for (per, gold) in means.iter().zip(&golds) {
                let m = &per[k];
                distance += m.iter().zip(gold).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / n;
                let dir: Vec<f64> = gold.iter().zip(&per[0]).map(|(g, b)| g - b).collect();
                let norm2: f64 = dir.iter().map(|d| d * d).sum();
                if norm2 > 0.0 {
                    let disp: f64 = m.iter().zip(&per[0]).zip(&dir).map(|((a, b), d)| (a - b) * d).sum();
                    projection += disp / norm2 / n;
                }
            }
            SweepPoint {
                lambda_c: l,
                distance,
                projection,
            }
        })
        .collect())
}
