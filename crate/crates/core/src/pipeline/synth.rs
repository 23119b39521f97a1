//! Synthetic dubbing corpus.
//!
//! Every item is a toy "video" (a per-frame feature matrix with scene and
//! speaker information planted in known channels), a template transcript
//! and a target speech-feature sequence. The first six target dimensions
//! carry speaker attributes (mean set by gender, age, emotion and scene,
//! spread set by emotion); the last six carry the current word's code
//! vector, so a nearest-code decoder recovers the transcript.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::{
    read_features, read_json, read_manifest, read_visual, write_features, write_json, write_jsonl, write_visual,
    Level, ManifestRecord, RunLayout, Split,
};
use crate::conditions::{TokenSeq, VisualFeatureSeq};
use crate::cot_trace::{mutate_trace, render_trace, AgeBand, CoTTrace, Conclusion, Emotion, Gender, Mutation, SceneType};
use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;

pub const ATTR_DIMS: usize = 6;
pub const CONTENT_DIMS: usize = 6;
pub const FEATURE_DIM: usize = ATTR_DIMS + CONTENT_DIMS;
pub const VISUAL_CHANNELS: usize = 8;
pub const CONTENT_NOISE: f64 = 0.15;
const BASE_FRAMES_PER_WORD: f64 = 4.0;

/// Reference clip counts per level: (train, test); only the ratios are used.
const LEVEL1_COUNTS: (f64, f64) = (7276.0, 1100.0);
const LEVEL2_COUNTS: (f64, f64) = (3486.0, 388.0);
const VAL_FRACTION: f64 = 0.1;

const SUBJECTS: [&str; 4] = ["i", "you", "we", "they"];
const VERBS: [&str; 4] = ["see", "take", "need", "want"];
const OBJECTS: [&str; 4] = ["this", "that", "home", "light"];
const ADVERBS: [&str; 4] = ["now", "here", "again", "soon"];

pub const EMOTIONS: [Emotion; 6] = [
    Emotion::Neutral,
    Emotion::Happy,
    Emotion::Sad,
    Emotion::Angry,
    Emotion::Fearful,
    Emotion::Surprised,
];

/// Word list with one ±1 code vector per word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl Lexicon {
    /// Sixteen words coded by even-parity sign patterns, so any two codes
    /// differ in at least two coordinates.
    pub fn standard() -> Self {
        let words: Vec<String> = SUBJECTS
            .iter()
            .chain(&VERBS)
            .chain(&OBJECTS)
            .chain(&ADVERBS)
            .map(|w| w.to_string())
            .collect();
        let codes: Vec<Vec<f64>> = (0u32..64)
            .filter(|c| c.count_ones() % 2 == 0)
            .take(words.len())
            .map(|c| (0..CONTENT_DIMS).map(|b| if c >> b & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        Self { words, vectors: codes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| DubError::Parse(format!("word `{word}` is not in the lexicon")))
    }

    pub fn tokens(&self, text: &str) -> Result<TokenSeq> {
        let toks = text.split_whitespace().map(|w| self.token(w)).collect::<Result<Vec<_>>>()?;
        TokenSeq::new(toks, text)
    }

    /// Toy recognizer: nearest code per frame, then repeats collapsed.
    pub fn decode(&self, features: &FeatureSeq) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut last = usize::MAX;
        for row in features.frames.rows() {
            let content = row.iter().skip(ATTR_DIMS);
            let mut best = (f64::INFINITY, 0);
            for (k, v) in self.vectors.iter().enumerate() {
                let d: f64 = content.clone().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 != last {
                out.push(self.words[best.1].clone());
                last = best.1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub gender: Gender,
    pub age: AgeBand,
    pub offset: Vec<f64>,
}

fn gender_vec(g: Gender) -> [f64; ATTR_DIMS] {
    match g {
        Gender::Male => [0.8, 0.0, 0.0, 0.3, 0.0, 0.0],
        Gender::Female => [-0.8, 0.0, 0.0, -0.3, 0.0, 0.0],
        Gender::Unknown => [0.0; ATTR_DIMS],
    }
}

fn age_vec(a: AgeBand) -> [f64; ATTR_DIMS] {
    match a {
        AgeBand::Child => [0.0, -0.7, 0.3, 0.0, 0.0, 0.0],
        AgeBand::Elder => [0.0, 0.7, -0.3, 0.0, 0.0, 0.0],
        AgeBand::Adult | AgeBand::Unknown => [0.0; ATTR_DIMS],
    }
}

fn emotion_vec(e: Emotion) -> [f64; ATTR_DIMS] {
    match e {
        Emotion::Happy => [0.0, 0.0, 0.6, 0.0, 0.4, 0.0],
        Emotion::Sad => [0.0, 0.0, -0.6, 0.0, -0.3, 0.0],
        Emotion::Angry => [0.0, 0.0, 0.0, 0.7, 0.5, 0.0],
        Emotion::Fearful => [0.0, 0.0, -0.3, -0.5, 0.4, 0.0],
        Emotion::Surprised => [0.0, 0.0, 0.5, -0.4, -0.4, 0.0],
        Emotion::Neutral | Emotion::Unknown => [0.0; ATTR_DIMS],
    }
}

fn scene_vec(s: SceneType) -> [f64; ATTR_DIMS] {
    match s {
        SceneType::Dialogue => [0.0; ATTR_DIMS],
        SceneType::Monologue => [0.0, 0.0, 0.0, 0.0, 0.0, 0.2],
        SceneType::Narration => [0.0, 0.0, 0.0, 0.0, 0.0, -0.3],
    }
}

/// Per-frame spread of each attribute dimension.
pub fn emotion_spread(e: Emotion) -> [f64; ATTR_DIMS] {
    match e {
        Emotion::Neutral | Emotion::Unknown => [0.3; ATTR_DIMS],
        Emotion::Happy => [0.5, 0.3, 0.5, 0.3, 0.5, 0.3],
        Emotion::Sad => [0.2, 0.25, 0.15, 0.25, 0.2, 0.15],
        Emotion::Angry => [0.6, 0.6, 0.3, 0.3, 0.6, 0.6],
        Emotion::Fearful => [0.3, 0.5, 0.5, 0.3, 0.3, 0.5],
        Emotion::Surprised => [0.5, 0.3, 0.3, 0.6, 0.6, 0.3],
    }
}

fn speech_rate(a: AgeBand, e: Emotion) -> f64 {
    let age = match a {
        AgeBand::Child => 0.9,
        AgeBand::Elder => 1.25,
        _ => 1.0,
    };
    let emo = match e {
        Emotion::Sad => 1.2,
        Emotion::Angry => 0.85,
        Emotion::Happy => 0.95,
        Emotion::Fearful | Emotion::Surprised => 0.9,
        _ => 1.0,
    };
    age * emo
}

pub fn frames_per_word(a: AgeBand, e: Emotion) -> usize {
    ((BASE_FRAMES_PER_WORD * speech_rate(a, e)).round() as usize).max(2)
}

/// Mean of the attribute dimensions for a label set and transcript length,
/// before the speaker's own offset.
pub fn cluster_mean(c: &Conclusion, n_words: usize) -> [f64; ATTR_DIMS] {
    let mut m = [0.0; ATTR_DIMS];
    for v in [
        gender_vec(c.attributes.gender),
        age_vec(c.attributes.age),
        emotion_vec(c.attributes.emotion),
        scene_vec(c.scene),
    ] {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    m[ATTR_DIMS - 1] += 0.05 * (n_words as f64 - 4.0);
    m
}

fn people_count(s: SceneType) -> f64 {
    match s {
        SceneType::Dialogue => 2.0,
        SceneType::Monologue => 1.0,
        SceneType::Narration => 0.0,
    }
}

fn visual_means(c: &Conclusion) -> [f64; VISUAL_CHANNELS] {
    let (s0, s1) = match c.scene {
        SceneType::Dialogue => (1.5, 0.0),
        SceneType::Monologue => (-0.75, 1.3),
        SceneType::Narration => (-0.75, -1.3),
    };
    let talking = if c.scene == SceneType::Narration { 0.0 } else { 1.0 };
    let gender = match c.attributes.gender {
        Gender::Male => 1.0,
        Gender::Female => -1.0,
        Gender::Unknown => 0.0,
    };
    let age = match c.attributes.age {
        AgeBand::Child => -1.0,
        AgeBand::Elder => 1.0,
        _ => 0.0,
    };
    let k = EMOTIONS.iter().position(|e| *e == c.attributes.emotion).unwrap_or(0) as f64;
    let angle = 2.0 * std::f64::consts::PI * k / EMOTIONS.len() as f64;
    [people_count(c.scene), talking, s0, s1, gender, age, angle.cos(), angle.sin()]
}

/// The four-step reasoning trace for a clip summary and a conclusion.
pub fn reasoning_trace(people: usize, talking: bool, conclusion: Conclusion) -> CoTTrace {
    let a = conclusion.attributes;
    CoTTrace {
        summary: format!("Infer the scene type and speaker attributes for a clip with {people} visible people."),
        caption: format!(
            "The clip shows {people} people; the visible speaker is {}.",
            if talking { "talking" } else { "silent" }
        ),
        steps: [
            format!("Count the numbers of people: {people}."),
            format!("Check whether the visible speaker is talking: {}.", if talking { "yes" } else { "no" }),
            format!("Decide the scene type: {}.", conclusion.scene),
            format!("Infer the speaker's gender, age and emotion: {}, {}, {}.", a.gender, a.age, a.emotion),
        ],
        conclusion,
    }
}

/// People count and talking flag read off pooled visual features.
pub fn visual_summary(pooled: &[f64]) -> (usize, bool) {
    let people = pooled.first().copied().unwrap_or(0.0).round().clamp(0.0, 9.0) as usize;
    let talking = pooled.get(1).copied().unwrap_or(0.0) > 0.5;
    (people, talking)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub text: String,
}

fn sample_transcript<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut words = vec![
        *SUBJECTS.choose(rng).expect("non-empty"),
        *VERBS.choose(rng).expect("non-empty"),
        *OBJECTS.choose(rng).expect("non-empty"),
    ];
    let extra = rng.gen_range(0..=2);
    let mut adverbs = ADVERBS.to_vec();
    adverbs.shuffle(rng);
    words.extend(adverbs.into_iter().take(extra));
    words.join(" ")
}

fn make_speakers<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Speaker> {
    let genders = [Gender::Male, Gender::Female];
    let ages = [AgeBand::Child, AgeBand::Adult, AgeBand::Elder];
    let offset = Normal::new(0.0, 0.25).expect("valid normal");
    (0..n)
        .map(|k| Speaker {
            id: format!("spk{k:02}"),
            gender: genders[k % 2],
            age: ages[(k / 2) % 3],
            offset: (0..ATTR_DIMS).map(|_| offset.sample(rng)).collect(),
        })
        .collect()
}

/// Level and split per item, stratified by scene so every split stays
/// class-balanced.
fn assign_splits<R: Rng + ?Sized>(scenes: &[SceneType], rng: &mut R) -> Vec<(Level, Split)> {
    let l1_total = LEVEL1_COUNTS.0 + LEVEL1_COUNTS.1;
    let l2_total = LEVEL2_COUNTS.0 + LEVEL2_COUNTS.1;
    let mut out = vec![(Level::Level1, Split::Train); scenes.len()];
    for &scene in SceneType::ALL {
        let idx: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i] == scene).collect();
        let n_l1 = (idx.len() as f64 * l1_total / (l1_total + l2_total)).round() as usize;
        let (l1, l2) = idx.split_at(n_l1.min(idx.len()));
        for (group, level, test_frac) in [
            (l1, Level::Level1, LEVEL1_COUNTS.1 / l1_total),
            (l2, Level::Level2, LEVEL2_COUNTS.1 / l2_total),
        ] {
            let mut order = group.to_vec();
            order.shuffle(rng);
            let n_test = (order.len() as f64 * test_frac).round() as usize;
            let n_val = ((order.len() - n_test) as f64 * VAL_FRACTION).round() as usize;
            for (rank, &i) in order.iter().enumerate() {
                let split = if rank < n_test {
                    Split::Test
                } else if rank < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                };
                out[i] = (level, split);
            }
        }
    }
    out
}

/// Writes the corpus under `layout.data()` and returns its manifest.
pub fn synth_dataset(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = Lexicon::standard();
    let speakers = make_speakers(d.n_speakers, &mut rng);
    let scenes: Vec<SceneType> = (0..d.n_items).map(|i| SceneType::ALL[i % 3]).collect();
    let splits = assign_splits(&scenes, &mut rng);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let mut records = Vec::with_capacity(d.n_items);
    let mut traces = Vec::with_capacity(d.n_items);
    for i in 0..d.n_items {
        let id = format!("item{i:04}");
        let spk = &speakers[rng.gen_range(0..speakers.len())];
        let emotion = EMOTIONS[rng.gen_range(0..EMOTIONS.len())];
        let conclusion = Conclusion::new(scenes[i], spk.gender, spk.age, emotion);
        let transcript = sample_transcript(&mut rng);
        let tokens = lexicon.tokens(&transcript)?;

        let fpw = frames_per_word(spk.age, emotion);
        let n_frames = fpw * tokens.tokens.len();
        let mean = cluster_mean(&conclusion, tokens.tokens.len());
        let spread = emotion_spread(emotion);
        let mut target = Array2::zeros((n_frames, FEATURE_DIM));
        for f in 0..n_frames {
            let word = tokens.tokens[f / fpw] as usize;
            for k in 0..ATTR_DIMS {
                target[[f, k]] = mean[k] + spk.offset[k] + spread[k] * unit.sample(&mut rng);
            }
            for k in 0..CONTENT_DIMS {
                target[[f, ATTR_DIMS + k]] = lexicon.vectors[word][k] + CONTENT_NOISE * unit.sample(&mut rng);
            }
        }
        let target = FeatureSeq::new(target, d.frame_hop)?;
        let duration_s = target.duration_s();

        let pad = rng.gen_range(0.1..0.5);
        let t_frames = ((duration_s + pad) * d.fps).ceil().max(1.0) as usize;
        let vm = visual_means(&conclusion);
        let mut visual = Array2::zeros((t_frames, VISUAL_CHANNELS));
        for f in 0..t_frames {
            for k in 0..VISUAL_CHANNELS {
                visual[[f, k]] = vm[k] + d.visual_noise * unit.sample(&mut rng);
            }
        }
        let visual = VisualFeatureSeq::new(visual, d.fps)?;

        let trace = reasoning_trace(people_count(scenes[i]) as usize, scenes[i] != SceneType::Narration, conclusion);
        let text = if rng.gen::<f64>() < d.corrupt_fraction {
            let m = Mutation::ALL[rng.gen_range(0..Mutation::ALL.len())];
            mutate_trace(&trace, m, &mut rng)?
        } else {
            render_trace(&trace)?
        };
        traces.push(TraceRecord { id: id.clone(), text });

        let video_rel = format!("visual/{id}.tsv");
        let feat_rel = format!("features/{id}.tsv");
        write_visual(&layout.resolve(&video_rel), &visual)?;
        write_features(&layout.resolve(&feat_rel), &target)?;
        records.push(ManifestRecord {
            id,
            video_features_path: video_rel,
            transcript,
            scene: conclusion.scene,
            gender: spk.gender,
            age: spk.age,
            emotion,
            speaker: spk.id.clone(),
            features_path: feat_rel,
            duration_s,
            split: splits[i].1,
            level: splits[i].0,
        });
    }
    write_jsonl(&layout.manifest(), &records)?;
    write_jsonl(&layout.traces(), &traces)?;
    write_json(&layout.lexicon(), &lexicon)?;
    write_json(&layout.speakers(), &speakers)?;
    Ok(records)
}

/// One loaded corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub record: ManifestRecord,
    pub visual: VisualFeatureSeq,
    pub target: FeatureSeq,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub lexicon: Lexicon,
}

impl Dataset {
    pub fn load(layout: &RunLayout) -> Result<Self> {
        let records = read_manifest(layout)?;
        let lexicon: Lexicon = read_json(&layout.lexicon())?;
        let items = records
            .into_iter()
            .map(|record| {
                let visual = read_visual(&layout.resolve(&record.video_features_path))?;
                let target = read_features(&layout.resolve(&record.features_path))?;
                if (target.duration_s() - record.duration_s).abs() > target.frame_hop {
                    return Err(DubError::Invariant(format!(
                        "{}: duration disagrees with its feature file",
                        record.id
                    )));
                }
                let tokens = lexicon.tokens(&record.transcript)?;
                Ok(Item {
                    record,
                    visual,
                    target,
                    tokens,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, lexicon })
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.record.split == split).collect()
    }

    /// Indices of the items in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].record.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.record.id == id)
    }
}
