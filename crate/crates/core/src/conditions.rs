//! Generation conditions.
//!
//! Each of the three guided slots (visual, conclusion, transcript) is an
//! `Option`: `None` is the null condition ϕ. The speech prompt is a
//! separate, unguided input and is never dropped.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cot_trace::{AgeBand, Conclusion, Emotion, Gender, SceneType};
use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFeatureSeq {
    /// T × Dv per-frame visual features.
    pub frames: Array2<f64>,
    pub fps: f64,
}

impl VisualFeatureSeq {
    pub fn new(frames: Array2<f64>, fps: f64) -> Result<Self> {
        let v = Self { frames, fps };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.nrows() == 0 || self.frames.ncols() == 0 {
            return Err(DubError::Invariant("visual features need at least one frame and channel".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(DubError::Invariant("visual fps must be positive".into()));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(DubError::Invariant("visual features must be finite".into()));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.nrows() as f64 / self.fps
    }

    /// Per-channel mean over frames.
    pub fn pooled(&self) -> Vec<f64> {
        let t = self.frames.nrows() as f64;
        self.frames.sum_axis(ndarray::Axis(0)).iter().map(|v| v / t).collect()
    }
}

/// The four conclusion sub-conditions (scene, gender, age, emotion).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConclusionConditions(pub Conclusion);

impl ConclusionConditions {
    /// Builds from raw labels, rejecting anything outside the vocabularies.
    pub fn from_labels(scene: &str, gender: &str, age: &str, emotion: &str) -> Result<Self> {
        Ok(Self(Conclusion::new(
            scene.parse()?,
            gender.parse()?,
            age.parse()?,
            emotion.parse()?,
        )))
    }

    pub fn conclusion(&self) -> Conclusion {
        self.0
    }
}

impl From<Conclusion> for ConclusionConditions {
    fn from(c: Conclusion) -> Self {
        Self(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, text: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DubError::Invariant("token sequence must be non-empty".into()));
        }
        Ok(Self {
            tokens,
            text: text.into(),
        })
    }

    /// Token aligned to frame `f` of `frames` under uniform alignment.
    pub fn token_at_frame(&self, f: usize, frames: usize) -> u32 {
        let n = self.tokens.len();
        self.tokens[(f * n / frames.max(1)).min(n - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechPrompt {
    pub features: FeatureSeq,
    pub transcript: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DubbingConditions {
    pub visual: Option<VisualFeatureSeq>,
    pub conclusion: Option<ConclusionConditions>,
    pub transcript: Option<TokenSeq>,
    pub prompt: Option<SpeechPrompt>,
}

impl DubbingConditions {
    /// Fully unconditional bundle.
    pub fn null() -> Self {
        Self::default()
    }

    pub fn is_fully_null(&self) -> bool {
        self.visual.is_none() && self.conclusion.is_none() && self.transcript.is_none()
    }

    /// Copy with the guided slots replaced by ϕ where the flag is false.
    pub fn masked(&self, visual: bool, conclusion: bool, transcript: bool) -> Self {
        Self {
            visual: if visual { self.visual.clone() } else { None },
            conclusion: if conclusion { self.conclusion } else { None },
            transcript: if transcript { self.transcript.clone() } else { None },
            prompt: self.prompt.clone(),
        }
    }
}

pub fn assemble_conditions(
    visual: Option<VisualFeatureSeq>,
    conclusion: Option<ConclusionConditions>,
    transcript: Option<TokenSeq>,
    prompt: Option<SpeechPrompt>,
) -> Result<DubbingConditions> {
    if let Some(v) = &visual {
        v.validate()?;
    }
    if let Some(t) = &transcript {
        if t.tokens.is_empty() {
            return Err(DubError::Invariant("transcript must be non-empty".into()));
        }
    }
    if let Some(p) = &prompt {
        p.features.validate()?;
    }
    Ok(DubbingConditions {
        visual,
        conclusion,
        transcript,
        prompt,
    })
}

/// Independently replaces each guided slot by ϕ with probability `p`.
///
/// Always consumes three uniforms from `rng` (visual, conclusion,
/// transcript order) so the stream stays aligned whatever `p` is.
pub fn dropout_conditions<R: Rng + ?Sized>(c: &DubbingConditions, p: f64, rng: &mut R) -> Result<DubbingConditions> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DubError::InvalidArgument(format!("dropout probability {p} outside [0, 1]")));
    }
    let keep_v = rng.gen::<f64>() >= p;
    let keep_c = rng.gen::<f64>() >= p;
    let keep_t = rng.gen::<f64>() >= p;
    Ok(c.masked(keep_v, keep_c, keep_t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelAxis {
    Scene,
    Gender,
    Age,
    Emotion,
}

impl LabelAxis {
    pub const ORDER: [LabelAxis; 4] = [LabelAxis::Scene, LabelAxis::Gender, LabelAxis::Age, LabelAxis::Emotion];

    pub fn vocab_size(self) -> usize {
        match self {
            LabelAxis::Scene => SceneType::ALL.len(),
            LabelAxis::Gender => Gender::ALL.len(),
            LabelAxis::Age => AgeBand::ALL.len(),
            LabelAxis::Emotion => Emotion::ALL.len(),
        }
    }

    fn label_index(self, c: &Conclusion) -> usize {
        match self {
            LabelAxis::Scene => c.scene.index(),
            LabelAxis::Gender => c.attributes.gender.index(),
            LabelAxis::Age => c.attributes.age.index(),
            LabelAxis::Emotion => c.attributes.emotion.index(),
        }
    }
}

/// Maps a categorical label to a vector.
pub trait LabelEmbedder {
    fn block_dim(&self, axis: LabelAxis) -> usize;
    fn embed(&self, axis: LabelAxis, index: usize) -> Result<Vec<f64>>;
}

/// One-hot vectors over each axis' vocabulary.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneHotEmbedder;

impl LabelEmbedder for OneHotEmbedder {
    fn block_dim(&self, axis: LabelAxis) -> usize {
        axis.vocab_size()
    }

    fn embed(&self, axis: LabelAxis, index: usize) -> Result<Vec<f64>> {
        let n = axis.vocab_size();
        if index >= n {
            return Err(DubError::UnknownLabel {
                axis: "embedding",
                label: index.to_string(),
            });
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(v)
    }
}

/// Frozen Gaussian random projection of one-hot labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomProjectionEmbedder {
    dim: usize,
    /// Per axis, `vocab_size` rows of `dim` values.
    tables: Vec<Vec<Vec<f64>>>,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let tables = LabelAxis::ORDER
            .iter()
            .map(|axis| {
                (0..axis.vocab_size())
                    .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
                    .collect()
            })
            .collect();
        Self { dim, tables }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl LabelEmbedder for RandomProjectionEmbedder {
    fn block_dim(&self, _axis: LabelAxis) -> usize {
        self.dim
    }

    fn embed(&self, axis: LabelAxis, index: usize) -> Result<Vec<f64>> {
        let a = LabelAxis::ORDER.iter().position(|x| *x == axis).expect("axis");
        self.tables[a].get(index).cloned().ok_or_else(|| DubError::UnknownLabel {
            axis: "embedding",
            label: index.to_string(),
        })
    }
}

/// Per-label embeddings in (scene, gender, age, emotion) order.
pub fn encode_conclusion<E: LabelEmbedder + ?Sized>(c: &ConclusionConditions, embedder: &E) -> Result<Vec<Vec<f64>>> {
    LabelAxis::ORDER
        .iter()
        .map(|&axis| embedder.embed(axis, axis.label_index(&c.0)))
        .collect()
}

/// Frozen random token table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedder {
    table: Vec<Vec<f64>>,
}

impl TokenEmbedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = (0..vocab_size)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
            .collect();
        Self { table }
    }

    pub fn dim(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    pub fn embed(&self, token: u32) -> Result<&[f64]> {
        self.table.get(token as usize).map(Vec::as_slice).ok_or_else(|| DubError::UnknownLabel {
            axis: "token",
            label: token.to_string(),
        })
    }
}

/// Sizes of the encoded condition slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub visual_channels: usize,
    pub visual_dim: usize,
    pub label_dim: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Fixed embedders turning [`DubbingConditions`] into vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    spec: EncoderSpec,
    visual_proj: Vec<Vec<f64>>,
    labels: RandomProjectionEmbedder,
    tokens: TokenEmbedder,
}

/// Encoded slots; `None` marks ϕ. The transcript slot is per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedConditions {
    pub visual: Option<Vec<f64>>,
    pub conclusion: Option<Vec<f64>>,
    pub transcript: Option<Vec<Vec<f64>>>,
    pub prompt: Option<Vec<f64>>,
}

impl ConditionEncoder {
    pub fn new(spec: EncoderSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (spec.visual_channels.max(1) as f64).sqrt();
        let visual_proj = (0..spec.visual_dim)
            .map(|_| {
                (0..spec.visual_channels)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            })
            .collect();
        Self {
            spec,
            visual_proj,
            labels: RandomProjectionEmbedder::new(spec.label_dim, spec.seed.wrapping_add(1)),
            tokens: TokenEmbedder::new(spec.vocab_size, spec.token_dim, spec.seed.wrapping_add(2)),
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn visual_width(&self) -> usize {
        self.spec.visual_dim
    }

    pub fn conclusion_width(&self) -> usize {
        4 * self.spec.label_dim
    }

    /// Token embedding plus a length feature.
    pub fn transcript_width(&self) -> usize {
        self.spec.token_dim + 1
    }

    /// Frame mean and frame standard deviation of the prompt.
    pub fn prompt_width(&self) -> usize {
        2 * self.spec.feature_dim
    }

    pub fn encode(&self, c: &DubbingConditions, frames: usize) -> Result<EncodedConditions> {
        let visual = match &c.visual {
            Some(v) => {
                if v.frames.ncols() != self.spec.visual_channels {
                    return Err(DubError::Shape(format!(
                        "expected {} visual channels, got {}",
                        self.spec.visual_channels,
                        v.frames.ncols()
                    )));
                }
                let pooled = v.pooled();
                Some(
                    self.visual_proj
                        .iter()
                        .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum())
                        .collect(),
                )
            }
            None => None,
        };
        let conclusion = match &c.conclusion {
            Some(cc) => Some(encode_conclusion(cc, &self.labels)?.concat()),
            None => None,
        };
        let transcript = match &c.transcript {
            Some(t) => {
                let len_feature = t.tokens.len() as f64 / 10.0;
                let mut rows = Vec::with_capacity(frames);
                for f in 0..frames {
                    let mut row = self.tokens.embed(t.token_at_frame(f, frames))?.to_vec();
                    row.push(len_feature);
                    rows.push(row);
                }
                Some(rows)
            }
            None => None,
        };
        let prompt = match &c.prompt {
            Some(p) => {
                if p.features.dim() != self.spec.feature_dim {
                    return Err(DubError::Shape(format!(
                        "prompt has {} coefficients, expected {}",
                        p.features.dim(),
                        self.spec.feature_dim
                    )));
                }
                let mut v = p.features.frame_mean();
                v.extend(p.features.frame_std());
                Some(v)
            }
            None => None,
        };
        Ok(EncodedConditions {
            visual,
            conclusion,
            transcript,
            prompt,
        })
    }
}
