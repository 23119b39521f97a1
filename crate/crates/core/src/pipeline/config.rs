use serde::{Deserialize, Serialize};

use crate::error::{DubError, Result};
use crate::guidance::{GuidanceScales, OdeScheme};
use crate::preference::{DpoConfig, MpoWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_items: usize,
    pub n_speakers: usize,
    pub fps: f64,
    pub frame_hop: f64,
    pub visual_noise: f64,
    /// Share of corpus traces replaced by a format-corrupted variant.
    pub corrupt_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_items: 240,
            n_speakers: 12,
            fps: 10.0,
            frame_hop: 0.05,
            visual_noise: 0.6,
            corrupt_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 150, lr: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpoConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub delta: f64,
    pub length_normalize: bool,
    pub weights: MpoWeights,
    /// Sampled traces per held-out item when measuring format validity.
    pub validity_samples: usize,
}

impl Default for MpoConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 0.5,
            batch_size: 32,
            beta: 0.1,
            delta: 0.0,
            length_normalize: false,
            weights: MpoWeights::default(),
            validity_samples: 8,
        }
    }
}

impl MpoConfig {
    pub fn dpo(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            delta: self.delta,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub knots: usize,
    pub visual_dim: usize,
    pub label_dim: usize,
    pub token_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            knots: 17,
            visual_dim: 8,
            label_dim: 8,
            token_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfmConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sigma_min: f64,
    /// Transcript dropout during pretraining.
    pub dropout_p: f64,
    /// Probability that a training prompt is the target utterance itself
    /// rather than another utterance of the same speaker.
    pub self_prompt_p: f64,
    pub log_every: usize,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 0.02,
            batch_size: 16,
            sigma_min: 1e-4,
            dropout_p: 0.05,
            self_prompt_p: 0.5,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub duration_lr: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub self_prompt_p: f64,
    pub log_every: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 0.02,
            duration_lr: 0.01,
            batch_size: 16,
            dropout_p: 0.05,
            self_prompt_p: 0.5,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub scales: GuidanceScales,
    pub steps: usize,
    pub scheme: OdeScheme,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            scales: GuidanceScales::default(),
            steps: 32,
            scheme: OdeScheme::Euler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cepstral_order: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cepstral_order: 11 }
    }
}

/// Every knob of a run. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub mpo: MpoConfig,
    pub model: ModelConfig,
    pub cfm: CfmConfig,
    pub tune: TuneConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            sft: SftConfig::default(),
            mpo: MpoConfig::default(),
            model: ModelConfig::default(),
            cfm: CfmConfig::default(),
            tune: TuneConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DubError::Config(msg.into()))
    }
}

fn prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DubError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DubError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DubError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.n_items >= 3, "data.n_items must be at least 3")?;
        check(d.n_speakers >= 2, "data.n_speakers must be at least 2")?;
        check(positive(d.fps), "data.fps must be positive")?;
        check(positive(d.frame_hop), "data.frame_hop must be positive")?;
        check(d.visual_noise.is_finite() && d.visual_noise >= 0.0, "data.visual_noise must be >= 0")?;
        check(prob(d.corrupt_fraction), "data.corrupt_fraction must be in [0, 1]")?;
        check(self.sft.lr.is_finite() && self.sft.lr >= 0.0, "sft.lr must be >= 0")?;
        let m = &self.mpo;
        check(m.lr.is_finite() && m.lr >= 0.0, "mpo.lr must be >= 0")?;
        check(m.batch_size >= 1, "mpo.batch_size must be at least 1")?;
        check(positive(m.beta), "mpo.beta must be positive")?;
        check(m.delta.is_finite(), "mpo.delta must be finite")?;
        check(m.validity_samples >= 1, "mpo.validity_samples must be at least 1")?;
        m.weights.validate().map_err(|e| DubError::Config(e.to_string()))?;
        let md = &self.model;
        check(md.knots >= 2, "model.knots must be at least 2")?;
        check(md.visual_dim >= 1 && md.label_dim >= 1 && md.token_dim >= 1, "model widths must be positive")?;
        let c = &self.cfm;
        check(positive(c.lr) && c.batch_size >= 1 && c.log_every >= 1, "cfm lr, batch_size and log_every must be positive")?;
        check((0.0..1.0).contains(&c.sigma_min), "cfm.sigma_min must be in [0, 1)")?;
        check(prob(c.dropout_p), "cfm.dropout_p must be in [0, 1]")?;
        check(prob(c.self_prompt_p), "cfm.self_prompt_p must be in [0, 1]")?;
        let t = &self.tune;
        check(
            positive(t.lr) && positive(t.duration_lr) && t.batch_size >= 1 && t.log_every >= 1,
            "tune lr, duration_lr, batch_size and log_every must be positive",
        )?;
        check(prob(t.dropout_p), "tune.dropout_p must be in [0, 1]")?;
        check(prob(t.self_prompt_p), "tune.self_prompt_p must be in [0, 1]")?;
        self.infer.scales.validate().map_err(|e| DubError::Config(e.to_string()))?;
        check(self.infer.steps >= 1, "infer.steps must be at least 1")?;
        check(self.eval.cepstral_order >= 1, "eval.cepstral_order must be at least 1")?;
        Ok(())
    }
}
