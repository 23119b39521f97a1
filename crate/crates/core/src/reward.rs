//! Rule-based rewards: format and outcome flags plus their
//! binary cross-entropy losses.

use serde::{Deserialize, Serialize};

use crate::cot_trace::{extract_answer, parse_trace, Conclusion};
use crate::error::{DubError, Result};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardFlags {
    pub f_true: bool,
    pub o_true: bool,
}

impl RewardFlags {
    pub fn format(self) -> f64 {
        f64::from(u8::from(self.f_true))
    }

    pub fn outcome(self) -> f64 {
        f64::from(u8::from(self.o_true))
    }
}

/// Per-axis agreement of a predicted conclusion. Only `scene` feeds the
/// outcome reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AxisFlags {
    pub scene: bool,
    pub gender: bool,
    pub age: bool,
    pub emotion: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardProbs {
    pub p_f: f64,
    pub p_o: f64,
}

impl RewardProbs {
    pub fn clamped(p_f: f64, p_o: f64) -> Self {
        Self {
            p_f: clamp_prob(p_f),
            p_o: clamp_prob(p_o),
        }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn outcome_check(pred: &Conclusion, gold: &Conclusion) -> bool {
    pred.scene == gold.scene
}

pub fn axis_flags(pred: &Conclusion, gold: &Conclusion) -> AxisFlags {
    AxisFlags {
        scene: pred.scene == gold.scene,
        gender: pred.attributes.gender == gold.attributes.gender,
        age: pred.attributes.age == gold.attributes.age,
        emotion: pred.attributes.emotion == gold.attributes.emotion,
    }
}

fn bce(p: f64, target: bool, what: &str) -> Result<f64> {
    if !p.is_finite() {
        return Err(DubError::InvalidArgument(format!("{what} must be finite, got {p}")));
    }
    let p = clamp_prob(p);
    Ok(if target { -p.ln() } else { -(1.0 - p).ln() })
}

/// d/dp of the cross-entropy; zero where the clamp is active.
fn bce_grad(p: f64, target: bool) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if target {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// `-[f log p_f + (1 - f) log(1 - p_f)]`.
pub fn format_loss(p_f: f64, f_true: bool) -> Result<f64> {
    bce(p_f, f_true, "p_f")
}

pub fn format_loss_grad(p_f: f64, f_true: bool) -> f64 {
    bce_grad(p_f, f_true)
}

/// Accuracy loss; the same cross-entropy as [`format_loss`] on `(p_o, o_true)`.
pub fn outcome_loss(p_o: f64, o_true: bool) -> Result<f64> {
    bce(p_o, o_true, "p_o")
}

pub fn outcome_loss_grad(p_o: f64, o_true: bool) -> f64 {
    bce_grad(p_o, o_true)
}

/// Scores a raw response against the gold answer. `o_true` is only granted
/// on traces that parse.
pub fn score_trace(text: &str, gold: &Conclusion) -> RewardFlags {
    match parse_trace(text) {
        Ok(trace) => RewardFlags {
            f_true: true,
            o_true: outcome_check(&extract_answer(&trace), gold),
        },
        Err(_) => RewardFlags::default(),
    }
}
