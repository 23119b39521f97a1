//! Duration predictor and its log-space L1 loss.

use serde::{Deserialize, Serialize};

use crate::conditions::{ConclusionConditions, LabelAxis, OneHotEmbedder, VisualFeatureSeq, encode_conclusion};
use crate::error::{DubError, Result};

fn check_durations(pred: f64, truth: f64) -> Result<()> {
    if !(pred.is_finite() && pred > 0.0 && truth.is_finite() && truth > 0.0) {
        return Err(DubError::InvalidArgument(format!(
            "durations must be positive and finite, got {pred} and {truth}"
        )));
    }
    Ok(())
}

/// `|ln pred - ln truth|`.
pub fn duration_loss(pred_s: f64, true_s: f64) -> Result<f64> {
    check_durations(pred_s, true_s)?;
    Ok((pred_s.ln() - true_s.ln()).abs())
}

/// Derivative with respect to `pred_s` (sub-gradient 0 at equality).
pub fn duration_loss_grad(pred_s: f64, true_s: f64) -> Result<f64> {
    check_durations(pred_s, true_s)?;
    let d = pred_s.ln() - true_s.ln();
    Ok(if d == 0.0 { 0.0 } else { d.signum() / pred_s })
}

/// Log-linear regressor from visual and conclusion features to seconds.
///
/// Features: bias, log clip length, pooled visual channels and the one-hot
/// conclusion labels (all zero when the conclusion is ϕ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationPredictor {
    visual_channels: usize,
    pub weights: Vec<f64>,
}

impl DurationPredictor {
    /// Starts out predicting the clip length.
    pub fn new(visual_channels: usize) -> Self {
        let n = 2 + visual_channels + Self::label_width();
        let mut weights = vec![0.0; n];
        weights[1] = 1.0;
        Self {
            visual_channels,
            weights,
        }
    }

    fn label_width() -> usize {
        LabelAxis::ORDER.iter().map(|a| a.vocab_size()).sum()
    }

    pub fn features(&self, visual: &VisualFeatureSeq, conclusion: Option<&ConclusionConditions>) -> Result<Vec<f64>> {
        if visual.frames.ncols() != self.visual_channels {
            return Err(DubError::Shape(format!(
                "duration predictor expects {} visual channels, got {}",
                self.visual_channels,
                visual.frames.ncols()
            )));
        }
        let mut f = vec![1.0, visual.duration_s().ln()];
        f.extend(visual.pooled());
        match conclusion {
            Some(c) => f.extend(encode_conclusion(c, &OneHotEmbedder)?.concat()),
            None => f.extend(std::iter::repeat_n(0.0, Self::label_width())),
        }
        Ok(f)
    }

    pub fn predict_seconds_from_features(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>().exp()
    }

    pub fn predict_seconds(&self, visual: &VisualFeatureSeq, conclusion: Option<&ConclusionConditions>) -> Result<f64> {
        Ok(self.predict_seconds_from_features(&self.features(visual, conclusion)?))
    }
}
