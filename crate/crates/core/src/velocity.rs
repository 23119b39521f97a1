//! Desk-scale conditional velocity network.
//!
//! Per frame and feature dimension `d`:
//!
//! ```text
//! v_d(x, τ, e) = a_d(τ, e) · x_d + b_d(τ, e)
//! a_d(τ, e) = Σ_k φ_k(τ) Σ_j A[k, d, j] e_j
//! b_d(τ, e) = Σ_k φ_k(τ) Σ_j B[k, d, j] e_j
//! ```
//!
//! `φ_k` are piecewise-linear hat functions on a uniform τ grid and `e` is
//! the frame's condition vector `[1, visual, conclusion, transcript, prompt]`.
//! A ϕ slot contributes its learned null vector instead of an embedding.
//! The visual and conclusion columns form the tuning branch; everything
//! else is the trunk.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditions::{ConditionEncoder, DubbingConditions, EncodedConditions};
use crate::error::{DubError, Result};
use crate::flow::{TrainableVelocity, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SlotWidths {
    visual: usize,
    conclusion: usize,
    transcript: usize,
    prompt: usize,
}

impl SlotWidths {
    fn total(&self) -> usize {
        1 + self.visual + self.conclusion + self.transcript + self.prompt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVelocity {
    dim: usize,
    knots: usize,
    encoder: Option<ConditionEncoder>,
    widths: SlotWidths,
    params: Vec<f64>,
}

/// Hat-basis support at τ: two knot indices and their weights.
fn hat_weights(tau: f64, knots: usize) -> [(usize, f64); 2] {
    let s = tau.clamp(0.0, 1.0) * (knots - 1) as f64;
    let k0 = (s.floor() as usize).min(knots - 2);
    let w1 = s - k0 as f64;
    [(k0, 1.0 - w1), (k0 + 1, w1)]
}

impl ConditionalVelocity {
    /// Model over `dim` features conditioned through `encoder`. All
    /// parameters, null vectors included, start at zero.
    pub fn new(dim: usize, knots: usize, encoder: ConditionEncoder) -> Result<Self> {
        if encoder.spec().feature_dim != dim {
            return Err(DubError::Shape(format!(
                "encoder expects {} prompt features, model has {dim}",
                encoder.spec().feature_dim
            )));
        }
        let widths = SlotWidths {
            visual: encoder.visual_width(),
            conclusion: encoder.conclusion_width(),
            transcript: encoder.transcript_width(),
            prompt: encoder.prompt_width(),
        };
        Self::build(dim, knots, Some(encoder), widths)
    }

    /// Condition-free affine field `a(τ) x + b(τ)`.
    pub fn unconditional(dim: usize, knots: usize) -> Result<Self> {
        let widths = SlotWidths {
            visual: 0,
            conclusion: 0,
            transcript: 0,
            prompt: 0,
        };
        Self::build(dim, knots, None, widths)
    }

    fn build(dim: usize, knots: usize, encoder: Option<ConditionEncoder>, widths: SlotWidths) -> Result<Self> {
        if dim == 0 || knots < 2 {
            return Err(DubError::InvalidArgument("velocity model needs dim >= 1 and knots >= 2".into()));
        }
        let j = widths.total();
        let n = 2 * knots * dim * j + widths.visual + widths.conclusion + widths.transcript + widths.prompt;
        Ok(Self {
            dim,
            knots,
            encoder,
            widths,
            params: vec![0.0; n],
        })
    }

    pub fn encoder(&self) -> Option<&ConditionEncoder> {
        self.encoder.as_ref()
    }

    fn cols(&self) -> usize {
        self.widths.total()
    }

    fn a_index(&self, k: usize, d: usize) -> usize {
        (k * self.dim + d) * self.cols()
    }

    fn b_index(&self, k: usize, d: usize) -> usize {
        self.knots * self.dim * self.cols() + self.a_index(k, d)
    }

    fn null_offset(&self) -> usize {
        2 * self.knots * self.dim * self.cols()
    }

    /// Column ranges of the visual and conclusion slots.
    fn branch_columns(&self) -> std::ops::Range<usize> {
        1..1 + self.widths.visual + self.widths.conclusion
    }

    /// `true` for parameters belonging to the tuning branch (visual and
    /// conclusion columns plus their null vectors).
    pub fn branch_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        let cols = self.branch_columns();
        for k in 0..self.knots {
            for d in 0..self.dim {
                for c in cols.clone() {
                    mask[self.a_index(k, d) + c] = true;
                    mask[self.b_index(k, d) + c] = true;
                }
            }
        }
        let off = self.null_offset();
        for m in &mut mask[off..off + self.widths.visual + self.widths.conclusion] {
            *m = true;
        }
        mask
    }

    /// Trunk parameters: the complement of [`Self::branch_mask`].
    pub fn trunk_mask(&self) -> Vec<bool> {
        self.branch_mask().into_iter().map(|b| !b).collect()
    }

    /// Zeroes the tuning branch so outputs equal the trunk's.
    pub fn reset_branch(&mut self) {
        let mask = self.branch_mask();
        for (p, m) in self.params.iter_mut().zip(mask) {
            if m {
                *p = 0.0;
            }
        }
    }

    fn encode(&self, conds: &DubbingConditions, frames: usize) -> Result<EncodedConditions> {
        match &self.encoder {
            Some(enc) => enc.encode(conds, frames),
            None => Ok(EncodedConditions {
                visual: None,
                conclusion: None,
                transcript: None,
                prompt: None,
            }),
        }
    }

    /// Condition vector of every frame, with null vectors for ϕ slots.
    fn condition_rows(&self, enc: &EncodedConditions, frames: usize) -> Vec<Vec<f64>> {
        let w = self.widths;
        let nulls = &self.params[self.null_offset()..];
        let (null_v, rest) = nulls.split_at(w.visual);
        let (null_c, rest) = rest.split_at(w.conclusion);
        let (null_t, null_p) = rest.split_at(w.transcript);
        let mut shared_head = Vec::with_capacity(1 + w.visual + w.conclusion);
        shared_head.push(1.0);
        if w.visual > 0 {
            shared_head.extend_from_slice(enc.visual.as_deref().unwrap_or(null_v));
        }
        if w.conclusion > 0 {
            shared_head.extend_from_slice(enc.conclusion.as_deref().unwrap_or(null_c));
        }
        let prompt: &[f64] = if w.prompt > 0 {
            enc.prompt.as_deref().unwrap_or(null_p)
        } else {
            &[]
        };
        (0..frames)
            .map(|f| {
                let mut row = shared_head.clone();
                if w.transcript > 0 {
                    match &enc.transcript {
                        Some(rows) => row.extend_from_slice(&rows[f]),
                        None => row.extend_from_slice(null_t),
                    }
                }
                row.extend_from_slice(prompt);
                row
            })
            .collect()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dim || x.nrows() == 0 {
            return Err(DubError::Shape(format!(
                "velocity model expects F x {} input, got {:?}",
                self.dim,
                x.dim()
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl VelocityModel for ConditionalVelocity {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &Array2<f64>, tau: f64, conds: &DubbingConditions) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let frames = x.nrows();
        let enc = self.encode(conds, frames)?;
        let rows = self.condition_rows(&enc, frames);
        let hats = hat_weights(tau, self.knots);
        let j = self.cols();
        let mut out = Array2::zeros(x.dim());
        for (f, e) in rows.iter().enumerate() {
            for d in 0..self.dim {
                let mut a = 0.0;
                let mut b = 0.0;
                for &(k, w) in &hats {
                    if w == 0.0 {
                        continue;
                    }
                    let ai = self.a_index(k, d);
                    let bi = self.b_index(k, d);
                    a += w * dot(&self.params[ai..ai + j], e);
                    b += w * dot(&self.params[bi..bi + j], e);
                }
                out[[f, d]] = a * x[[f, d]] + b;
            }
        }
        Ok(out)
    }
}

impl TrainableVelocity for ConditionalVelocity {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(
        &self,
        x: &Array2<f64>,
        tau: f64,
        conds: &DubbingConditions,
        grad_out: &Array2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        if grad_out.dim() != x.dim() || grad.len() != self.params.len() {
            return Err(DubError::Shape("gradient buffers do not match the model".into()));
        }
        let frames = x.nrows();
        let enc = self.encode(conds, frames)?;
        let rows = self.condition_rows(&enc, frames);
        let hats = hat_weights(tau, self.knots);
        let j = self.cols();
        let mut de = vec![0.0; j];
        let mut de_shared = vec![0.0; j];
        let mut de_transcript = vec![0.0; self.widths.transcript];
        let t_start = 1 + self.widths.visual + self.widths.conclusion;

        for (f, e) in rows.iter().enumerate() {
            de.iter_mut().for_each(|v| *v = 0.0);
            for d in 0..self.dim {
                let g = grad_out[[f, d]];
                if g == 0.0 {
                    continue;
                }
                let xv = x[[f, d]];
                for &(k, w) in &hats {
                    if w == 0.0 {
                        continue;
                    }
                    let ai = self.a_index(k, d);
                    let bi = self.b_index(k, d);
                    let ga = w * g * xv;
                    let gb = w * g;
                    for c in 0..j {
                        grad[ai + c] += ga * e[c];
                        grad[bi + c] += gb * e[c];
                        de[c] += ga * self.params[ai + c] + gb * self.params[bi + c];
                    }
                }
            }
            for (s, v) in de_shared.iter_mut().zip(&de) {
                *s += v;
            }
            for (s, v) in de_transcript.iter_mut().zip(&de[t_start..t_start + self.widths.transcript]) {
                *s += v;
            }
        }

        // Route condition-vector gradients into the null vectors of ϕ slots.
        let off = self.null_offset();
        let w = self.widths;
        if enc.visual.is_none() {
            for i in 0..w.visual {
                grad[off + i] += de_shared[1 + i];
            }
        }
        if enc.conclusion.is_none() {
            for i in 0..w.conclusion {
                grad[off + w.visual + i] += de_shared[1 + w.visual + i];
            }
        }
        if enc.transcript.is_none() {
            for i in 0..w.transcript {
                grad[off + w.visual + w.conclusion + i] += de_transcript[i];
            }
        }
        if enc.prompt.is_none() {
            let p_start = t_start + w.transcript;
            for i in 0..w.prompt {
                grad[off + w.visual + w.conclusion + w.transcript + i] += de_shared[p_start + i];
            }
        }
        Ok(())
    }
}
