//! Desk-scale reasoning policy.
//!
//! A linear-softmax model over a pooled visual feature vector. A response
//! is five categorical decisions: whether the trace is well formed, then
//! scene, gender, age and emotion. The sequence log-probability is the sum
//! of the five decision log-probabilities. `p_f` is the probability of the
//! format decision taken and `p_o` that of the scene decision taken.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cot_trace::{AgeBand, Conclusion, Emotion, Gender, SceneType};
use crate::error::{DubError, Result};
use crate::preference::{GradSeeds, PolicyEvaluator};
use crate::reward::RewardProbs;

const HEAD_SIZES: [usize; 5] = [2, 3, 3, 4, 7];
const FORMAT_HEAD: usize = 0;
const SCENE_HEAD: usize = 1;

/// Decisions that make up one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decisions {
    pub well_formed: bool,
    pub conclusion: Conclusion,
}

impl Decisions {
    fn indices(&self) -> [usize; 5] {
        let a = self.conclusion.attributes;
        [
            usize::from(!self.well_formed),
            self.conclusion.scene.index(),
            a.gender.index(),
            a.age.index(),
            a.emotion.index(),
        ]
    }

    fn from_indices(idx: [usize; 5]) -> Self {
        Decisions {
            well_formed: idx[0] == 0,
            conclusion: Conclusion::new(
                SceneType::from_index(idx[1]).expect("scene index"),
                Gender::from_index(idx[2]).expect("gender index"),
                AgeBand::from_index(idx[3]).expect("age index"),
                Emotion::from_index(idx[4]).expect("emotion index"),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    input_dim: usize,
    params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl CategoricalPolicy {
    /// Zero-initialized policy: every head starts uniform.
    pub fn new(input_dim: usize) -> Self {
        let n = HEAD_SIZES.iter().sum::<usize>() * input_dim;
        Self {
            input_dim,
            params: vec![0.0; n],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn head_offset(&self, head: usize) -> usize {
        HEAD_SIZES[..head].iter().sum::<usize>() * self.input_dim
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(DubError::Shape(format!(
                "policy expects {} input features, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Class probabilities of one head.
    pub fn head_probs(&self, x: &[f64], head: usize) -> Vec<f64> {
        let off = self.head_offset(head);
        let logits: Vec<f64> = (0..HEAD_SIZES[head])
            .map(|k| {
                let w = &self.params[off + k * self.input_dim..off + (k + 1) * self.input_dim];
                w.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect();
        softmax(&logits)
    }

    /// Argmax decisions; ties resolve to the lowest index.
    pub fn greedy(&self, x: &[f64]) -> Result<Decisions> {
        self.check_query(x)?;
        let mut idx = [0usize; 5];
        for (h, slot) in idx.iter_mut().enumerate() {
            let p = self.head_probs(x, h);
            let mut best = 0;
            for (k, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = k;
                }
            }
            *slot = best;
        }
        Ok(Decisions::from_indices(idx))
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Decisions> {
        self.check_query(x)?;
        let mut idx = [0usize; 5];
        for (h, slot) in idx.iter_mut().enumerate() {
            let p = self.head_probs(x, h);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            *slot = p.len() - 1;
            for (k, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    *slot = k;
                    break;
                }
            }
        }
        Ok(Decisions::from_indices(idx))
    }
}

impl PolicyEvaluator for CategoricalPolicy {
    type Query = Vec<f64>;
    type Response = Decisions;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn log_prob(&self, x: &Vec<f64>, r: &Decisions) -> f64 {
        r.indices()
            .iter()
            .enumerate()
            .map(|(h, &k)| self.head_probs(x, h)[k].ln())
            .sum()
    }

    fn response_len(&self, _r: &Decisions) -> usize {
        HEAD_SIZES.len()
    }

    fn reward_probs(&self, x: &Vec<f64>, r: &Decisions) -> RewardProbs {
        let idx = r.indices();
        RewardProbs {
            p_f: self.head_probs(x, FORMAT_HEAD)[idx[FORMAT_HEAD]],
            p_o: self.head_probs(x, SCENE_HEAD)[idx[SCENE_HEAD]],
        }
    }

    fn accumulate_grad(&self, x: &Vec<f64>, r: &Decisions, seeds: GradSeeds, grad: &mut [f64]) {
        for (h, &target) in r.indices().iter().enumerate() {
            let p = self.head_probs(x, h);
            // Both log p[target] and p[target] have logit gradients along
            // (onehot - p); p[target] carries an extra factor p[target].
            let mut coeff = seeds.log_prob;
            if h == FORMAT_HEAD {
                coeff += seeds.p_format * p[target];
            }
            if h == SCENE_HEAD {
                coeff += seeds.p_outcome * p[target];
            }
            if coeff == 0.0 {
                continue;
            }
            let off = self.head_offset(h);
            for (k, pk) in p.iter().enumerate() {
                let dlogit = coeff * (f64::from(u8::from(k == target)) - pk);
                let row = &mut grad[off + k * self.input_dim..off + (k + 1) * self.input_dim];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dlogit * xi;
                }
            }
        }
    }
}
