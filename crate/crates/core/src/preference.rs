//! Mixed preference optimization.
//!
//! The objective is a weighted sum of five terms:
//!
//! ```text
//! L = w_p L_p + w_q L_q + w_g L_g + w_f L_f + w_c L_c
//! ```
//!
//! * `L_p`: DPO loss on the difference of policy/reference log-ratios of
//!   the chosen and rejected responses.
//! * `L_q`: BCO loss, an absolute-quality logistic term per response with
//!   reward shift `delta`.
//! * `L_g`: per-token negative log-likelihood of the chosen response.
//! * `L_f`, `L_c`: format and accuracy cross-entropies from
//!   [`crate::reward`].
//!
//! Every scalar loss has an analytic gradient with respect to its
//! log-probability inputs; [`mpo_step`] chains those through a
//! [`PolicyEvaluator`].

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, DubError, Result};
use crate::reward::{format_loss, format_loss_grad, outcome_loss, outcome_loss_grad, RewardFlags, RewardProbs};

/// Sequence log-probabilities of a preference pair under the policy and
/// the frozen reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs {
    pub theta_chosen: f64,
    pub ref_chosen: f64,
    pub theta_rejected: f64,
    pub ref_rejected: f64,
    pub chosen_len: usize,
}

impl PolicyLogProbs {
    fn check(&self) -> Result<()> {
        ensure_finite(
            "log-probabilities",
            &[self.theta_chosen, self.ref_chosen, self.theta_rejected, self.ref_rejected],
        )
    }

    fn chosen_ratio(&self) -> f64 {
        self.theta_chosen - self.ref_chosen
    }

    fn rejected_ratio(&self) -> f64 {
        self.theta_rejected - self.ref_rejected
    }
}

/// Partial derivatives of a loss with respect to the four log-probs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogProbGrad {
    pub theta_chosen: f64,
    pub ref_chosen: f64,
    pub theta_rejected: f64,
    pub ref_rejected: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpoWeights {
    pub preference: f64,
    pub quality: f64,
    pub generation: f64,
    pub format: f64,
    pub outcome: f64,
}

impl Default for MpoWeights {
    fn default() -> Self {
        Self {
            preference: 1.0,
            quality: 1.0,
            generation: 1.0,
            format: 1.0,
            outcome: 1.0,
        }
    }
}

impl MpoWeights {
    pub fn zero() -> Self {
        Self {
            preference: 0.0,
            quality: 0.0,
            generation: 0.0,
            format: 0.0,
            outcome: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.preference, self.quality, self.generation, self.format, self.outcome];
        if w.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(DubError::InvalidArgument("MPO weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// KL penalty coefficient.
    pub beta: f64,
    /// BCO reward shift.
    pub delta: f64,
    /// Divide sequence log-probs by response length before the DPO/BCO terms.
    pub length_normalize: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.0,
            length_normalize: false,
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(DubError::InvalidArgument(format!("beta must be positive, got {beta}")))
    }
}

/// `-log(sigmoid(z))`, stable for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dpo_margin(lp: &PolicyLogProbs, beta: f64) -> f64 {
    beta * lp.chosen_ratio() - beta * lp.rejected_ratio()
}

pub fn dpo_loss(lp: &PolicyLogProbs, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    lp.check()?;
    Ok(neg_log_sigmoid(dpo_margin(lp, beta)))
}

pub fn dpo_loss_grad(lp: &PolicyLogProbs, beta: f64) -> Result<LogProbGrad> {
    check_beta(beta)?;
    lp.check()?;
    // d/dz -log σ(z) = -σ(-z)
    let g = -sigmoid(-dpo_margin(lp, beta)) * beta;
    Ok(LogProbGrad {
        theta_chosen: g,
        ref_chosen: -g,
        theta_rejected: -g,
        ref_rejected: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcoLoss {
    pub chosen: f64,
    pub rejected: f64,
    pub total: f64,
}

pub fn bco_loss(lp: &PolicyLogProbs, beta: f64, delta: f64) -> Result<BcoLoss> {
    check_beta(beta)?;
    lp.check()?;
    ensure_finite("delta", &[delta])?;
    let chosen = neg_log_sigmoid(beta * lp.chosen_ratio() - delta);
    let rejected = neg_log_sigmoid(-(beta * lp.rejected_ratio() - delta));
    Ok(BcoLoss {
        chosen,
        rejected,
        total: chosen + rejected,
    })
}

/// Gradient of the BCO total.
pub fn bco_loss_grad(lp: &PolicyLogProbs, beta: f64, delta: f64) -> Result<LogProbGrad> {
    check_beta(beta)?;
    lp.check()?;
    let zc = beta * lp.chosen_ratio() - delta;
    let zr = beta * lp.rejected_ratio() - delta;
    let gc = -sigmoid(-zc) * beta;
    let gr = sigmoid(zr) * beta;
    Ok(LogProbGrad {
        theta_chosen: gc,
        ref_chosen: -gc,
        theta_rejected: gr,
        ref_rejected: -gr,
    })
}

/// Mean per-token negative log-likelihood of the chosen response.
pub fn gen_loss(lp_theta_chosen: f64, chosen_len: usize) -> Result<f64> {
    if chosen_len == 0 {
        return Err(DubError::InvalidArgument("response length must be at least 1".into()));
    }
    ensure_finite("log-probability", &[lp_theta_chosen])?;
    Ok(-lp_theta_chosen / chosen_len as f64)
}

pub fn gen_loss_grad(chosen_len: usize) -> Result<f64> {
    if chosen_len == 0 {
        return Err(DubError::InvalidArgument("response length must be at least 1".into()));
    }
    Ok(-1.0 / chosen_len as f64)
}

/// The five MPO terms, either for one sample or averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub preference: f64,
    pub quality: f64,
    pub generation: f64,
    pub format: f64,
    pub outcome: f64,
}

impl LossComponents {
    fn as_array(&self) -> [f64; 5] {
        [self.preference, self.quality, self.generation, self.format, self.outcome]
    }

    fn scaled_add(&mut self, other: &LossComponents, s: f64) {
        self.preference += s * other.preference;
        self.quality += s * other.quality;
        self.generation += s * other.generation;
        self.format += s * other.format;
        self.outcome += s * other.outcome;
    }
}

pub fn mpo_total(weights: &MpoWeights, c: &LossComponents) -> Result<f64> {
    ensure_finite("loss components", &c.as_array())?;
    Ok(weights.preference * c.preference
        + weights.quality * c.quality
        + weights.generation * c.generation
        + weights.format * c.format
        + weights.outcome * c.outcome)
}

/// Upstream derivatives pushed into a policy's backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradSeeds {
    /// dL / d log π(response | query)
    pub log_prob: f64,
    /// dL / d p_f
    pub p_format: f64,
    /// dL / d p_o
    pub p_outcome: f64,
}

/// A differentiable policy over structured responses.
pub trait PolicyEvaluator {
    type Query;
    type Response;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn log_prob(&self, query: &Self::Query, response: &Self::Response) -> f64;

    /// Number of decisions ("tokens") in a response.
    fn response_len(&self, response: &Self::Response) -> usize;

    fn reward_probs(&self, query: &Self::Query, response: &Self::Response) -> RewardProbs;

    /// Adds the seeded vector-Jacobian product for one (query, response)
    /// into `grad`.
    fn accumulate_grad(&self, query: &Self::Query, response: &Self::Response, seeds: GradSeeds, grad: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample<Q, R> {
    pub query: Q,
    pub chosen: R,
    pub rejected: R,
    /// Reference-policy log-probabilities, fixed when the pair is built.
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

/// One MPO batch element: a preference pair plus a scored rollout that
/// feeds the format and accuracy terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoItem<Q, R> {
    pub pair: PreferenceSample<Q, R>,
    pub rollout: R,
    pub flags: RewardFlags,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpoStepReport {
    pub total: f64,
    pub components: LossComponents,
    pub grad_norm: f64,
}

/// Mean MPO objective and its gradient over a batch, without updating.
pub fn mpo_objective<P: PolicyEvaluator>(
    policy: &P,
    batch: &[MpoItem<P::Query, P::Response>],
    cfg: &DpoConfig,
    weights: &MpoWeights,
) -> Result<(f64, LossComponents, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DubError::InvalidArgument("MPO batch must be non-empty".into()));
    }
    weights.validate()?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut mean = LossComponents::default();

    for item in batch {
        let pair = &item.pair;
        let len_c = policy.response_len(&pair.chosen);
        let len_r = policy.response_len(&pair.rejected);
        let (norm_c, norm_r) = if cfg.length_normalize {
            (len_c as f64, len_r as f64)
        } else {
            (1.0, 1.0)
        };
        let raw_c = policy.log_prob(&pair.query, &pair.chosen);
        let raw_r = policy.log_prob(&pair.query, &pair.rejected);
        let lp = PolicyLogProbs {
            theta_chosen: raw_c / norm_c,
            ref_chosen: pair.ref_chosen / norm_c,
            theta_rejected: raw_r / norm_r,
            ref_rejected: pair.ref_rejected / norm_r,
            chosen_len: len_c,
        };
        let probs = policy.reward_probs(&pair.query, &item.rollout);
        let c = LossComponents {
            preference: dpo_loss(&lp, cfg.beta)?,
            quality: bco_loss(&lp, cfg.beta, cfg.delta)?.total,
            generation: gen_loss(raw_c, len_c)?,
            format: format_loss(probs.p_f, item.flags.f_true)?,
            outcome: outcome_loss(probs.p_o, item.flags.o_true)?,
        };
        mean.scaled_add(&c, 1.0 / n);

        let gp = dpo_loss_grad(&lp, cfg.beta)?;
        let gq = bco_loss_grad(&lp, cfg.beta, cfg.delta)?;
        let seed_c = (weights.preference * gp.theta_chosen + weights.quality * gq.theta_chosen) / norm_c
            + weights.generation * gen_loss_grad(len_c)?;
        let seed_r = (weights.preference * gp.theta_rejected + weights.quality * gq.theta_rejected) / norm_r;
        let seed_roll = GradSeeds {
            log_prob: 0.0,
            p_format: weights.format * format_loss_grad(probs.p_f, item.flags.f_true),
            p_outcome: weights.outcome * outcome_loss_grad(probs.p_o, item.flags.o_true),
        };
        let scale = 1.0 / n;
        policy.accumulate_grad(
            &pair.query,
            &pair.chosen,
            GradSeeds {
                log_prob: seed_c * scale,
                ..Default::default()
            },
            &mut grad,
        );
        policy.accumulate_grad(
            &pair.query,
            &pair.rejected,
            GradSeeds {
                log_prob: seed_r * scale,
                ..Default::default()
            },
            &mut grad,
        );
        policy.accumulate_grad(
            &pair.query,
            &item.rollout,
            GradSeeds {
                log_prob: 0.0,
                p_format: seed_roll.p_format * scale,
                p_outcome: seed_roll.p_outcome * scale,
            },
            &mut grad,
        );
    }
    let total = mpo_total(weights, &mean)?;
    Ok((total, mean, grad))
}

/// One plain gradient-descent step on the mean MPO objective.
pub fn mpo_step<P: PolicyEvaluator>(
    policy: &mut P,
    batch: &[MpoItem<P::Query, P::Response>],
    cfg: &DpoConfig,
    weights: &MpoWeights,
    learning_rate: f64,
) -> Result<MpoStepReport> {
    let (total, components, grad) = mpo_objective(policy, batch, cfg, weights)?;
    let grad_norm = apply_gradient(policy.params_mut(), &grad, learning_rate);
    Ok(MpoStepReport {
        total,
        components,
        grad_norm,
    })
}

/// Supervised step: gradient descent on the mean per-token NLL of `targets`.
pub fn sft_step<P: PolicyEvaluator>(
    policy: &mut P,
    targets: &[(P::Query, P::Response)],
    learning_rate: f64,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(DubError::InvalidArgument("SFT batch must be non-empty".into()));
    }
    let n = targets.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    for (q, r) in targets {
        let len = policy.response_len(r);
        loss += gen_loss(policy.log_prob(q, r), len)? / n;
        policy.accumulate_grad(
            q,
            r,
            GradSeeds {
                log_prob: gen_loss_grad(len)? / n,
                ..Default::default()
            },
            &mut grad,
        );
    }
    apply_gradient(policy.params_mut(), &grad, learning_rate);
    Ok(loss)
}

fn apply_gradient(params: &mut [f64], grad: &[f64], lr: f64) -> f64 {
    let mut sq = 0.0;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
        sq += g * g;
    }
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn lp(tc: f64, rc: f64, tr: f64, rr: f64) -> PolicyLogProbs {
        PolicyLogProbs {
            theta_chosen: tc,
            ref_chosen: rc,
            theta_rejected: tr,
            ref_rejected: rr,
            chosen_len: 3,
        }
    }

    #[test]
    fn dpo_reference_point_is_ln2() {
        assert_abs_diff_eq!(dpo_loss(&lp(-2.0, -2.0, -3.0, -3.0), 0.7).unwrap(), LN_2, epsilon = 1e-12);
    }

    #[test]
    fn dpo_margin_two() {
        // log-ratio +1 for chosen and -1 for rejected at β = 1: -ln σ(2)
        let v = dpo_loss(&lp(-1.0, -2.0, -3.0, -2.0), 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.126_928_011_042_972_6, epsilon = 1e-9);
        assert!(dpo_loss(&lp(0.0, -800.0, -800.0, 0.0), 1.0).unwrap() < 1e-300);
    }

    #[test]
    fn dpo_rejects_bad_inputs() {
        assert!(dpo_loss(&lp(f64::NAN, 0.0, 0.0, 0.0), 1.0).is_err());
        assert!(dpo_loss(&lp(0.0, 0.0, 0.0, 0.0), 0.0).is_err());
        assert!(bco_loss(&lp(0.0, 0.0, f64::INFINITY, 0.0), 1.0, 0.0).is_err());
    }

    #[test]
    fn dpo_shift_invariance() {
        let a = dpo_loss(&lp(-1.3, -2.1, -0.4, -0.9), 0.5).unwrap();
        let b = dpo_loss(&lp(-1.3 - 4.0, -2.1 - 4.0, -0.4, -0.9), 0.5).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn bco_values() {
        let at_ref = bco_loss(&lp(-1.0, -1.0, -2.0, -2.0), 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(at_ref.chosen, LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(at_ref.rejected, LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(at_ref.total, 2.0 * LN_2, epsilon = 1e-12);
        let dpo = dpo_loss(&lp(-1.0, -1.0, -2.0, -2.0), 1.0).unwrap();
        assert_abs_diff_eq!(at_ref.total, 2.0 * dpo, epsilon = 1e-12);

        let shifted = bco_loss(&lp(-1.0, -1.0, -2.0, -2.0), 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(shifted.chosen, 0.974_076_984_180_107_3, epsilon = 1e-9);
        assert_abs_diff_eq!(shifted.rejected, 0.474_076_984_180_107_3, epsilon = 1e-9);
    }

    #[test]
    fn bco_terms_are_independent() {
        let base = bco_loss(&lp(-1.0, -1.0, -2.0, -2.0), 1.0, 0.2).unwrap();
        let up = bco_loss(&lp(-0.5, -1.0, -2.0, -2.0), 1.0, 0.2).unwrap();
        assert!(up.chosen < base.chosen);
        assert_eq!(up.rejected, base.rejected);
    }

    #[test]
    fn gen_loss_cases() {
        assert_eq!(gen_loss(0.0, 5).unwrap(), 0.0);
        assert_abs_diff_eq!(gen_loss(-LN_2 * 4.0, 4).unwrap(), LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(gen_loss(-3.0, 2).unwrap(), 2.0 * gen_loss(-3.0, 4).unwrap(), epsilon = 1e-12);
        assert!(gen_loss(-1.0, 0).is_err());
    }

    #[test]
    fn mpo_total_cases() {
        let c = LossComponents {
            preference: 1.0,
            quality: 2.0,
            generation: 3.0,
            format: 4.0,
            outcome: 5.0,
        };
        assert_eq!(mpo_total(&MpoWeights::zero(), &c).unwrap(), 0.0);
        assert_eq!(mpo_total(&MpoWeights::default(), &c).unwrap(), 15.0);
        let w = MpoWeights {
            preference: 0.3,
            quality: 1.7,
            generation: 0.2,
            format: 2.5,
            outcome: 0.9,
        };
        let w2 = MpoWeights {
            preference: 0.6,
            quality: 3.4,
            generation: 0.4,
            format: 5.0,
            outcome: 1.8,
        };
        assert_abs_diff_eq!(
            mpo_total(&w2, &c).unwrap(),
            2.0 * mpo_total(&w, &c).unwrap(),
            epsilon = 1e-12
        );
        assert!(MpoWeights { quality: -1.0, ..MpoWeights::default() }.validate().is_err());
    }

    #[test]
    fn dpo_gradient_signs() {
        let g = dpo_loss_grad(&lp(-1.0, -1.5, -2.0, -0.5), 0.3).unwrap();
        assert!(g.theta_chosen < 0.0 && g.theta_rejected > 0.0);
    }
}
