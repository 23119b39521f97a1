//! Optimal-transport conditional flow matching.
//!
//! Path: `x_τ = (1 - (1 - σ_min) τ) x0 + τ x1` with constant target
//! velocity `u = x1 - (1 - σ_min) x0`, `τ ~ U[0, 1]`, `x0 ~ N(0, I)`.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditions::{dropout_conditions, DubbingConditions};
use crate::duration::{duration_loss, duration_loss_grad, DurationPredictor};
use crate::error::{DubError, Result};

/// Frames × coefficients feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeq {
    pub frames: Array2<f64>,
    /// Seconds per frame.
    pub frame_hop: f64,
}

impl FeatureSeq {
    pub fn new(frames: Array2<f64>, frame_hop: f64) -> Result<Self> {
        let s = Self { frames, frame_hop };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.nrows() == 0 || self.frames.ncols() == 0 {
            return Err(DubError::Invariant("feature sequence needs F >= 1 and D >= 1".into()));
        }
        if !(self.frame_hop.is_finite() && self.frame_hop > 0.0) {
            return Err(DubError::Invariant("frame hop must be positive".into()));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(DubError::Invariant("feature values must be finite".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 * self.frame_hop
    }

    pub fn frame_mean(&self) -> Vec<f64> {
        let f = self.num_frames() as f64;
        self.frames.sum_axis(ndarray::Axis(0)).iter().map(|v| v / f).collect()
    }

    pub fn frame_std(&self) -> Vec<f64> {
        let mean = self.frame_mean();
        let f = self.num_frames() as f64;
        self.frames
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(col, m)| (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub tau: f64,
    pub x_tau: Array2<f64>,
    pub u_target: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            ode_steps: 32,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(DubError::InvalidArgument("sigma_min must lie in [0, 1)".into()));
        }
        if self.ode_steps == 0 {
            return Err(DubError::InvalidArgument("ode_steps must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn sample_ot_path(x0: &Array2<f64>, x1: &Array2<f64>, tau: f64, sigma_min: f64) -> Result<PathSample> {
    if x0.dim() != x1.dim() {
        return Err(DubError::Shape(format!("x0 is {:?} but x1 is {:?}", x0.dim(), x1.dim())));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(DubError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * tau;
    let c = 1.0 - sigma_min;
    let x_tau = Zip::from(x0).and(x1).map_collect(|&a0, &b1| a * a0 + tau * b1);
    let u_target = Zip::from(x0).and(x1).map_collect(|&a0, &b1| b1 - c * a0);
    Ok(PathSample { tau, x_tau, u_target })
}

/// A velocity field `v(x, τ; conditions)` over F × D feature matrices.
///
/// Implementations must accept ϕ in every condition slot.
pub trait VelocityModel {
    fn feature_dim(&self) -> usize;

    fn evaluate(&self, x: &Array2<f64>, tau: f64, conds: &DubbingConditions) -> Result<Array2<f64>>;
}

/// A velocity model with a flat parameter vector and a reverse-mode pass.
pub trait TrainableVelocity: VelocityModel {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Adds `Σ grad_out ⊙ ∂v/∂θ` into `grad`.
    fn backward(
        &self,
        x: &Array2<f64>,
        tau: f64,
        conds: &DubbingConditions,
        grad_out: &Array2<f64>,
        grad: &mut [f64],
    ) -> Result<()>;
}

/// Random draws behind one CFM term: time and source noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmDraw {
    pub tau: f64,
    pub x0: Array2<f64>,
}

impl CfmDraw {
    pub fn sample<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Self {
        let tau = rng.gen::<f64>();
        let x0 = Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
        Self { tau, x0 }
    }
}

fn check_batch(x1: &[FeatureSeq], conds: &[DubbingConditions], draws: &[CfmDraw]) -> Result<()> {
    if x1.is_empty() {
        return Err(DubError::InvalidArgument("CFM batch must be non-empty".into()));
    }
    if x1.len() != conds.len() || x1.len() != draws.len() {
        return Err(DubError::Shape(format!(
            "batch sizes differ: {} targets, {} conditions, {} draws",
            x1.len(),
            conds.len(),
            draws.len()
        )));
    }
    Ok(())
}

/// CFM loss and (optionally) parameter gradient for fixed draws.
pub fn cfm_loss_with_draws<M: VelocityModel + ?Sized>(
    model: &M,
    x1: &[FeatureSeq],
    conds: &[DubbingConditions],
    draws: &[CfmDraw],
    sigma_min: f64,
) -> Result<f64> {
    check_batch(x1, conds, draws)?;
    let n = x1.len() as f64;
    let mut total = 0.0;
    for ((target, c), d) in x1.iter().zip(conds).zip(draws) {
        let path = sample_ot_path(&d.x0, &target.frames, d.tau, sigma_min)?;
        let v = model.evaluate(&path.x_tau, d.tau, c)?;
        if v.dim() != path.u_target.dim() {
            return Err(DubError::Shape("velocity model changed the feature shape".into()));
        }
        let mse = Zip::from(&v).and(&path.u_target).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) / v.len() as f64;
        total += mse / n;
    }
    Ok(total)
}

pub fn cfm_loss_grad_with_draws<M: TrainableVelocity + ?Sized>(
    model: &M,
    x1: &[FeatureSeq],
    conds: &[DubbingConditions],
    draws: &[CfmDraw],
    sigma_min: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_batch(x1, conds, draws)?;
    let n = x1.len() as f64;
    let mut total = 0.0;
    for ((target, c), d) in x1.iter().zip(conds).zip(draws) {
        let path = sample_ot_path(&d.x0, &target.frames, d.tau, sigma_min)?;
        let v = model.evaluate(&path.x_tau, d.tau, c)?;
        let scale = 1.0 / (v.len() as f64 * n);
        let residual = &v - &path.u_target;
        total += residual.iter().map(|r| r * r).sum::<f64>() * scale;
        let grad_out = residual.mapv(|r| 2.0 * r * scale);
        model.backward(&path.x_tau, d.tau, c, &grad_out, grad)?;
    }
    Ok(total)
}

/// Monte-Carlo CFM loss; draws one `(τ, x0)` per item from `rng`.
pub fn cfm_loss<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x1: &[FeatureSeq],
    conds: &[DubbingConditions],
    sigma_min: f64,
    rng: &mut R,
) -> Result<f64> {
    let draws: Vec<CfmDraw> = x1.iter().map(|t| CfmDraw::sample(t.frames.dim(), rng)).collect();
    cfm_loss_with_draws(model, x1, conds, &draws, sigma_min)
}

/// One training example for the multi-condition objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Example {
    pub target: FeatureSeq,
    /// Full conditions; dropout is applied to the generator's copy only.
    pub conds: DubbingConditions,
    pub true_duration_s: f64,
}

/// Draws for one stage-2 term: the dropped-out conditions plus CFM noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Draw {
    pub conds: DubbingConditions,
    pub cfm: CfmDraw,
}

impl Stage2Draw {
    pub fn sample<R: Rng + ?Sized>(ex: &Stage2Example, dropout_p: f64, rng: &mut R) -> Result<Self> {
        let conds = dropout_conditions(&ex.conds, dropout_p, rng)?;
        let cfm = CfmDraw::sample(ex.target.frames.dim(), rng);
        Ok(Self { conds, cfm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub total: f64,
    pub cfm: f64,
    pub duration: f64,
}

/// `cfm + duration` for fixed draws, with gradients for the velocity
/// model (`model_grad`) and the duration predictor (`dur_grad`).
pub fn stage2_loss_with_draws<M: TrainableVelocity + ?Sized>(
    model: &M,
    predictor: &DurationPredictor,
    batch: &[Stage2Example],
    draws: &[Stage2Draw],
    sigma_min: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<Stage2Loss> {
    if batch.len() != draws.len() {
        return Err(DubError::Shape("one draw per example required".into()));
    }
    let x1: Vec<FeatureSeq> = batch.iter().map(|e| e.target.clone()).collect();
    let conds: Vec<DubbingConditions> = draws.iter().map(|d| d.conds.clone()).collect();
    let cfm_draws: Vec<CfmDraw> = draws.iter().map(|d| d.cfm.clone()).collect();
    let n = batch.len() as f64;
    match grads {
        Some((model_grad, dur_grad)) => {
            let cfm = cfm_loss_grad_with_draws(model, &x1, &conds, &cfm_draws, sigma_min, model_grad)?;
            let mut duration = 0.0;
            for ex in batch {
                let visual = ex.conds.visual.as_ref().ok_or_else(|| {
                    DubError::InvalidArgument("duration predictor needs visual features".into())
                })?;
                let feats = predictor.features(visual, ex.conds.conclusion.as_ref())?;
                let pred = predictor.predict_seconds_from_features(&feats);
                duration += duration_loss(pred, ex.true_duration_s)? / n;
                let g = duration_loss_grad(pred, ex.true_duration_s)? / n;
                // d pred / d w = pred · features, and dL/dpred = g
                for (dg, f) in dur_grad.iter_mut().zip(&feats) {
                    *dg += g * pred * f;
                }
            }
            Ok(Stage2Loss {
                total: cfm + duration,
                cfm,
                duration,
            })
        }
        None => {
            let cfm = cfm_loss_with_draws(model, &x1, &conds, &cfm_draws, sigma_min)?;
            let mut duration = 0.0;
            for ex in batch {
                let visual = ex.conds.visual.as_ref().ok_or_else(|| {
                    DubError::InvalidArgument("duration predictor needs visual features".into())
                })?;
                let pred = predictor.predict_seconds(visual, ex.conds.conclusion.as_ref())?;
                duration += duration_loss(pred, ex.true_duration_s)? / n;
            }
            Ok(Stage2Loss {
                total: cfm + duration,
                cfm,
                duration,
            })
        }
    }
}

/// Stage-2 objective with dropout and CFM noise drawn from `rng`.
pub fn stage2_loss<M: TrainableVelocity + ?Sized, R: Rng + ?Sized>(
    model: &M,
    predictor: &DurationPredictor,
    batch: &[Stage2Example],
    dropout_p: f64,
    sigma_min: f64,
    rng: &mut R,
) -> Result<Stage2Loss> {
    let draws = batch
        .iter()
        .map(|ex| Stage2Draw::sample(ex, dropout_p, rng))
        .collect::<Result<Vec<_>>>()?;
    stage2_loss_with_draws(model, predictor, batch, &draws, sigma_min, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_endpoints() {
        let x0 = array![[0.3, -1.0], [2.0, 0.5]];
        let x1 = array![[1.0, 1.0], [-1.0, 4.0]];
        let p0 = sample_ot_path(&x0, &x1, 0.0, 0.1).unwrap();
        assert_eq!(p0.x_tau, x0);
        let p1 = sample_ot_path(&x0, &x1, 1.0, 0.0).unwrap();
        assert_eq!(p1.x_tau, x1);
        assert_eq!(p1.u_target, &x1 - &x0);
    }

    #[test]
    fn path_hand_value() {
        let p = sample_ot_path(&array![[0.0]], &array![[2.0]], 0.25, 0.1).unwrap();
        assert!((p.x_tau[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((p.u_target[[0, 0]] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn path_rejects_shape_mismatch() {
        assert!(sample_ot_path(&array![[0.0]], &array![[1.0, 2.0]], 0.5, 0.0).is_err());
        assert!(sample_ot_path(&array![[0.0]], &array![[1.0]], 1.5, 0.0).is_err());
    }

    #[test]
    fn feature_seq_invariants() {
        assert!(FeatureSeq::new(Array2::zeros((0, 3)), 0.01).is_err());
        assert!(FeatureSeq::new(array![[f64::NAN]], 0.01).is_err());
        let s = FeatureSeq::new(array![[1.0, 2.0], [3.0, 6.0]], 0.5).unwrap();
        assert_eq!(s.frame_mean(), vec![2.0, 4.0]);
        assert_eq!(s.frame_std(), vec![1.0, 2.0]);
        assert_eq!(s.duration_s(), 1.0);
    }

    #[test]
    fn flow_config_validation() {
        assert!(FlowConfig::default().validate().is_ok());
        assert!(FlowConfig { sigma_min: 1.0, ode_steps: 4 }.validate().is_err());
        assert!(FlowConfig { sigma_min: 0.0, ode_steps: 0 }.validate().is_err());
    }

    #[test]
    fn target_velocity_constant_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = CfmDraw::sample((3, 2), &mut rng).x0;
        let x1 = CfmDraw::sample((3, 2), &mut rng).x0;
        let u0 = sample_ot_path(&x0, &x1, 0.0, 1e-4).unwrap().u_target;
        for i in 1..=10 {
            let u = sample_ot_path(&x0, &x1, i as f64 / 10.0, 1e-4).unwrap().u_target;
            assert_eq!(u, u0);
        }
    }
}
