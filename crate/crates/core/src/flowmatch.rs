//! Conditional flow matching for action chunks: a linear path for
//! translation and gripper, a spherical path on S³ for rotation.
//!
//! The noisy chunk at flow time τ interpolates from noise (τ = 0) to the
//! clean chunk (τ = 1). The regression target is the τ-derivative of that
//! path. Inference integrates a velocity field from noise with Euler steps,
//! in R³ for translation and on the manifold for rotation.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{
    self, dot4, integrate_quat, norm4, sample_uniform_quat, slerp, sub3, sub4, Quat4, Quaternion,
    Vec3,
};

/// Below this `sin θ` the rotation field uses its θ → 0 limit.
const FIELD_SIN_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: expected {expected} steps, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("integration step leaves the unit interval: tau {tau} + delta {delta} > 1")]
    InvalidStep { tau: f64, delta: f64 },
    #[error("action chunk must hold at least one action")]
    EmptyChunk,
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
}

/// One action: translation delta, rotation delta, gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub x: Vec3,
    pub q: Quaternion,
    pub g: f64,
}

impl Action {
    pub const IDENTITY: Action = Action {
        x: [0.0; 3],
        q: Quaternion::IDENTITY,
        g: 0.0,
    };
}

/// A horizon-H sequence of actions, `H >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Action>", into = "Vec<Action>")]
pub struct ActionChunk {
    actions: Vec<Action>,
}

impl TryFrom<Vec<Action>> for ActionChunk {
    type Error = FlowError;
    fn try_from(actions: Vec<Action>) -> Result<Self, FlowError> {
        ActionChunk::new(actions)
    }
}

impl From<ActionChunk> for Vec<Action> {
    fn from(c: ActionChunk) -> Self {
        c.actions
    }
}

impl ActionChunk {
    pub const DEFAULT_HORIZON: usize = 5;

    pub fn new(actions: Vec<Action>) -> Result<Self, FlowError> {
        if actions.is_empty() {
            return Err(FlowError::EmptyChunk);
        }
        Ok(Self { actions })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn actions_mut(&mut self) -> &mut [Action] {
        &mut self.actions
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Action> {
        self.actions.iter()
    }
}

/// Field values for one chunk step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldStep {
    pub u_x: Vec3,
    pub u_q: Quat4,
    pub u_g: f64,
}

/// Per-step velocity field over a chunk.
pub type FieldTarget = Vec<FieldStep>;

/// Which rotation terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationLosses {
    /// Squared error between predicted and target rotation velocity.
    pub mse: bool,
    pub cosine: bool,
    /// Normalize both velocities before the cosine dot product.
    pub cosine_normalized: bool,
    pub geodesic: bool,
    pub chordal: bool,
}

impl Default for RotationLosses {
    fn default() -> Self {
        Self {
            mse: false,
            cosine: true,
            cosine_normalized: false,
            geodesic: true,
            chordal: false,
        }
    }
}

impl RotationLosses {
    pub fn any(&self) -> bool {
        self.mse || self.cosine || self.geodesic || self.chordal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmConfig {
    /// Beta(alpha, beta) shape of the training-time τ distribution.
    pub alpha: f64,
    pub beta: f64,
    /// Lower bound of the geodesic-loss integration step δ.
    pub delta_min: f64,
    /// Uniform Euler steps at inference.
    pub steps: usize,
    pub losses: RotationLosses,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 1.0,
            delta_min: 0.01,
            steps: 10,
            losses: RotationLosses::default(),
        }
    }
}

impl FmConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.delta_min > 0.0 && self.delta_min < 1.0) {
            return bad("delta_min must lie in (0, 1)");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        Ok(())
    }
}

/// A noised chunk together with the clean chunk and noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub chunk: ActionChunk,
    pub tau: f64,
    pub clean: ActionChunk,
    pub eps: ActionChunk,
}

pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R, cfg: &FmConfig) -> f64 {
    let beta = Beta::new(cfg.alpha, cfg.beta).expect("validated beta parameters");
    beta.sample(rng).clamp(0.0, 1.0)
}

/// Draws δ ~ U(delta_min, 1 − τ). When that interval is empty the step
/// runs to the end of the path, δ = 1 − τ.
pub fn sample_delta<R: Rng + ?Sized>(rng: &mut R, tau: f64, cfg: &FmConfig) -> f64 {
    let hi = 1.0 - tau;
    if hi <= cfg.delta_min {
        return hi.max(0.0);
    }
    Uniform::new(cfg.delta_min, hi)
        .expect("non-empty interval")
        .sample(rng)
}

/// Noise chunk: Gaussian translation and gripper, uniform rotation.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, horizon: usize) -> Result<ActionChunk, FlowError> {
    let actions = (0..horizon)
        .map(|_| {
            let x = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let q = sample_uniform_quat(rng);
            let g = rng.sample(StandardNormal);
            Action { x, q, g }
        })
        .collect();
    ActionChunk::new(actions)
}

/// The point at flow time τ on the path from `eps` to `clean`.
pub fn interpolate(clean: &ActionChunk, eps: &ActionChunk, tau: f64) -> Result<ActionChunk, FlowError> {
    check_len(clean.horizon(), eps.horizon())?;
    let actions = clean
        .iter()
        .zip(eps.iter())
        .map(|(c, e)| Action {
            x: [
                tau * c.x[0] + (1.0 - tau) * e.x[0],
                tau * c.x[1] + (1.0 - tau) * e.x[1],
                tau * c.x[2] + (1.0 - tau) * e.x[2],
            ],
            q: slerp(&e.q, &c.q, tau),
            g: tau * c.g + (1.0 - tau) * e.g,
        })
        .collect();
    ActionChunk::new(actions)
}

pub fn make_noisy_at(clean: &ActionChunk, eps: ActionChunk, tau: f64) -> Result<NoisySample, FlowError> {
    let chunk = interpolate(clean, &eps, tau)?;
    Ok(NoisySample {
        chunk,
        tau,
        clean: clean.clone(),
        eps,
    })
}

/// Draws one τ for the whole chunk and fresh noise, then interpolates.
pub fn make_noisy<R: Rng + ?Sized>(
    clean: &ActionChunk,
    rng: &mut R,
    cfg: &FmConfig,
) -> Result<NoisySample, FlowError> {
    let tau = sample_tau(rng, cfg);
    let eps = sample_noise(rng, clean.horizon())?;
    make_noisy_at(clean, eps, tau)
}

pub fn target_field_translation(clean_x: Vec3, eps_x: Vec3) -> Vec3 {
    sub3(clean_x, eps_x)
}

/// τ-derivative of the spherical path:
/// `θ / sin θ · (−cos((1−τ)θ) q_eps + cos(τθ) q_t)`.
pub fn target_field_rotation(clean_q: &Quaternion, eps_q: &Quaternion, tau: f64) -> Quat4 {
    let d = eps_q.dot(clean_q);
    let theta = d.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    if s < FIELD_SIN_EPS && d > 0.0 {
        return sub4(clean_q.to_array(), eps_q.to_array());
    }
    let k = theta / s;
    so3::lincomb4(
        -k * ((1.0 - tau) * theta).cos(),
        eps_q.to_array(),
        k * (tau * theta).cos(),
        clean_q.to_array(),
    )
}

pub fn target_fields(sample: &NoisySample) -> FieldTarget {
    sample
        .clean
        .iter()
        .zip(sample.eps.iter())
        .map(|(c, e)| FieldStep {
            u_x: target_field_translation(c.x, e.x),
            u_q: target_field_rotation(&c.q, &e.q, sample.tau),
            u_g: c.g - e.g,
        })
        .collect()
}

fn check_len(expected: usize, got: usize) -> Result<(), FlowError> {
    if expected != got {
        return Err(FlowError::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// Sum over the chunk of squared Euclidean errors.
pub fn loss_translation(pred: &[Vec3], target: &[Vec3]) -> Result<f64, FlowError> {
    check_len(target.len(), pred.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = sub3(*p, *t);
            so3::dot3(d, d)
        })
        .sum())
}

/// Gripper counterpart of [`loss_translation`].
pub fn loss_gripper(pred: &[f64], target: &[f64]) -> Result<f64, FlowError> {
    check_len(target.len(), pred.len())?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// `1 − v · u` on the raw velocities.
pub fn loss_cosine(pred_vq: Quat4, target_uq: Quat4) -> f64 {
    1.0 - dot4(pred_vq, target_uq)
}

/// `1 − v̂ · û`. Zero-length vectors contribute a loss of 1.
pub fn loss_cosine_normalized(pred_vq: Quat4, target_uq: Quat4) -> f64 {
    let (np, nt) = (norm4(pred_vq), norm4(target_uq));
    if np < 1e-12 || nt < 1e-12 {
        return 1.0;
    }
    1.0 - dot4(pred_vq, target_uq) / (np * nt)
}

pub fn loss_rotation_mse(pred_vq: Quat4, target_uq: Quat4) -> f64 {
    let d = sub4(pred_vq, target_uq);
    dot4(d, d)
}

/// Rotation at τ + δ predicted by integrating `pred_vq` from the noisy rotation.
pub fn predicted_rotation(noisy_q: &Quaternion, pred_vq: Quat4, delta: f64) -> Quaternion {
    integrate_quat(noisy_q, pred_vq, delta)
}

fn sign_min_distance(a: Quat4, b: Quat4) -> f64 {
    let m = norm4(sub4(a, b));
    let p = norm4(so3::add4(a, b));
    m.min(p)
}

fn check_step(tau: f64, delta: f64) -> Result<(), FlowError> {
    if tau + delta > 1.0 + 1e-12 || delta < 0.0 {
        return Err(FlowError::InvalidStep { tau, delta });
    }
    Ok(())
}

/// `min |q_target ± q_pred|` between the path rotation at τ + δ and the
/// rotation integrated from the prediction.
pub fn loss_geodesic(
    noisy_q: &Quaternion,
    pred_vq: Quat4,
    clean_q: &Quaternion,
    eps_q: &Quaternion,
    tau: f64,
    delta: f64,
) -> Result<f64, FlowError> {
    check_step(tau, delta)?;
    let target = slerp(eps_q, clean_q, (tau + delta).min(1.0));
    let pred = predicted_rotation(noisy_q, pred_vq, delta);
    Ok(sign_min_distance(target.to_array(), pred.to_array()))
}

/// Squared-distance (chordal) variant of [`loss_geodesic`].
pub fn loss_chordal(
    noisy_q: &Quaternion,
    pred_vq: Quat4,
    clean_q: &Quaternion,
    eps_q: &Quaternion,
    tau: f64,
    delta: f64,
) -> Result<f64, FlowError> {
    let d = loss_geodesic(noisy_q, pred_vq, clean_q, eps_q, tau, delta)?;
    Ok(d * d)
}

/// Per-term breakdown of [`total_loss`]. Disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Translation plus gripper squared error.
    pub r3: f64,
    pub rot_mse: f64,
    pub cos: f64,
    pub geo: f64,
    pub chordal: f64,
}

/// Linear-space loss plus the enabled rotation terms, summed over the chunk.
pub fn total_loss(
    pred: &[FieldStep],
    sample: &NoisySample,
    delta: f64,
    cfg: &FmConfig,
) -> Result<LossBreakdown, FlowError> {
    let h = sample.clean.horizon();
    check_len(h, pred.len())?;
    check_len(h, sample.chunk.horizon())?;
    check_len(h, sample.eps.horizon())?;
    check_step(sample.tau, delta)?;
    let target = target_fields(sample);
    let mut out = LossBreakdown::default();
    let px: Vec<Vec3> = pred.iter().map(|p| p.u_x).collect();
    let tx: Vec<Vec3> = target.iter().map(|t| t.u_x).collect();
    let pg: Vec<f64> = pred.iter().map(|p| p.u_g).collect();
    let tg: Vec<f64> = target.iter().map(|t| t.u_g).collect();
    out.r3 = loss_translation(&px, &tx)? + loss_gripper(&pg, &tg)?;

    let l = &cfg.losses;
    for k in 0..h {
        let (p, t) = (&pred[k], &target[k]);
        let noisy_q = sample.chunk.actions()[k].q;
        let (clean_q, eps_q) = (sample.clean.actions()[k].q, sample.eps.actions()[k].q);
        if l.mse {
            out.rot_mse += loss_rotation_mse(p.u_q, t.u_q);
        }
        if l.cosine {
            out.cos += if l.cosine_normalized {
                loss_cosine_normalized(p.u_q, t.u_q)
            } else {
                loss_cosine(p.u_q, t.u_q)
            };
        }
        if l.geodesic || l.chordal {
            let d = loss_geodesic(&noisy_q, p.u_q, &clean_q, &eps_q, sample.tau, delta)?;
            if l.geodesic {
                out.geo += d;
            }
            if l.chordal {
                out.chordal += d * d;
            }
        }
    }
    out.total = out.r3 + out.rot_mse + out.cos + out.geo + out.chordal;
    Ok(out)
}

pub fn euler_step_translation(x: Vec3, v: Vec3, delta: f64) -> Vec3 {
    [x[0] + delta * v[0], x[1] + delta * v[1], x[2] + delta * v[2]]
}

pub fn euler_step_rotation(q: &Quaternion, vq: Quat4, delta: f64) -> Quaternion {
    integrate_quat(q, vq, delta)
}

/// A velocity field over noisy chunks, conditioned on an observation vector.
pub trait VelocityField {
    type Error: From<FlowError>;

    fn velocity(&self, noisy: &ActionChunk, tau: f64, obs: &[f64]) -> Result<FieldTarget, Self::Error>;
}

/// Integrates `model` from noise at τ = 0 to τ = 1 with `cfg.steps`
/// uniform Euler steps, then clamps the gripper into `[0, 1]`.
pub fn generate<M, R>(
    model: &M,
    obs: &[f64],
    horizon: usize,
    cfg: &FmConfig,
    rng: &mut R,
) -> Result<ActionChunk, M::Error>
where
    M: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let start = sample_noise(rng, horizon)?;
    integrate_from(model, start, obs, cfg.steps)
}

/// Deterministic part of [`generate`]: Euler integration from a given start chunk.
pub fn integrate_from<M>(
    model: &M,
    start: ActionChunk,
    obs: &[f64],
    steps: usize,
) -> Result<ActionChunk, M::Error>
where
    M: VelocityField + ?Sized,
{
    let mut chunk = start;
    let delta = 1.0 / steps as f64;
    for i in 0..steps {
        let tau = i as f64 * delta;
        let field = model.velocity(&chunk, tau, obs)?;
        check_len(chunk.horizon(), field.len())?;
        for (a, f) in chunk.actions_mut().iter_mut().zip(&field) {
            a.x = euler_step_translation(a.x, f.u_x, delta);
            a.g += delta * f.u_g;
            a.q = euler_step_rotation(&a.q, f.u_q, delta);
        }
    }
    for a in chunk.actions_mut() {
        a.g = a.g.clamp(0.0, 1.0);
    }
    Ok(chunk)
}

/// Oracle field for a fixed target chunk: from any state, the velocity that
/// reaches the target at τ = 1 along the straight line (translation,
/// gripper) or the geodesic (rotation).
#[derive(Debug, Clone)]
pub struct TargetField {
    pub target: ActionChunk,
}

impl VelocityField for TargetField {
    type Error = FlowError;

    fn velocity(&self, noisy: &ActionChunk, tau: f64, _obs: &[f64]) -> Result<FieldTarget, FlowError> {
        check_len(self.target.horizon(), noisy.horizon())?;
        let remaining = (1.0 - tau).max(1e-12);
        Ok(self
            .target
            .iter()
            .zip(noisy.iter())
            .map(|(t, n)| FieldStep {
                u_x: so3::scale3(sub3(t.x, n.x), 1.0 / remaining),
                // The geodesic from the current state that arrives at τ = 1.
                u_q: so3::scale4(target_field_rotation(&t.q, &n.q, 0.0), 1.0 / remaining),
                u_g: (t.g - n.g) / remaining,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::geodesic_angle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn chunk_of(xs: &[Vec3]) -> ActionChunk {
        ActionChunk::new(
            xs.iter()
                .map(|x| Action {
                    x: *x,
                    q: Quaternion::from_axis_angle([0.0, 0.0, 1.0], x[0]),
                    g: 0.5,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_tau_means() {
        for (alpha, beta, mean) in [(1.0, 1.0, 0.5), (1.5, 1.0, 0.6)] {
            let cfg = FmConfig {
                alpha,
                beta,
                ..FmConfig::default()
            };
            let mut r = rng(11);
            let n = 1_000_000;
            let m: f64 = (0..n).map(|_| sample_tau(&mut r, &cfg)).sum::<f64>() / n as f64;
            assert!((m - mean).abs() < 0.002, "{m} vs {mean}");
        }
        let cfg = FmConfig::default();
        let a: Vec<f64> = (0..10).map({
            let mut r = rng(3);
            move |_| sample_tau(&mut r, &cfg)
        }).collect();
        let b: Vec<f64> = (0..10).map({
            let mut r = rng(3);
            move |_| sample_tau(&mut r, &cfg)
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn make_noisy_endpoints_and_midpoint() {
        let clean = chunk_of(&[[1.0, 1.0, 1.0], [0.2, -0.3, 0.1]]);
        let eps = sample_noise(&mut rng(5), 2).unwrap();
        assert_eq!(make_noisy_at(&clean, eps.clone(), 1.0).unwrap().chunk, clean);
        assert_eq!(make_noisy_at(&clean, eps.clone(), 0.0).unwrap().chunk, eps);
        let mut eps2 = eps.clone();
        eps2.actions_mut()[0].x = [-1.0, -1.0, -1.0];
        let mid = make_noisy_at(&clean, eps2, 0.5).unwrap();
        assert_eq!(mid.chunk.actions()[0].x, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn make_noisy_shares_one_tau() {
        let clean = chunk_of(&[[0.1, 0.0, 0.0]; 5]);
        let s = make_noisy(&clean, &mut rng(8), &FmConfig::default()).unwrap();
        for ((n, c), e) in s.chunk.iter().zip(s.clean.iter()).zip(s.eps.iter()) {
            for i in 0..3 {
                let expect = s.tau * c.x[i] + (1.0 - s.tau) * e.x[i];
                assert!((n.x[i] - expect).abs() < 1e-12);
            }
            assert!(geodesic_angle(&n.q, &slerp(&e.q, &c.q, s.tau)) < 1e-9);
        }
    }

    #[test]
    fn translation_field_examples() {
        assert_eq!(target_field_translation([0.3, 0.2, 0.1], [0.3, 0.2, 0.1]), [0.0; 3]);
        assert_eq!(target_field_translation([1.0, 0.0, 0.0], [0.0; 3]), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn rotation_field_zero_for_coincident_endpoints() {
        let q = Quaternion::from_axis_angle([1.0, -2.0, 0.5], 0.9);
        let u = target_field_rotation(&q, &q, 0.4);
        assert!(norm4(u) < 1e-9);
    }

    #[test]
    fn rotation_field_near_half_turn_closed_form() {
        // Identity to (180° − ε) about z: θ = acos(cos(90° − ε/2)).
        let eps_angle = 1e-3;
        let qt = Quaternion::from_axis_angle([0.0, 0.0, 1.0], PI - eps_angle);
        let theta = (PI - eps_angle) / 2.0;
        let u = target_field_rotation(&qt, &Quaternion::IDENTITY, 0.5);
        // At τ = 0.5 the two cosines are equal: |u| = θ/sinθ · cos(θ/2) · |q_t − q_eps|.
        let chord = norm4(sub4(qt.to_array(), [1.0, 0.0, 0.0, 0.0]));
        let expect = theta / theta.sin() * (0.5 * theta).cos() * chord;
        assert!((norm4(u) - expect).abs() < 1e-12);
        // The speed of a unit-sphere geodesic equals θ everywhere.
        assert!((norm4(u) - theta).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let t = [[0.5, 0.5, 0.5]];
        assert_eq!(loss_translation(&t, &t).unwrap(), 0.0);
        assert_eq!(loss_translation(&[[1.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap(), 1.0);
        assert_eq!(loss_translation(&[[1.0, 2.0, 2.0]], &[[0.0; 3]]).unwrap(), 9.0);
        assert!(matches!(
            loss_translation(&[[0.0; 3]], &[]),
            Err(FlowError::ShapeMismatch { .. })
        ));
        let e = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(loss_cosine(e, e), 0.0);
        assert_eq!(loss_cosine([0.0, -1.0, 0.0, 0.0], e), 2.0);
        assert_eq!(loss_cosine([1.0, 0.0, 0.0, 0.0], e), 1.0);
        let u = [0.3, -0.2, 0.7, 0.1];
        assert!(loss_cosine_normalized(u, u).abs() < 1e-12);
    }

    #[test]
    fn geodesic_loss_examples() {
        let mut r = rng(21);
        let clean = sample_uniform_quat(&mut r);
        let eps = sample_uniform_quat(&mut r);
        let (tau, delta) = (0.3, 0.01);
        let noisy = slerp(&eps, &clean, tau);
        let u = target_field_rotation(&clean, &eps, tau);
        assert!(loss_geodesic(&noisy, u, &clean, &eps, tau, delta).unwrap() < 1e-6);

        let drift = loss_geodesic(&noisy, [0.0; 4], &clean, &eps, tau, delta).unwrap();
        let a = slerp(&eps, &clean, tau + delta).to_array();
        let b = noisy.to_array();
        let expect = norm4(sub4(a, b)).min(norm4(so3::add4(a, b)));
        assert!((drift - expect).abs() < 1e-15);

        assert!(sign_min_distance(a, so3::scale4(a, -1.0)) == 0.0);
        assert!(matches!(
            loss_geodesic(&noisy, u, &clean, &eps, 0.9, 0.2),
            Err(FlowError::InvalidStep { .. })
        ));
    }

    #[test]
    fn total_loss_quadratic_in_translation_error() {
        let clean = chunk_of(&[[0.1, 0.2, 0.3], [0.0, -0.1, 0.2]]);
        let s = make_noisy_at(&clean, sample_noise(&mut rng(2), 2).unwrap(), 0.4).unwrap();
        let exact = target_fields(&s);
        let cfg = FmConfig::default();
        let base = total_loss(&exact, &s, 0.05, &cfg).unwrap();
        let shift = |k: f64| {
            let mut p = exact.clone();
            p[0].u_x[1] += k;
            total_loss(&p, &s, 0.05, &cfg).unwrap()
        };
        let (one, two) = (shift(0.1), shift(0.2));
        assert!(((two.r3 - base.r3) / (one.r3 - base.r3) - 4.0).abs() < 1e-9);
        assert_eq!(one.cos, base.cos);
        assert_eq!(two.geo, base.geo);
    }

    #[test]
    fn euler_translation_examples() {
        let x = [0.4, -0.1, 2.0];
        assert_eq!(euler_step_translation(x, [0.0; 3], 0.3), x);
        assert_eq!(euler_step_translation([0.0; 3], [1.0, 0.0, 0.0], 0.1), [0.1, 0.0, 0.0]);
        let v = [0.5, -1.0, 0.25];
        let mut y = x;
        for _ in 0..10 {
            y = euler_step_translation(y, v, 0.1);
        }
        for i in 0..3 {
            assert!((y[i] - (x[i] + v[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_rotation_zero_velocity() {
        let q = Quaternion::from_axis_angle([0.0, 1.0, 1.0], 2.0);
        assert_eq!(euler_step_rotation(&q, [0.0; 4], 0.1), q);
    }

    #[test]
    fn generate_is_deterministic() {
        let target = chunk_of(&[[0.3, 0.1, -0.2]; 3]);
        let model = TargetField { target };
        let cfg = FmConfig::default();
        let a = generate(&model, &[], 3, &cfg, &mut rng(4)).unwrap();
        let b = generate(&model, &[], 3, &cfg, &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_chunk_rejected() {
        assert_eq!(ActionChunk::new(vec![]), Err(FlowError::EmptyChunk));
    }
}
