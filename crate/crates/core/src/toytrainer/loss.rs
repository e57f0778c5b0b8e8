//! Training losses on network outputs and their gradients.
//!
//! Everything here works on flat per-example vectors so that the same code
//! serves both the spherical rotation path and the linear (R⁴) ablation path.

use serde::{Deserialize, Serialize};

use super::mlp::{backward, chunk_features, encode_input, forward_raw, DenoiserParams, ACTION_DIM};
use super::TrainError;
use crate::flowmatch::{target_fields, LossBreakdown, NoisySample, RotationLosses};
use crate::so3::{add4, conjugate_raw, dot4, hamilton_raw, norm4, scale4, slerp, sub4, Quat4};

/// How noisy rotations travel from noise to data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// Geodesic path on S³, integrated with the exponential map.
    #[default]
    S3,
    /// Straight line between raw 4-vectors, Euler steps in R⁴, normalized at the end.
    Linear,
}

/// How the geodesic term is differentiated with respect to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeodesicGrad {
    #[default]
    Analytic,
    /// Central differences on the 4 rotation outputs. For cross-checking only.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub losses: RotationLosses,
    pub mode: PathMode,
    pub geodesic_grad: GeodesicGrad,
}

/// One training example in network coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    /// Target field, `ACTION_DIM` values per step.
    pub target: Vec<f64>,
    /// Rotation state per step at flow time τ (unit on S³, raw on the linear path).
    pub rot_state: Vec<Quat4>,
    /// Path rotation at τ + δ per step, unit.
    pub rot_next: Vec<Quat4>,
    pub delta: f64,
}

fn normalized_or(v: Quat4, fallback: Quat4) -> Quat4 {
    let n = norm4(v);
    if n < 1e-12 {
        fallback
    } else {
        scale4(v, 1.0 / n)
    }
}

/// Builds the network input and targets for `sample` under `mode`.
///
/// Translation and gripper always use the straight path. On the linear
/// path the rotation state is `τ q + (1 − τ) q_eps` and its target field
/// `q − q_eps`; the S³ path uses the sample's slerp state and field.
pub fn prepare_example(sample: &NoisySample, delta: f64, cond: &[f64], mode: PathMode) -> Example {
    let tau = sample.tau;
    let next = (tau + delta).min(1.0);
    let fields = target_fields(sample);
    let mut features = chunk_features(&sample.chunk);
    let mut target = Vec::with_capacity(fields.len() * ACTION_DIM);
    let mut rot_state = Vec::with_capacity(fields.len());
    let mut rot_next = Vec::with_capacity(fields.len());
    for (k, ((c, e), f)) in sample.clean.iter().zip(sample.eps.iter()).zip(&fields).enumerate() {
        let (cq, eq) = (c.q.to_array(), e.q.to_array());
        let (state, u_q, nxt) = match mode {
            PathMode::S3 => (
                sample.chunk.actions()[k].q.to_array(),
                f.u_q,
                slerp(&e.q, &c.q, next).to_array(),
            ),
            PathMode::Linear => {
                let lin = |t: f64| add4(scale4(cq, t), scale4(eq, 1.0 - t));
                (lin(tau), sub4(cq, eq), normalized_or(lin(next), cq))
            }
        };
        features[k * ACTION_DIM + 3..k * ACTION_DIM + 7].copy_from_slice(&state);
        target.extend_from_slice(&[f.u_x[0], f.u_x[1], f.u_x[2]]);
        target.extend_from_slice(&u_q);
        target.push(f.u_g);
        rot_state.push(state);
        rot_next.push(nxt);
    }
    Example {
        input: encode_input(tau, &features, cond),
        target,
        rot_state,
        rot_next,
        delta,
    }
}

/// `min |t ± p|` and its gradient with respect to `p`.
fn sign_min(t: Quat4, p: Quat4) -> (f64, Quat4) {
    let (m, s) = (sub4(p, t), add4(p, t));
    let (dm, ds) = (norm4(m), norm4(s));
    let (d, v) = if dm <= ds { (dm, m) } else { (ds, s) };
    if d == 0.0 {
        (0.0, [0.0; 4])
    } else {
        (d, scale4(v, 1.0 / d))
    }
}

/// Rotation reached from unit `q` by integrating velocity `v` over `delta`
/// on S³ (`q ⊗ Δq`), and the derivative data needed to pull a gradient
/// back to `v`.
struct ExpStep {
    p: Quat4,
    omega: [f64; 3],
    a: f64,
    s_over_n: f64,
    k2: f64,
}

fn exp_step(q: Quat4, v: Quat4, delta: f64) -> ExpStep {
    let w = hamilton_raw(conjugate_raw(q), v);
    let omega = [2.0 * w[1], 2.0 * w[2], 2.0 * w[3]];
    let n = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let a = 0.5 * delta;
    let phi = n * a;
    // sin(φ)/n and (φ cos φ − sin φ)/n³, with series near zero.
    let (s_over_n, k2) = if phi < 1e-4 {
        let p2 = phi * phi;
        (a * (1.0 - p2 / 6.0), a * a * a * (-1.0 / 3.0 + p2 / 30.0))
    } else {
        (phi.sin() / n, (phi * phi.cos() - phi.sin()) / (n * n * n))
    };
    let dq = [phi.cos(), s_over_n * omega[0], s_over_n * omega[1], s_over_n * omega[2]];
    ExpStep {
        p: hamilton_raw(q, dq),
        omega,
        a,
        s_over_n,
        k2,
    }
}

/// Pulls `g_p = d/dp` back through `p = q ⊗ Δq(ω(v))` to `d/dv`.
fn exp_step_vjp(q: Quat4, st: &ExpStep, g_p: Quat4) -> Quat4 {
    // p is linear in Δq through an orthogonal map whose transpose is q* ⊗ ·.
    let g_dq = hamilton_raw(conjugate_raw(q), g_p);
    let w = st.omega;
    let gv = [g_dq[1], g_dq[2], g_dq[3]];
    let w_dot_gv = w[0] * gv[0] + w[1] * gv[1] + w[2] * gv[2];
    let c_w = -st.a * st.s_over_n * g_dq[0] + st.k2 * w_dot_gv;
    let g_omega = [
        c_w * w[0] + st.s_over_n * gv[0],
        c_w * w[1] + st.s_over_n * gv[1],
        c_w * w[2] + st.s_over_n * gv[2],
    ];
    // ω = 2 Im(q* ⊗ v), so d/dv = 2 q ⊗ (0, g_ω).
    scale4(hamilton_raw(q, [0.0, g_omega[0], g_omega[1], g_omega[2]]), 2.0)
}

/// Geodesic distance between the path rotation at τ + δ and the rotation
/// reached from the state with velocity `v`, with `d/dv`.
fn geodesic_term(mode: PathMode, state: Quat4, next: Quat4, v: Quat4, delta: f64) -> (f64, Quat4) {
    match mode {
        PathMode::S3 => {
            let st = exp_step(state, v, delta);
            let (d, g_p) = sign_min(next, st.p);
            (d, exp_step_vjp(state, &st, g_p))
        }
        PathMode::Linear => {
            let m = add4(state, scale4(v, delta));
            let n = norm4(m);
            if n < 1e-12 {
                let (d, _) = sign_min(next, [1.0, 0.0, 0.0, 0.0]);
                return (d, [0.0; 4]);
            }
            let p = scale4(m, 1.0 / n);
            let (d, g_p) = sign_min(next, p);
            let g_m = scale4(sub4(g_p, scale4(p, dot4(p, g_p))), 1.0 / n);
            (d, scale4(g_m, delta))
        }
    }
}

fn geodesic_value(mode: PathMode, state: Quat4, next: Quat4, v: Quat4, delta: f64) -> f64 {
    geodesic_term(mode, state, next, v, delta).0
}

fn geodesic_grad_fd(mode: PathMode, state: Quat4, next: Quat4, v: Quat4, delta: f64) -> Quat4 {
    const H: f64 = 1e-6;
    let mut g = [0.0; 4];
    for i in 0..4 {
        let (mut vp, mut vm) = (v, v);
        vp[i] += H;
        vm[i] -= H;
        g[i] = (geodesic_value(mode, state, next, vp, delta) - geodesic_value(mode, state, next, vm, delta)) / (2.0 * H);
    }
    g
}

/// Loss of one example (summed over the chunk) and `d loss / d output`.
pub fn example_loss_grad(out: &[f64], ex: &Example, spec: &LossSpec) -> (LossBreakdown, Vec<f64>) {
    let mut b = LossBreakdown::default();
    let mut g = vec![0.0; out.len()];
    let l = &spec.losses;
    for (k, (o, t)) in out.chunks_exact(ACTION_DIM).zip(ex.target.chunks_exact(ACTION_DIM)).enumerate() {
        let gk = &mut g[k * ACTION_DIM..(k + 1) * ACTION_DIM];
        for i in [0, 1, 2, 7] {
            let r = o[i] - t[i];
            b.r3 += r * r;
            gk[i] += 2.0 * r;
        }
        let v = [o[3], o[4], o[5], o[6]];
        let u = [t[3], t[4], t[5], t[6]];
        let mut gv = [0.0; 4];
        if l.mse {
            let r = sub4(v, u);
            b.rot_mse += dot4(r, r);
            gv = add4(gv, scale4(r, 2.0));
        }
        if l.cosine {
            if l.cosine_normalized {
                let (nv, nu) = (norm4(v), norm4(u));
                if nv < 1e-12 || nu < 1e-12 {
                    b.cos += 1.0;
                } else {
                    let (vh, uh) = (scale4(v, 1.0 / nv), scale4(u, 1.0 / nu));
                    let c = dot4(vh, uh);
                    b.cos += 1.0 - c;
                    gv = add4(gv, scale4(sub4(uh, scale4(vh, c)), -1.0 / nv));
                }
            } else {
                b.cos += 1.0 - dot4(v, u);
                gv = sub4(gv, u);
            }
        }
        if l.geodesic || l.chordal {
            let (state, next) = (ex.rot_state[k], ex.rot_next[k]);
            let (d, mut gd) = geodesic_term(spec.mode, state, next, v, ex.delta);
            if spec.geodesic_grad == GeodesicGrad::FiniteDifference {
                gd = geodesic_grad_fd(spec.mode, state, next, v, ex.delta);
            }
            if l.geodesic {
                b.geo += d;
                gv = add4(gv, gd);
            }
            if l.chordal {
                b.chordal += d * d;
                gv = add4(gv, scale4(gd, 2.0 * d));
            }
        }
        gk[3..7].copy_from_slice(&gv);
    }
    b.total = b.r3 + b.rot_mse + b.cos + b.geo + b.chordal;
    (b, g)
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.r3 += b.r3;
    acc.rot_mse += b.rot_mse;
    acc.cos += b.cos;
    acc.geo += b.geo;
    acc.chordal += b.chordal;
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    b.total *= s;
    b.r3 *= s;
    b.rot_mse *= s;
    b.cos *= s;
    b.geo *= s;
    b.chordal *= s;
}

/// Batch-mean loss and its gradient with respect to every parameter.
pub fn loss_and_grad_examples(
    params: &DenoiserParams,
    batch: &[Example],
    spec: &LossSpec,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let mut total = LossBreakdown::default();
    let mut grad = vec![0.0; params.len()];
    for ex in batch {
        let acts = forward_raw(params, &ex.input)?;
        if ex.target.len() != params.output_dim() {
            return Err(TrainError::ShapeMismatch {
                expected: params.output_dim(),
                got: ex.target.len(),
            });
        }
        let (b, g) = example_loss_grad(acts.output(), ex, spec);
        accumulate(&mut total, &b);
        backward(params, &acts, &g, &mut grad);
    }
    let s = 1.0 / batch.len() as f64;
    scale_breakdown(&mut total, s);
    grad.iter_mut().for_each(|g| *g *= s);
    Ok((total, grad))
}

/// Batch-mean loss only.
pub fn batch_loss(params: &DenoiserParams, batch: &[Example], spec: &LossSpec) -> Result<LossBreakdown, TrainError> {
    let mut total = LossBreakdown::default();
    for ex in batch {
        let acts = forward_raw(params, &ex.input)?;
        accumulate(&mut total, &example_loss_grad(acts.output(), ex, spec).0);
    }
    scale_breakdown(&mut total, 1.0 / batch.len().max(1) as f64);
    Ok(total)
}

/// A noisy sample with its step size and conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub sample: NoisySample,
    pub delta: f64,
    pub cond: Vec<f64>,
}

/// Batch-mean total loss over noisy samples and its parameter gradient.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &[TrainItem],
    spec: &LossSpec,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let examples: Vec<Example> = batch
        .iter()
        .map(|it| prepare_example(&it.sample, it.delta, &it.cond, spec.mode))
        .collect();
    loss_and_grad_examples(params, &examples, spec)
}

/// Central finite-difference gradient of the batch-mean total loss.
pub fn finite_difference_grad(
    params: &DenoiserParams,
    batch: &[Example],
    spec: &LossSpec,
    h: f64,
) -> Result<Vec<f64>, TrainError> {
    let mut p = params.clone();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = batch_loss(&p, batch, spec)?.total;
        p.values_mut()[i] = orig - h;
        let down = batch_loss(&p, batch, spec)?.total;
        p.values_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
