//! Synthetic conditional action distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flowmatch::{Action, ActionChunk};
use crate::seeding::{self, streams};
use crate::so3::{geodesic_angle, norm3, scale3, sub3, Quaternion, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One fixed target chunk per conditioning code.
    Unimodal,
    /// Two targets per code whose rotations differ by a large angle.
    Bimodal,
    /// Unimodal, with target rotations spread up to `max_angle`.
    WideRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_codes: usize,
    pub horizon: usize,
    /// Largest target rotation angle (radians) from the identity.
    pub max_angle: f64,
    /// Target translations are uniform in `[-scale, scale]³`.
    pub translation_scale: f64,
}

impl TaskSpec {
    pub fn unimodal() -> Self {
        Self {
            kind: TaskKind::Unimodal,
            n_codes: 4,
            horizon: ActionChunk::DEFAULT_HORIZON,
            max_angle: std::f64::consts::FRAC_PI_2,
            translation_scale: 0.5,
        }
    }

    pub fn bimodal() -> Self {
        Self {
            kind: TaskKind::Bimodal,
            ..Self::unimodal()
        }
    }

    pub fn wide_rotation() -> Self {
        Self {
            kind: TaskKind::WideRotation,
            max_angle: 170f64.to_radians(),
            ..Self::unimodal()
        }
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::unimodal()
    }
}

/// Angle between the two modes of a bimodal code.
pub const BIMODAL_SEPARATION: f64 = 2.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// `modes[code]` lists the target chunks of that code.
    pub modes: Vec<Vec<ActionChunk>>,
}

fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm3(v);
        if n > 1e-3 && n <= 1.0 {
            return scale3(v, 1.0 / n);
        }
    }
}

fn random_action<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Action {
    let s = spec.translation_scale;
    let x = [rng.random_range(-s..=s), rng.random_range(-s..=s), rng.random_range(-s..=s)];
    let q = Quaternion::from_axis_angle(random_axis(rng), rng.random_range(0.0..=spec.max_angle));
    let g = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    Action { x, q, g }
}

impl SyntheticTask {
    /// Targets are a pure function of `(spec, seed)`.
    pub fn build(spec: TaskSpec, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, streams::TASK);
        let modes = (0..spec.n_codes)
            .map(|_| {
                let a: Vec<Action> = (0..spec.horizon).map(|_| random_action(&spec, &mut rng)).collect();
                let first = ActionChunk::new(a.clone()).expect("horizon >= 1");
                match spec.kind {
                    TaskKind::Unimodal | TaskKind::WideRotation => vec![first],
                    TaskKind::Bimodal => {
                        let b: Vec<Action> = a
                            .iter()
                            .map(|act| {
                                let turn = Quaternion::from_axis_angle(random_axis(&mut rng), BIMODAL_SEPARATION);
                                Action {
                                    x: scale3(act.x, -1.0),
                                    q: act.q.compose(&turn),
                                    g: act.g,
                                }
                            })
                            .collect();
                        vec![first, ActionChunk::new(b).expect("horizon >= 1")]
                    }
                }
            })
            .collect();
        Self { spec, modes }
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.n_codes
    }

    /// One-hot conditioning vector.
    pub fn cond(&self, code: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.n_codes];
        v[code] = 1.0;
        v
    }

    /// Draws a code uniformly and one of its modes uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, &ActionChunk) {
        let code = rng.random_range(0..self.modes.len());
        let m = &self.modes[code];
        let i = if m.len() == 1 { 0 } else { rng.random_range(0..m.len()) };
        (code, &m[i])
    }

    /// Mean per-step rotation angle and translation distance from `chunk` to
    /// the nearest mode of `code` (nearest by total rotation error).
    pub fn errors(&self, code: usize, chunk: &ActionChunk) -> (f64, f64) {
        let h = chunk.horizon() as f64;
        self.modes[code]
            .iter()
            .map(|m| {
                let (mut geo, mut tr) = (0.0, 0.0);
                for (a, t) in chunk.iter().zip(m.iter()) {
                    geo += geodesic_angle(&a.q, &t.q);
                    tr += norm3(sub3(a.x, t.x));
                }
                (geo / h, tr / h)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("every code has a mode")
    }
}

/// Largest rotation angle between the modes of any bimodal code (sanity helper).
pub fn mode_separation(task: &SyntheticTask) -> f64 {
    let mut best: f64 = 0.0;
    for m in &task.modes {
        if m.len() == 2 {
            for (a, b) in m[0].iter().zip(m[1].iter()) {
                best = best.max(geodesic_angle(&a.q, &b.q));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_are_deterministic_and_bounded() {
        let t = SyntheticTask::build(TaskSpec::wide_rotation(), 3);
        assert_eq!(t, SyntheticTask::build(TaskSpec::wide_rotation(), 3));
        for m in &t.modes {
            for a in m[0].iter() {
                assert!(a.q.angle() <= 170f64.to_radians() + 1e-12);
                assert!(a.x.iter().all(|c| c.abs() <= 0.5));
            }
        }
        let b = SyntheticTask::build(TaskSpec::bimodal(), 3);
        assert!(b.modes.iter().all(|m| m.len() == 2));
        assert!((mode_separation(&b) - BIMODAL_SEPARATION).abs() < 1e-9);
        let (g, tr) = b.errors(0, &b.modes[0][1]);
        assert!(g < 1e-6 && tr == 0.0);
    }
}
