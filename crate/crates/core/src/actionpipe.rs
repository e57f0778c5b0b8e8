//! Trajectory resampling, delta-action chunks, control normalization, and
//! weighted dataset-mixture sampling.
//!
//! Delta actions are relative to the chunk's anchor pose: translation in the
//! robot base frame, rotation in the end-effector frame, and the gripper as
//! the binarized absolute state at the target step.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{BlobError, Tensor};
use crate::flowmatch::Action;
use crate::so3::{self, canonicalize, hamilton, lincomb4, slerp_shortest, sub3, Quaternion, Vec3};
use crate::tokenizer3d::quantile_sorted;

pub const NORM_FORMAT_VERSION: u32 = 1;
pub const MIXTURE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HZ: f64 = 5.0;
pub const MIN_NORM_SAMPLES: usize = 100;
/// Default fixed translation bound per step for the constant min-max scheme, in meters.
pub const MINMAX_CONST_BOUND: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trajectory too short: {0}")]
    TooShort(String),
    #[error("chunk out of range: start {start} + horizon {horizon} needs more than {len} poses")]
    OutOfRange { start: usize, horizon: usize, len: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("mixture spec is empty")]
    EmptySpec,
    #[error("invalid mixture weight {weight} for {id}")]
    InvalidWeight { id: String, weight: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Blob(#[from] BlobError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub stamp: f64,
    pub t: Vec3,
    pub r: Quaternion,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub hz: f64,
}

impl Trajectory {
    /// Checks ordering and estimates the frequency from the mean spacing.
    pub fn new(poses: Vec<Pose>) -> Result<Self, PipelineError> {
        if poses.len() < 2 {
            return Err(PipelineError::TooShort(format!("{} poses, need at least 2", poses.len())));
        }
        if poses.windows(2).any(|w| !(w[1].stamp > w[0].stamp)) {
            return Err(PipelineError::InvalidTrajectory("stamps must be strictly increasing".into()));
        }
        if poses.iter().any(|p| !p.stamp.is_finite() || p.t.iter().any(|v| !v.is_finite())) {
            return Err(PipelineError::InvalidTrajectory("non-finite pose".into()));
        }
        let span = poses[poses.len() - 1].stamp - poses[0].stamp;
        let hz = (poses.len() - 1) as f64 / span;
        Ok(Self { poses, hz })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.poses[self.poses.len() - 1].stamp - self.poses[0].stamp
    }

    /// Rigidly rotates the whole trajectory about the base origin.
    pub fn rotated(&self, rot: &Quaternion) -> Trajectory {
        let poses = self
            .poses
            .iter()
            .map(|p| Pose {
                t: rot.rotate(p.t),
                r: rot.compose(&p.r),
                ..*p
            })
            .collect();
        Trajectory { poses, hz: self.hz }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationInterp {
    #[default]
    Slerp,
    /// Component-wise lerp followed by renormalization.
    Nlerp,
}

pub fn resample(traj: &Trajectory, dst_hz: f64) -> Result<Trajectory, PipelineError> {
    resample_with(traj, dst_hz, RotationInterp::Slerp)
}

/// Resamples onto a uniform `dst_hz` grid starting at the first stamp.
pub fn resample_with(traj: &Trajectory, dst_hz: f64, interp: RotationInterp) -> Result<Trajectory, PipelineError> {
    if !(dst_hz > 0.0 && dst_hz.is_finite()) {
        return Err(PipelineError::InvalidTrajectory(format!("target frequency {dst_hz} must be positive")));
    }
    let period = 1.0 / dst_hz;
    let span = traj.span();
    if span + 1e-9 < 2.0 * period {
        return Err(PipelineError::TooShort(format!(
            "span {span:.4} s is shorter than two periods at {dst_hz} Hz"
        )));
    }
    let t0 = traj.poses[0].stamp;
    let count = ((span / period) + 1e-9).floor() as usize + 1;
    let snap = 1e-9 * period;
    let stamps: Vec<f64> = traj.poses.iter().map(|p| p.stamp).collect();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s = t0 + k as f64 * period;
        // Index of the last source stamp <= s (within the snap tolerance).
        let i = stamps.partition_point(|v| *v <= s + snap).saturating_sub(1);
        let a = &traj.poses[i];
        if (s - a.stamp).abs() <= snap || i + 1 == stamps.len() {
            out.push(*a);
            continue;
        }
        let b = &traj.poses[i + 1];
        let f = (s - a.stamp) / (b.stamp - a.stamp);
        let r = match interp {
            RotationInterp::Slerp => slerp_shortest(&a.r, &b.r, f),
            RotationInterp::Nlerp => {
                let sign = if a.r.dot(&b.r) < 0.0 { -1.0 } else { 1.0 };
                canonicalize(lincomb4(1.0 - f, a.r.to_array(), sign * f, b.r.to_array()))
                    .map_err(|e| PipelineError::InvalidTrajectory(e.to_string()))?
            }
        };
        out.push(Pose {
            stamp: s,
            t: [
                a.t[0] + f * (b.t[0] - a.t[0]),
                a.t[1] + f * (b.t[1] - a.t[1]),
                a.t[2] + f * (b.t[2] - a.t[2]),
            ],
            r,
            g: a.g + f * (b.g - a.g),
        });
    }
    Ok(Trajectory { poses: out, hz: dst_hz })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaAction {
    /// Translation delta in the base frame.
    pub dt: Vec3,
    /// Rotation delta in the end-effector frame.
    pub dr: Quaternion,
    /// Binary gripper command, 0 or 1.
    pub g: u8,
}

pub const GRIPPER_THRESHOLD: f64 = 0.5;

/// 1 when `g >= threshold`, else 0.
pub fn binarize_gripper(g: f64, threshold: f64) -> u8 {
    u8::from(g >= threshold)
}

pub fn make_chunk(traj: &Trajectory, start: usize, horizon: usize) -> Result<Vec<DeltaAction>, PipelineError> {
    if horizon == 0 || start + horizon >= traj.len() {
        return Err(PipelineError::OutOfRange {
            start,
            horizon,
            len: traj.len(),
        });
    }
    let anchor = &traj.poses[start];
    let inv = anchor.r.conjugate();
    Ok((1..=horizon)
        .map(|k| {
            let p = &traj.poses[start + k];
            DeltaAction {
                dt: sub3(p.t, anchor.t),
                dr: canonicalize(hamilton(&inv, &p.r)).expect("unit product"),
                g: binarize_gripper(p.g, GRIPPER_THRESHOLD),
            }
        })
        .collect())
}

/// Chunk anchors `0, stride, 2·stride, …` that leave room for `horizon` targets.
pub fn chunk_starts(len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0, "stride must be positive");
    (0..len).step_by(stride).take_while(|s| s + horizon < len).collect()
}

/// Poses reached by applying `chunk` to `anchor`; step `k` is stamped
/// `anchor.stamp + k · period`.
pub fn apply_chunk(anchor: &Pose, chunk: &[DeltaAction], period: f64) -> Vec<Pose> {
    chunk
        .iter()
        .enumerate()
        .map(|(i, d)| Pose {
            stamp: anchor.stamp + (i + 1) as f64 * period,
            t: so3::add3(anchor.t, d.dt),
            r: anchor.r.compose(&d.dr),
            g: f64::from(d.g),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    Quantile,
    MinmaxConst,
    MeanStd,
}

impl std::str::FromStr for NormScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quantile" => Ok(NormScheme::Quantile),
            "minmax_const" | "minmax-const" => Ok(NormScheme::MinmaxConst),
            "mean_std" | "mean-std" => Ok(NormScheme::MeanStd),
            other => Err(format!("unknown normalization scheme '{other}'")),
        }
    }
}

/// Per-channel affine parameters for the translation channels.
///
/// Rotation deltas stay on S³ and the gripper stays binary; neither is
/// touched by normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum NormParams {
    Quantile { q01: Vec3, q99: Vec3 },
    MinmaxConst { lo: Vec3, hi: Vec3 },
    MeanStd { mean: Vec3, std: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub format_version: u32,
    #[serde(flatten)]
    pub params: NormParams,
    /// Clip normalized values to [-1, 1]. Breaks invertibility outside the range.
    #[serde(default)]
    pub clip: bool,
}

impl NormStats {
    pub fn minmax_const(lo: Vec3, hi: Vec3) -> Self {
        NormStats {
            format_version: NORM_FORMAT_VERSION,
            params: NormParams::MinmaxConst { lo, hi },
            clip: false,
        }
    }

    pub fn scheme(&self) -> NormScheme {
        match self.params {
            NormParams::Quantile { .. } => NormScheme::Quantile,
            NormParams::MinmaxConst { .. } => NormScheme::MinmaxConst,
            NormParams::MeanStd { .. } => NormScheme::MeanStd,
        }
    }

    /// `(offset, scale)` per channel so that `normalized = (v − offset) / scale`.
    fn affine(&self) -> [(f64, f64); 3] {
        let mut out = [(0.0, 1.0); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = match self.params {
                NormParams::Quantile { q01: lo, q99: hi } | NormParams::MinmaxConst { lo, hi } => {
                    (0.5 * (lo[i] + hi[i]), 0.5 * (hi[i] - lo[i]))
                }
                NormParams::MeanStd { mean, std } => (mean[i], std[i]),
            };
        }
        out
    }

    pub fn normalize_translation(&self, v: Vec3) -> Vec3 {
        let a = self.affine();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (v[i] - a[i].0) / a[i].1;
            if self.clip {
                out[i] = out[i].clamp(-1.0, 1.0);
            }
        }
        out
    }

    pub fn denormalize_translation(&self, n: Vec3) -> Vec3 {
        let a = self.affine();
        [n[0] * a[0].1 + a[0].0, n[1] * a[1].1 + a[1].0, n[2] * a[2].1 + a[2].0]
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let ok = self.affine().iter().all(|(o, s)| o.is_finite() && s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(PipelineError::InsufficientData("degenerate normalization range".into()))
        }
    }
}

/// Fits per-channel translation statistics over the whole stream.
///
/// `MinmaxConst` ignores the data and uses ±[`MINMAX_CONST_BOUND`].
pub fn fit_norm(deltas: &[DeltaAction], scheme: NormScheme) -> Result<NormStats, PipelineError> {
    let params = match scheme {
        NormScheme::MinmaxConst => {
            let b = MINMAX_CONST_BOUND;
            NormParams::MinmaxConst {
                lo: [-b; 3],
                hi: [b; 3],
            }
        }
        _ => {
            if deltas.len() < MIN_NORM_SAMPLES {
                return Err(PipelineError::InsufficientData(format!(
                    "{} samples, need at least {MIN_NORM_SAMPLES}",
                    deltas.len()
                )));
            }
            let chan = |i: usize| -> Vec<f64> { deltas.iter().map(|d| d.dt[i]).collect() };
            let channels = [chan(0), chan(1), chan(2)];
            match scheme {
                NormScheme::Quantile => {
                    let mut q01 = [0.0; 3];
                    let mut q99 = [0.0; 3];
                    for (i, c) in channels.into_iter().enumerate() {
                        let mut s = c;
                        s.sort_by(f64::total_cmp);
                        q01[i] = quantile_sorted(&s, 0.01);
                        q99[i] = quantile_sorted(&s, 0.99);
                    }
                    NormParams::Quantile { q01, q99 }
                }
                _ => {
                    let mut mean = [0.0; 3];
                    let mut std = [0.0; 3];
                    for (i, c) in channels.iter().enumerate() {
                        let n = c.len() as f64;
                        let m = c.iter().sum::<f64>() / n;
                        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
                        mean[i] = m;
                        std[i] = var.sqrt();
                    }
                    NormParams::MeanStd { mean, std }
                }
            }
        }
    };
    let stats = NormStats {
        format_version: NORM_FORMAT_VERSION,
        params,
        clip: false,
    };
    stats.validate()?;
    Ok(stats)
}

/// Normalized translation, untouched rotation, gripper as 0.0 / 1.0.
pub fn normalize(a: &DeltaAction, stats: &NormStats) -> Action {
    Action {
        x: stats.normalize_translation(a.dt),
        q: a.dr,
        g: f64::from(a.g),
    }
}

pub fn denormalize(a: &Action, stats: &NormStats) -> DeltaAction {
    DeltaAction {
        dt: stats.denormalize_translation(a.x),
        dr: a.q,
        g: binarize_gripper(a.g, GRIPPER_THRESHOLD),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub format_version: u32,
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Result<Self, PipelineError> {
        let spec = MixtureSpec {
            format_version: MIXTURE_FORMAT_VERSION,
            entries: entries
                .into_iter()
                .map(|(id, weight)| MixtureEntry { id: id.into(), weight })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.entries.is_empty() {
            return Err(PipelineError::EmptySpec);
        }
        for e in &self.entries {
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(PipelineError::InvalidWeight {
                    id: e.id.clone(),
                    weight: e.weight,
                });
            }
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        self.entries.iter().map(|e| e.weight / total).collect()
    }
}

/// Endless i.i.d. categorical draws of dataset ids.
pub struct MixtureSampler<'a, R> {
    spec: &'a MixtureSpec,
    index: WeightedIndex<f64>,
    rng: R,
}

pub fn mixture_sampler<R: Rng>(spec: &MixtureSpec, rng: R) -> Result<MixtureSampler<'_, R>, PipelineError> {
    spec.validate()?;
    let index = WeightedIndex::new(spec.entries.iter().map(|e| e.weight)).map_err(|_| PipelineError::EmptySpec)?;
    Ok(MixtureSampler { spec, index, rng })
}

impl<R: Rng> MixtureSampler<'_, R> {
    pub fn next_index(&mut self) -> usize {
        self.index.sample(&mut self.rng)
    }
}

impl<'a, R: Rng> Iterator for MixtureSampler<'a, R> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let i = self.next_index();
        let spec: &'a MixtureSpec = self.spec;
        Some(spec.entries[i].id.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct PoseLine {
    stamp: f64,
    t: Vec3,
    r: [f64; 4],
    g: f64,
}

/// One pose per line: `{"stamp": s, "t": [x, y, z], "r": [w, x, y, z], "g": g}`.
pub fn parse_jsonl(text: &str) -> Result<Trajectory, PipelineError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PoseLine = serde_json::from_str(line).map_err(|e| PipelineError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let r = canonicalize(p.r).map_err(|e| PipelineError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        poses.push(Pose {
            stamp: p.stamp,
            t: p.t,
            r,
            g: p.g,
        });
    }
    Trajectory::new(poses)
}

pub fn to_jsonl(traj: &Trajectory) -> String {
    let mut out = String::new();
    for p in &traj.poses {
        let line = PoseLine {
            stamp: p.stamp,
            t: p.t,
            r: p.r.to_array(),
            g: p.g,
        };
        out.push_str(&serde_json::to_string(&line).expect("pose serializes"));
        out.push('\n');
    }
    out
}

/// `[N, 9]` f64 rows of `stamp, t[3], r[4], g`.
pub fn trajectory_to_tensor(traj: &Trajectory) -> Tensor {
    let mut v = Vec::with_capacity(traj.len() * 9);
    for p in &traj.poses {
        v.push(p.stamp);
        v.extend_from_slice(&p.t);
        v.extend_from_slice(&p.r.to_array());
        v.push(p.g);
    }
    Tensor::f64(vec![traj.len(), 9], v).expect("consistent shape")
}

pub fn trajectory_from_tensor(t: &Tensor) -> Result<Trajectory, PipelineError> {
    if t.dims.len() != 2 || t.dims[1] != 9 {
        return Err(PipelineError::InvalidTrajectory(format!("expected [N, 9] tensor, got {:?}", t.dims)));
    }
    let poses = t
        .as_f64()?
        .chunks_exact(9)
        .enumerate()
        .map(|(i, r)| {
            let q = canonicalize([r[4], r[5], r[6], r[7]]).map_err(|e| PipelineError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            Ok(Pose {
                stamp: r[0],
                t: [r[1], r[2], r[3]],
                r: q,
                g: r[8],
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Trajectory::new(poses)
}
