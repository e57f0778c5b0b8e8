//! A desk-scale denoiser: a small tanh MLP trained with the flow-matching
//! losses on synthetic conditional action distributions.
//!
//! Training is single-threaded plain SGD with a fixed learning rate and a
//! per-step EMA of the weights, so a run is a pure function of its config.
//! Ablation grids fan independent runs out over threads.

pub mod checkpoint;
pub mod loss;
pub mod mask;
pub mod mlp;
pub mod tasks;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::BlobError;
use crate::flowmatch::{
    integrate_from, make_noisy, sample_delta, sample_noise, ActionChunk, FieldTarget, FlowError, FmConfig,
    RotationLosses, VelocityField,
};
use crate::manifest::config_hash;
use crate::seeding::{self, streams};
use crate::so3::{canonicalize, Quaternion};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use loss::{loss_and_grad, GeodesicGrad, LossSpec, PathMode, TrainItem};
pub use mask::{blockwise_causal_mask, AttentionMask};
pub use mlp::{forward, DenoiserParams};
pub use tasks::{SyntheticTask, TaskKind, TaskSpec};

use loss::{loss_and_grad_examples, prepare_example};
use mlp::{encode_input, forward_raw, layer_sizes, ACTION_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step} ({loss})")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Shadow copy of the parameters updated as `decay · shadow + (1 − decay) · params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: DenoiserParams,
    pub decay: f64,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

impl EmaState {
    pub fn new(params: &DenoiserParams, decay: f64) -> Result<Self, TrainError> {
        check_decay(decay)?;
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }

    pub fn update(&mut self, params: &DenoiserParams) -> Result<(), TrainError> {
        if params.sizes() != self.shadow.sizes() {
            return Err(TrainError::ShapeMismatch {
                expected: self.shadow.len(),
                got: params.len(),
            });
        }
        let d = self.decay;
        for (s, p) in self.shadow.values_mut().iter_mut().zip(params.values()) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(TrainError::InvalidConfig(format!("EMA decay {decay} outside [0, 1]")));
    }
    Ok(())
}

/// One EMA step with an explicit decay.
pub fn ema_update(ema: &EmaState, params: &DenoiserParams, decay: f64) -> Result<EmaState, TrainError> {
    check_decay(decay)?;
    let mut next = EmaState {
        shadow: ema.shadow.clone(),
        decay,
    };
    next.update(params)?;
    next.decay = ema.decay;
    Ok(next)
}

/// The rotation losses used for toy training unless a config overrides them:
/// squared error on the field plus the geodesic term.
pub fn default_training_losses() -> RotationLosses {
    RotationLosses {
        mse: true,
        cosine: false,
        cosine_normalized: false,
        geodesic: true,
        chordal: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mode: PathMode,
    pub fm: FmConfig,
    pub geodesic_grad: GeodesicGrad,
    pub hidden: Vec<usize>,
    pub ema_decay: f64,
    pub eval_every: usize,
    /// Noise draws per conditioning code at each evaluation.
    pub eval_draws: usize,
    /// Keep a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "s3".into(),
            seed: 0,
            steps: 20_000,
            batch_size: 64,
            learning_rate: 0.02,
            mode: PathMode::S3,
            fm: FmConfig {
                losses: default_training_losses(),
                ..FmConfig::default()
            },
            geodesic_grad: GeodesicGrad::Analytic,
            hidden: vec![128, 128],
            ema_decay: DEFAULT_EMA_DECAY,
            eval_every: 100,
            eval_draws: 8,
            checkpoint_every: 0,
            task: TaskSpec::unimodal(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.fm.validate()?;
        if !self.fm.losses.any() {
            return bad("at least one rotation loss must be enabled");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_draws == 0 {
            return bad("steps, batch_size, eval_every and eval_draws must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive");
        }
        if self.task.n_codes == 0 || self.task.horizon == 0 {
            return bad("task needs at least one code and horizon >= 1");
        }
        check_decay(self.ema_decay)
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            losses: self.fm.losses,
            mode: self.mode,
            geodesic_grad: self.geodesic_grad,
        }
    }
}

/// The trained network viewed as a velocity field over S³ chunks.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a> {
    pub params: &'a DenoiserParams,
}

impl VelocityField for Denoiser<'_> {
    type Error = TrainError;

    fn velocity(&self, noisy: &ActionChunk, tau: f64, obs: &[f64]) -> Result<FieldTarget, TrainError> {
        forward(self.params, tau, noisy, obs)
    }
}

/// Integrates the network from `start` with `steps` Euler steps along `mode`.
///
/// The linear path moves raw quaternion 4-vectors through R⁴ and projects
/// back to S³ only at the end.
pub fn sample_chunk(
    params: &DenoiserParams,
    cond: &[f64],
    start: ActionChunk,
    mode: PathMode,
    steps: usize,
) -> Result<ActionChunk, TrainError> {
    match mode {
        PathMode::S3 => integrate_from(&Denoiser { params }, start, cond, steps),
        PathMode::Linear => {
            let mut state = mlp::chunk_features(&start);
            let delta = 1.0 / steps as f64;
            for i in 0..steps {
                let tau = i as f64 * delta;
                let acts = forward_raw(params, &encode_input(tau, &state, cond))?;
                for (s, v) in state.iter_mut().zip(acts.output()) {
                    *s += delta * v;
                }
            }
            let mut chunk = start;
            for (a, s) in chunk.actions_mut().iter_mut().zip(state.chunks_exact(ACTION_DIM)) {
                a.x = [s[0], s[1], s[2]];
                a.q = canonicalize([s[3], s[4], s[5], s[6]]).unwrap_or(Quaternion::IDENTITY);
                a.g = s[7].clamp(0.0, 1.0);
            }
            Ok(chunk)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean per-step rotation angle to the nearest target mode, radians.
    pub geo: f64,
    /// Mean per-step translation distance to that mode.
    pub trans: f64,
}

/// Generates `cfg.eval_draws` chunks per code from a fixed noise stream and
/// measures them against the task targets.
pub fn evaluate(params: &DenoiserParams, task: &SyntheticTask, cfg: &TrainConfig) -> Result<EvalResult, TrainError> {
    let mut rng = seeding::stream(cfg.seed, streams::EVAL);
    let (mut geo, mut trans, mut n) = (0.0, 0.0, 0.0);
    for code in 0..task.spec.n_codes {
        let cond = task.cond(code);
        for _ in 0..cfg.eval_draws {
            let start = sample_noise(&mut rng, task.spec.horizon)?;
            let chunk = sample_chunk(params, &cond, start, cfg.mode, cfg.fm.steps)?;
            let (g, t) = task.errors(code, &chunk);
            geo += g;
            trans += t;
            n += 1.0;
        }
    }
    Ok(EvalResult {
        geo: geo / n,
        trans: trans / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub r3: f64,
    pub rot_mse: f64,
    pub cos: f64,
    pub geo: f64,
    pub chordal: f64,
    pub eval: EvalResult,
    pub ema_eval: EvalResult,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,loss,r3,rot_mse,cos,geo,chordal,eval_geo,eval_trans,ema_eval_geo,ema_eval_trans\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.r3, r.rot_mse, r.cos, r.geo, r.chordal, r.eval.geo, r.eval.trans, r.ema_eval.geo,
            r.ema_eval.trans
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: EmaState,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub task: SyntheticTask,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> EvalResult {
        self.metrics.last().map(|m| m.eval).unwrap_or_default()
    }

    pub fn final_ema_eval(&self) -> EvalResult {
        self.metrics.last().map(|m| m.ema_eval).unwrap_or_default()
    }
}

fn checkpoint(cfg: &TrainConfig, step: usize, params: &DenoiserParams, ema: &EmaState) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            format_version: checkpoint::CHECKPOINT_VERSION,
            step,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            sizes: params.sizes().to_vec(),
            ema_decay: ema.decay,
        },
        params: params.clone(),
        ema: ema.clone(),
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let task = SyntheticTask::build(cfg.task, cfg.seed);
    let sizes = layer_sizes(cfg.task.horizon, task.cond_dim(), &cfg.hidden);
    let mut params = DenoiserParams::init(sizes, &mut seeding::stream(cfg.seed, streams::INIT))?;
    let mut ema = EmaState::new(&params, cfg.ema_decay)?;
    let mut data_rng = seeding::stream(cfg.seed, streams::TRAIN_DATA);
    let mut noise_rng = seeding::stream(cfg.seed, streams::TRAIN_NOISE);
    let spec = cfg.loss_spec();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let (code, target) = task.sample(&mut data_rng);
            let sample = make_noisy(target, &mut noise_rng, &cfg.fm)?;
            let delta = sample_delta(&mut noise_rng, sample.tau, &cfg.fm);
            batch.push(prepare_example(&sample, delta, &task.cond(code), cfg.mode));
        }
        let (loss, grad) = loss_and_grad_examples(&params, &batch, &spec)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergenceDetected { step, loss: loss.total });
        }
        for (p, g) in params.values_mut().iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        ema.update(&params)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            metrics.push(MetricsRow {
                step,
                loss: loss.total,
                r3: loss.r3,
                rot_mse: loss.rot_mse,
                cos: loss.cos,
                geo: loss.geo,
                chordal: loss.chordal,
                eval: evaluate(&params, &task, cfg)?,
                ema_eval: evaluate(&ema.shadow, &task, cfg)?,
            });
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps {
            checkpoints.push(checkpoint(cfg, step, &params, &ema));
        }
    }
    Ok(TrainOutcome {
        params,
        ema,
        metrics,
        checkpoints,
        task,
    })
}

/// Population variance of the raw and EMA eval geodesic errors over the
/// last `n` metric rows.
pub fn tail_variances(metrics: &[MetricsRow], n: usize) -> (f64, f64) {
    let tail = &metrics[metrics.len().saturating_sub(n)..];
    let var = |f: &dyn Fn(&MetricsRow) -> f64| {
        let m = tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        tail.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / tail.len() as f64
    };
    (var(&|r| r.eval.geo), var(&|r| r.ema_eval.geo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub geo_err: f64,
    pub trans_err: f64,
    pub ema_geo_err: f64,
    pub ema_trans_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub config_hash: String,
    pub n_seeds: usize,
    pub geo_mean: f64,
    pub geo_std: f64,
    pub trans_mean: f64,
    pub trans_std: f64,
}

/// Trains every config of `grid` under every seed, in parallel. Rows come
/// back in `(config, seed)` order and do not depend on thread scheduling.
pub fn ablation_run(grid: &[TrainConfig], seeds: &[u64]) -> Result<Vec<AblationRow>, TrainError> {
    if grid.len() < 2 {
        return Err(TrainError::InvalidConfig("an ablation needs at least two configs".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("an ablation needs at least one seed".into()));
    }
    for c in grid {
        c.validate()?;
    }
    let jobs: Vec<(&TrainConfig, u64)> = grid.iter().flat_map(|c| seeds.iter().map(move |s| (c, *s))).collect();
    jobs.par_iter()
        .map(|(c, seed)| {
            let cfg = TrainConfig {
                seed: *seed,
                ..(*c).clone()
            };
            let out = train(&cfg)?;
            let (e, m) = (out.final_eval(), out.final_ema_eval());
            Ok(AblationRow {
                name: c.name.clone(),
                config_hash: config_hash(&TrainConfig { seed: 0, ..(*c).clone() }),
                seed: *seed,
                geo_err: e.geo,
                trans_err: e.trans,
                ema_geo_err: m.geo,
                ema_trans_err: m.trans,
            })
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Mean and sample std of the EMA errors per config, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.name.clone(), r.config_hash.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(name, hash)| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.name == name && r.config_hash == hash).collect();
            let (geo_mean, geo_std) = mean_std(&sel.iter().map(|r| r.ema_geo_err).collect::<Vec<_>>());
            let (trans_mean, trans_std) = mean_std(&sel.iter().map(|r| r.ema_trans_err).collect::<Vec<_>>());
            AblationSummary {
                name,
                config_hash: hash,
                n_seeds: sel.len(),
                geo_mean,
                geo_std,
                trans_mean,
                trans_std,
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,config_hash,seed,geo_err,trans_err,ema_geo_err,ema_trans_err\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, r.config_hash, r.seed, r.geo_err, r.trans_err, r.ema_geo_err, r.ema_trans_err
        ));
    }
    s
}

pub fn summary_csv(rows: &[AblationSummary]) -> String {
    let mut s = String::from("name,config_hash,n_seeds,geo_mean,geo_std,trans_mean,trans_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, r.config_hash, r.n_seeds, r.geo_mean, r.geo_std, r.trans_mean, r.trans_std
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            hidden: vec![16],
            eval_draws: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ema_examples() {
        let p = DenoiserParams::init(layer_sizes(1, 1, &[3]), &mut seeding::rng(0)).unwrap();
        let q = DenoiserParams::init(layer_sizes(1, 1, &[3]), &mut seeding::rng(1)).unwrap();
        let ema = EmaState::new(&p, 0.5).unwrap();
        assert_eq!(ema_update(&ema, &q, 0.0).unwrap().shadow, q);
        assert_eq!(ema_update(&ema, &q, 1.0).unwrap().shadow, p);
        let other = DenoiserParams::zeros(layer_sizes(2, 1, &[3])).unwrap();
        assert!(ema_update(&ema, &other, 0.5).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny()).unwrap();
        let b = train(&tiny()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 2);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..tiny()
        };
        assert!(matches!(train(&cfg), Err(TrainError::DivergenceDetected { .. })));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.fm.losses = RotationLosses {
            mse: false,
            cosine: false,
            cosine_normalized: false,
            geodesic: false,
            chordal: false,
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..tiny() }.validate().is_err());
        assert!(ablation_run(&[tiny()], &[0]).is_err());
    }
}
