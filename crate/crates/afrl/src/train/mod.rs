//! Deep Q-learning trainer: experience replay, epsilon-greedy exploration
//! with geometric decay, an EMA-tracked target network, discounted TD
//! targets, and smoothed-L1 + RMSProp updates.

pub mod replay;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{evaluate_policy, InitialFocus};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_metric, MetricKind};
use crate::neural::checkpoint::{Checkpoint, CheckpointMeta};
use crate::neural::{
    cnn_encode, cnn_encode_with_tape, mlp_forward, mlp_forward_batch, mlp_backward, cnn_backward,
    huber_grad, huber_loss, E2eParams, EncoderParams, EncoderTape, ParamTensors, QNetworkParams,
    RmsProp, ENCODING_WIDTH, PATCH_PIXELS,
};
use crate::policy::{
    apply_action, argmax_action, assemble_e2e_state, assemble_scalar_state, patch_to_f32,
    MetricNormalizer, PolicyHistory, PolicySpec, ACTIONS, E2E_STATE_WIDTH, HISTORY_LEN,
    SCALAR_STATE_WIDTH,
};
use crate::scan::ScanSet;
use replay::ReplayMemory;

/// Full training configuration. Defaults are paper-scale; benchmarks
/// shrink the replay and decay span through these fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub ema_beta: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_span: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub warmup_transitions: usize,
    pub learn_every: usize,
    pub total_experiences: u64,
    /// Validate (and refresh the best checkpoint) every this many episodes.
    pub validation_every: usize,
    pub learning_rate: f64,
    pub rmsprop_smoothing: f64,
    pub rmsprop_epsilon: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            ema_beta: 0.005,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_span: 2_000_000,
            replay_capacity: 2_500_000,
            batch_size: 64,
            warmup_transitions: 640,
            learn_every: 1,
            total_experiences: 4_000_000,
            validation_every: 25,
            learning_rate: 1e-5,
            rmsprop_smoothing: 0.95,
            rmsprop_epsilon: 1e-8,
            patch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must be in (0,1)");
        }
        if !(self.ema_beta > 0.0 && self.ema_beta <= 1.0) {
            return fail("ema_beta must be in (0,1]");
        }
        if self.epsilon_end > self.epsilon_start
            || !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
            || self.epsilon_end <= 0.0
        {
            return fail("epsilon schedule must satisfy 0 < epsilon_end <= epsilon_start <= 1");
        }
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return fail("replay_capacity and batch_size must be positive");
        }
        if self.learn_every == 0 || self.validation_every == 0 {
            return fail("learn_every and validation_every must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.rmsprop_smoothing > 0.0 && self.rmsprop_smoothing < 1.0) {
            return fail("learning_rate must be positive and rmsprop_smoothing in (0,1)");
        }
        if self.patch_size * self.patch_size != PATCH_PIXELS {
            return fail("patch_size must match the 32x32 encoder input");
        }
        Ok(())
    }
}

/// Which policy gets trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainVariant {
    Scalar(MetricKind),
    EndToEnd,
}

impl TrainVariant {
    pub fn name(&self) -> &'static str {
        match self {
            TrainVariant::Scalar(MetricKind::Mgm) => "rl-mgm",
            TrainVariant::Scalar(MetricKind::Mlr { .. }) => "rl-mlr",
            TrainVariant::EndToEnd => "rl-cnn",
        }
    }
}

/// Exploration rate after `t` stored experiences: geometric interpolation
/// from `epsilon_start` at 0 to `epsilon_end` at `epsilon_decay_span`,
/// constant afterwards. Both endpoints are hit exactly.
pub fn epsilon(t: u64, cfg: &TrainConfig) -> f64 {
    if t == 0 {
        return cfg.epsilon_start;
    }
    if t >= cfg.epsilon_decay_span {
        return cfg.epsilon_end;
    }
    let frac = t as f64 / cfg.epsilon_decay_span as f64;
    cfg.epsilon_start * (cfg.epsilon_end / cfg.epsilon_start).powf(frac)
}

/// Epsilon-greedy action choice over the three q-values.
pub fn select_action(q: &[f32], eps: f64, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < eps {
        rng.random_range(0..ACTIONS.len())
    } else {
        argmax_action(q)
    }
}

/// Discounted TD target. Scans are treated as a continuing task, so there
/// is no terminal cut: the last stored transition of an episode still
/// bootstraps from its successor state.
pub fn td_target(reward: f64, max_next_q: f64, gamma: f64) -> f64 {
    reward + gamma * max_next_q
}

/// Target-network tracker. The EMA runs in f64 so long update chains stay
/// at the closed form; a quantized `f32` shadow copy serves forwards.
#[derive(Debug, Clone)]
pub struct EmaTarget<P: ParamTensors + Clone> {
    values: Vec<Vec<f64>>,
    shadow: P,
}

impl<P: ParamTensors + Clone> EmaTarget<P> {
    pub fn new(online: &P) -> Self {
        let values = online
            .tensors()
            .iter()
            .map(|(_, t)| t.data.iter().map(|&v| v as f64).collect())
            .collect();
        EmaTarget {
            values,
            shadow: online.clone(),
        }
    }

    /// `theta_target <- beta * theta_online + (1 - beta) * theta_target`
    /// for every parameter.
    pub fn update(&mut self, online: &P, beta: f64) {
        let tensors = online.tensors();
        assert_eq!(tensors.len(), self.values.len());
        let mut shadows = self.shadow.tensors_mut();
        for ((vals, (_, online_t)), (_, shadow_t)) in
            self.values.iter_mut().zip(&tensors).zip(shadows.iter_mut())
        {
            assert_eq!(vals.len(), online_t.len());
            for i in 0..vals.len() {
                vals[i] = beta * online_t.data[i] as f64 + (1.0 - beta) * vals[i];
                shadow_t.data[i] = vals[i] as f32;
            }
        }
    }

    pub fn shadow(&self) -> &P {
        &self.shadow
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Free-function form of the EMA update.
pub fn ema_update<P: ParamTensors + Clone>(target: &mut EmaTarget<P>, online: &P, beta: f64) {
    target.update(online, beta);
}

/// Per-episode log entry. `val_mae` is NaN until the first validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub experiences: u64,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub mean_return: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Wall-clock seconds per row; kept apart from the deterministic rows.
    pub wall_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "episode",
            "experiences",
            "epsilon",
            "mean_loss",
            "mean_return",
            "val_mae",
            "wall_seconds",
        ])?;
        for (row, wall) in self.rows.iter().zip(&self.wall_seconds) {
            w.write_record([
                row.episode.to_string(),
                row.experiences.to_string(),
                row.epsilon.to_string(),
                row.mean_loss.to_string(),
                row.mean_return.to_string(),
                row.val_mae.to_string(),
                wall.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_val_mae: f64,
    pub log: TrainLog,
}

// ---------------------------------------------------------------------------
// Transitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ScalarTransition {
    state: Vec<f32>,
    action: u8,
    reward: f32,
    next: Vec<f32>,
}

type PatchBuf = [f32; PATCH_PIXELS];

/// Stored end-to-end state: the raw patches (shared, newest first; `None`
/// for zero-filled slots before N steps) plus the focal-power history.
/// Encodings are recomputed through the current encoder at learn time.
#[derive(Debug, Clone)]
struct E2eStored {
    patches: [Option<Arc<PatchBuf>>; HISTORY_LEN],
    focals: [f32; HISTORY_LEN],
}

#[derive(Debug, Clone)]
struct E2eTransition {
    state: E2eStored,
    action: u8,
    reward: f32,
    next: E2eStored,
}

/// Upstream gradient restricted to the taken action's Q-value.
fn action_dq(dpred: &[f32], actions: &[u8], outputs: usize) -> Vec<f32> {
    let mut dq = vec![0.0f32; dpred.len() * outputs];
    for (i, (&g, &a)) in dpred.iter().zip(actions).enumerate() {
        dq[i * outputs + a as usize] = g;
    }
    dq
}

fn max_q(row: &[f32]) -> f64 {
    row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64
}

fn check_finite<P: ParamTensors>(params: &P, experiences: u64, episode: usize) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            experiences,
            episode,
            details: "network parameters left the finite range".into(),
        })
    }
}

/// 95th percentile of the metric over sharp training patches; the scale
/// that normalizes metric observations in the state vector.
fn metric_scale(scans: &ScanSet, kind: MetricKind, patch_size: usize) -> Result<f64> {
    let mut values = Vec::new();
    for i in 0..scans.len() {
        scans.with_scan(i, |scan| {
            let n = scan.frame_count();
            let stride = (n / 10).max(1);
            let mut t = 0;
            while t < n {
                if let Some(fs) = scan.f_star(t) {
                    let patch = scan.observe_patch(t, fs, patch_size)?;
                    values.push(evaluate_metric(kind, &patch));
                }
                t += stride;
            }
            Ok(())
        })?;
    }
    if values.is_empty() {
        return Ok(1.0);
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() as f64 * 0.95).ceil() as usize).clamp(1, values.len());
    let v = values[idx - 1];
    Ok(if v.is_finite() && v > 0.0 { v } else { 1.0 })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct Counters {
    experiences: u64,
    learn_steps: u64,
    episode: usize,
}

struct EpisodeStats {
    mean_loss: f64,
    mean_return: f64,
}

enum ModelState {
    Scalar {
        kind: MetricKind,
        normalizer: MetricNormalizer,
        online: QNetworkParams,
        target: EmaTarget<QNetworkParams>,
        opt: RmsProp,
        replay: ReplayMemory<ScalarTransition>,
    },
    E2e {
        online: E2eParams,
        target: EmaTarget<E2eParams>,
        opt: RmsProp,
        replay: ReplayMemory<E2eTransition>,
    },
}

impl ModelState {
    fn policy_spec(&self) -> PolicySpec {
        match self {
            ModelState::Scalar {
                kind,
                normalizer,
                online,
                ..
            } => PolicySpec::Learned {
                kind: *kind,
                normalizer: *normalizer,
                qnet: Arc::new(online.clone()),
            },
            ModelState::E2e { online, .. } => PolicySpec::EndToEnd {
                encoder: Arc::new(online.encoder.clone()),
                qnet: Arc::new(online.qnet.clone()),
            },
        }
    }

    fn checkpoint(&self, variant: TrainVariant, counters: &Counters) -> Checkpoint {
        let (metric, mlr_sigma, scale) = match self {
            ModelState::Scalar {
                kind, normalizer, ..
            } => (
                Some(kind.name().to_string()),
                match kind {
                    MetricKind::Mlr { sigma } => Some(*sigma),
                    MetricKind::Mgm => None,
                },
                normalizer.scale,
            ),
            ModelState::E2e { .. } => (None, None, 1.0),
        };
        let meta = CheckpointMeta {
            variant: variant.name().to_string(),
            metric,
            mlr_sigma,
            normalizer_scale: scale,
            train_steps: counters.learn_steps,
            experiences: counters.experiences,
        };
        match self {
            ModelState::Scalar { online, .. } => Checkpoint::from_params(online, meta),
            ModelState::E2e { online, .. } => Checkpoint::from_params(online, meta),
        }
    }
}

/// Trains one policy variant over the training scans, validating
/// periodically and keeping the checkpoint with the best validation MAE.
/// Fully determined by `cfg.seed` and the scan contents.
pub fn train(
    train_scans: &ScanSet,
    val_scans: &ScanSet,
    variant: TrainVariant,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_scans.is_empty() || val_scans.is_empty() {
        return Err(Error::Config("training and validation scan sets must be nonempty".into()));
    }

    let params_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let mut model = match variant {
        TrainVariant::Scalar(kind) => {
            let scale = metric_scale(train_scans, kind, cfg.patch_size)?;
            let online = QNetworkParams::new(SCALAR_STATE_WIDTH, params_seed);
            ModelState::Scalar {
                kind,
                normalizer: MetricNormalizer::new(scale)?,
                target: EmaTarget::new(&online),
                opt: RmsProp::new(
                    cfg.learning_rate as f32,
                    cfg.rmsprop_smoothing as f32,
                    cfg.rmsprop_epsilon as f32,
                ),
                replay: ReplayMemory::new(cfg.replay_capacity),
                online,
            }
        }
        TrainVariant::EndToEnd => {
            let online = E2eParams {
                encoder: EncoderParams::new(params_seed),
                qnet: QNetworkParams::new(E2E_STATE_WIDTH, params_seed.wrapping_add(1)),
            };
            ModelState::E2e {
                target: EmaTarget::new(&online),
                opt: RmsProp::new(
                    cfg.learning_rate as f32,
                    cfg.rmsprop_smoothing as f32,
                    cfg.rmsprop_epsilon as f32,
                ),
                replay: ReplayMemory::new(cfg.replay_capacity),
                online,
            }
        }
    };

    if let Some(ckpt) = resume {
        match &mut model {
            ModelState::Scalar { online, .. } => ckpt.load_into(online)?,
            ModelState::E2e { online, .. } => {
                ckpt.load_into(online)?;
            }
        }
        // Target restarts aligned with the resumed online weights.
        match &mut model {
            ModelState::Scalar { online, target, .. } => *target = EmaTarget::new(online),
            ModelState::E2e { online, target, .. } => *target = EmaTarget::new(online),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1b5_4a32_d192_ed03);
    let mut counters = Counters {
        experiences: 0,
        learn_steps: 0,
        episode: 0,
    };
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut best: Option<(f64, Checkpoint)> = None;

    while counters.experiences < cfg.total_experiences {
        counters.episode += 1;
        let scan_idx = rng.random_range(0..train_scans.len());
        let f0 = rng.random::<f64>();
        let stats = train_scans.with_scan(scan_idx, |scan| {
            run_episode(&mut model, scan, f0, cfg, &mut rng, &mut counters)
        })?;

        let validate_now = counters.episode % cfg.validation_every == 0
            || counters.experiences >= cfg.total_experiences;
        let mut val_mae = log.rows.last().map_or(f64::NAN, |r| r.val_mae);
        if validate_now {
            let report = evaluate_policy(
                &model.policy_spec(),
                val_scans,
                &InitialFocus::Fixed(0.5),
                cfg.patch_size,
                cfg.seed,
            )?;
            val_mae = report.mae;
            if best.as_ref().map_or(true, |(b, _)| val_mae < *b) {
                best = Some((val_mae, model.checkpoint(variant, &counters)));
            }
        }

        log.rows.push(LogRow {
            episode: counters.episode,
            experiences: counters.experiences,
            epsilon: epsilon(counters.experiences, cfg),
            mean_loss: stats.mean_loss,
            mean_return: stats.mean_return,
            val_mae,
        });
        log.wall_seconds.push(started.elapsed().as_secs_f64());
    }

    let last = model.checkpoint(variant, &counters);
    let (best_val_mae, best) = match best {
        Some((mae, ckpt)) => (mae, ckpt),
        None => (f64::NAN, last.clone()),
    };
    Ok(TrainOutcome {
        best,
        last,
        best_val_mae,
        log,
    })
}

fn run_episode(
    model: &mut ModelState,
    scan: &crate::scan::Scan,
    f0: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    counters: &mut Counters,
) -> Result<EpisodeStats> {
    let frames = scan.frame_count();
    let mut f = f0;
    let mut losses = 0.0f64;
    let mut loss_count = 0usize;
    let mut reward_sum = 0.0f64;
    let mut reward_count = 0usize;

    match model {
        ModelState::Scalar {
            kind,
            normalizer,
            online,
            target,
            opt,
            replay,
        } => {
            let mut history = PolicyHistory::new(0.0f64, f0);
            let mut pending: Option<(Vec<f32>, usize, f64)> = None;
            for t in 0..frames {
                if counters.experiences >= cfg.total_experiences {
                    break;
                }
                let patch = scan.observe_patch(t, f, cfg.patch_size)?;
                history.push(evaluate_metric(*kind, &patch), f);
                let state = assemble_scalar_state(&history, normalizer);

                if let Some((prev_state, prev_action, prev_reward)) = pending.take() {
                    replay.push(ScalarTransition {
                        state: prev_state,
                        action: prev_action as u8,
                        reward: prev_reward as f32,
                        next: state.clone(),
                    });
                    counters.experiences += 1;
                    if replay.len() >= cfg.warmup_transitions
                        && counters.experiences % cfg.learn_every as u64 == 0
                    {
                        let loss =
                            learn_scalar(online, target, opt, replay, cfg, rng, counters)?;
                        losses += loss as f64;
                        loss_count += 1;
                    }
                }

                let eps = epsilon(counters.experiences, cfg);
                let q = mlp_forward(online, &state)?;
                let action = select_action(&q, eps, rng);
                f = apply_action(f, action);
                let f_star = scan.f_star(t).ok_or_else(|| {
                    Error::Incompatible("training scans need ground-truth focus".into())
                })?;
                let reward = -(f_star - f).abs();
                reward_sum += reward;
                reward_count += 1;
                pending = Some((state, action, reward));
            }
        }
        ModelState::E2e {
            online,
            target,
            opt,
            replay,
        } => {
            let mut enc_history = PolicyHistory::new([0.0f32; ENCODING_WIDTH], f0);
            let mut patch_ring: std::collections::VecDeque<Option<Arc<PatchBuf>>> =
                (0..HISTORY_LEN).map(|_| None).collect();
            let mut pending: Option<(E2eStored, usize, f64)> = None;
            for t in 0..frames {
                if counters.experiences >= cfg.total_experiences {
                    break;
                }
                let patch = scan.observe_patch(t, f, cfg.patch_size)?;
                let pixels = patch_to_f32(&patch)?;
                let mut buf = [0.0f32; PATCH_PIXELS];
                buf.copy_from_slice(&pixels);
                let arc = Arc::new(buf);
                let encoding = cnn_encode(&online.encoder, arc.as_ref())?;
                enc_history.push(encoding, f);
                patch_ring.push_front(Some(arc));
                patch_ring.pop_back();

                let stored = snapshot(&patch_ring, &enc_history);
                if let Some((prev_state, prev_action, prev_reward)) = pending.take() {
                    replay.push(E2eTransition {
                        state: prev_state,
                        action: prev_action as u8,
                        reward: prev_reward as f32,
                        next: stored.clone(),
                    });
                    counters.experiences += 1;
                    if replay.len() >= cfg.warmup_transitions
                        && counters.experiences % cfg.learn_every as u64 == 0
                    {
                        let loss = learn_e2e(online, target, opt, replay, cfg, rng, counters)?;
                        losses += loss as f64;
                        loss_count += 1;
                    }
                }

                let eps = epsilon(counters.experiences, cfg);
                let state = assemble_e2e_state(&enc_history);
                let q = mlp_forward(&online.qnet, &state)?;
                let action = select_action(&q, eps, rng);
                f = apply_action(f, action);
                let f_star = scan.f_star(t).ok_or_else(|| {
                    Error::Incompatible("training scans need ground-truth focus".into())
                })?;
                let reward = -(f_star - f).abs();
                reward_sum += reward;
                reward_count += 1;
                pending = Some((stored, action, reward));
            }
        }
    }

    Ok(EpisodeStats {
        mean_loss: if loss_count > 0 {
            losses / loss_count as f64
        } else {
            f64::NAN
        },
        mean_return: if reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            f64::NAN
        },
    })
}

fn snapshot(
    ring: &std::collections::VecDeque<Option<Arc<PatchBuf>>>,
    history: &PolicyHistory<[f32; ENCODING_WIDTH]>,
) -> E2eStored {
    let mut patches: [Option<Arc<PatchBuf>>; HISTORY_LEN] = Default::default();
    for (slot, p) in ring.iter().enumerate() {
        patches[slot] = p.clone();
    }
    let mut focals = [0.0f32; HISTORY_LEN];
    for (slot, (_, f)) in history.entries().enumerate() {
        focals[slot] = *f as f32;
    }
    E2eStored { patches, focals }
}

#[allow(clippy::too_many_arguments)]
fn learn_scalar(
    online: &mut QNetworkParams,
    target: &mut EmaTarget<QNetworkParams>,
    opt: &mut RmsProp,
    replay: &ReplayMemory<ScalarTransition>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    counters: &mut Counters,
) -> Result<f32> {
    let batch = cfg.batch_size;
    let indices = replay.sample_indices(batch, rng);
    let width = SCALAR_STATE_WIDTH;
    let mut states = Vec::with_capacity(batch * width);
    let mut next_states = Vec::with_capacity(batch * width);
    let mut rewards = Vec::with_capacity(batch);
    let mut actions = Vec::with_capacity(batch);
    for &i in &indices {
        let tr = replay.get(i);
        states.extend_from_slice(&tr.state);
        next_states.extend_from_slice(&tr.next);
        rewards.push(tr.reward);
        actions.push(tr.action);
    }

    let (q_next, _) = mlp_forward_batch(target.shadow(), &next_states, batch)?;
    let outputs = ACTIONS.len();
    let targets: Vec<f32> = (0..batch)
        .map(|i| {
            td_target(
                rewards[i] as f64,
                max_q(&q_next[i * outputs..(i + 1) * outputs]),
                cfg.gamma,
            ) as f32
        })
        .collect();

    let (q, tape) = mlp_forward_batch(online, &states, batch)?;
    let preds: Vec<f32> = (0..batch)
        .map(|i| q[i * outputs + actions[i] as usize])
        .collect();
    let loss = huber_loss(&preds, &targets);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            experiences: counters.experiences,
            episode: counters.episode,
            details: format!("loss {loss}, first target {:?}", targets.first()),
        });
    }
    if std::env::var_os("AFRL_DEBUG_LEARN").is_some() && counters.learn_steps % 2000 == 0 {
        let mq = preds.iter().sum::<f32>() / batch as f32;
        let my = targets.iter().sum::<f32>() / batch as f32;
        let mr = rewards.iter().sum::<f32>() / batch as f32;
        let q0 = &q[0..3];
        eprintln!(
            "learn {:>7}: mean pred {mq:.4} target {my:.4} reward {mr:.4} q0 {q0:?}",
            counters.learn_steps
        );
    }
    let dq = action_dq(&huber_grad(&preds, &targets), &actions, outputs);
    let mut grads = online.zeros_like();
    mlp_backward(online, &tape, &dq, &mut grads, false)?;
    opt.step(online, &grads);
    target.update(online, cfg.ema_beta);
    counters.learn_steps += 1;
    check_finite(online, counters.experiences, counters.episode)?;
    Ok(loss)
}

/// Builds the 72-wide state from stored patches through `encoder`,
/// optionally keeping per-slot tapes for the backward pass. Zero-filled
/// slots contribute zero encodings and receive no gradient.
fn assemble_stored(
    stored: &E2eStored,
    encoder: &EncoderParams,
    mut tapes: Option<&mut Vec<(usize, EncoderTape)>>,
) -> Result<Vec<f32>> {
    let mut state = vec![0.0f32; E2E_STATE_WIDTH];
    for (slot, patch) in stored.patches.iter().enumerate() {
        if let Some(p) = patch {
            let enc = if let Some(tapes) = tapes.as_deref_mut() {
                let (enc, tape) = cnn_encode_with_tape(encoder, p.as_ref())?;
                tapes.push((slot, tape));
                enc
            } else {
                cnn_encode(encoder, p.as_ref())?
            };
            state[slot * ENCODING_WIDTH..(slot + 1) * ENCODING_WIDTH].copy_from_slice(&enc);
        }
    }
    state[HISTORY_LEN * ENCODING_WIDTH..].copy_from_slice(&stored.focals);
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn learn_e2e(
    online: &mut E2eParams,
    target: &mut EmaTarget<E2eParams>,
    opt: &mut RmsProp,
    replay: &ReplayMemory<E2eTransition>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    counters: &mut Counters,
) -> Result<f32> {
    let batch = cfg.batch_size;
    let indices = replay.sample_indices(batch, rng);
    let outputs = ACTIONS.len();

    let mut next_states = Vec::with_capacity(batch * E2E_STATE_WIDTH);
    let mut rewards = Vec::with_capacity(batch);
    let mut actions = Vec::with_capacity(batch);
    for &i in &indices {
        let tr = replay.get(i);
        next_states.extend(assemble_stored(&tr.next, &target.shadow().encoder, None)?);
        rewards.push(tr.reward);
        actions.push(tr.action);
    }
    let (q_next, _) = mlp_forward_batch(&target.shadow().qnet, &next_states, batch)?;
    let targets: Vec<f32> = (0..batch)
        .map(|i| {
            td_target(
                rewards[i] as f64,
                max_q(&q_next[i * outputs..(i + 1) * outputs]),
                cfg.gamma,
            ) as f32
        })
        .collect();

    let mut states = Vec::with_capacity(batch * E2E_STATE_WIDTH);
    let mut all_tapes: Vec<Vec<(usize, EncoderTape)>> = Vec::with_capacity(batch);
    for &i in &indices {
        let tr = replay.get(i);
        let mut tapes = Vec::with_capacity(HISTORY_LEN);
        states.extend(assemble_stored(&tr.state, &online.encoder, Some(&mut tapes))?);
        all_tapes.push(tapes);
    }
    let (q, tape) = mlp_forward_batch(&online.qnet, &states, batch)?;
    let preds: Vec<f32> = (0..batch)
        .map(|i| q[i * outputs + actions[i] as usize])
        .collect();
    let loss = huber_loss(&preds, &targets);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            experiences: counters.experiences,
            episode: counters.episode,
            details: format!("loss {loss}, first target {:?}", targets.first()),
        });
    }
    let dq = action_dq(&huber_grad(&preds, &targets), &actions, outputs);
    let mut grads = online.zeros_like();
    let dx = mlp_backward(&online.qnet, &tape, &dq, &mut grads.qnet, true)?
        .expect("input gradient requested");
    for (bi, tapes) in all_tapes.iter().enumerate() {
        for (slot, enc_tape) in tapes {
            let off = bi * E2E_STATE_WIDTH + slot * ENCODING_WIDTH;
            let mut dout = [0.0f32; ENCODING_WIDTH];
            dout.copy_from_slice(&dx[off..off + ENCODING_WIDTH]);
            cnn_backward(&online.encoder, enc_tape, &dout, &mut grads.encoder);
        }
    }
    opt.step(online, &grads);
    target.update(online, cfg.ema_beta);
    counters.learn_steps += 1;
    check_finite(online, counters.experiences, counters.episode)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;
    use crate::scan::{build_simulated_scan, Scan, WalkConfig};
    use crate::texture::generate_texture;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            replay_capacity: 256,
            batch_size: 8,
            warmup_transitions: 16,
            epsilon_decay_span: 100,
            total_experiences: 120,
            validation_every: 2,
            ..TrainConfig::default()
        }
    }

    fn scan_set(count: usize, frames: usize, seed0: u64) -> ScanSet {
        let tex = generate_texture(72, 72, 900);
        let scans = (0..count)
            .map(|i| {
                let cfg = WalkConfig {
                    seed: seed0 + i as u64,
                    ..WalkConfig::default()
                };
                let scan = build_simulated_scan(
                    std::slice::from_ref(&tex),
                    "tex",
                    frames,
                    64,
                    &cfg,
                )
                .unwrap();
                (format!("scan_{i:05}"), Scan::Simulated(scan))
            })
            .collect();
        ScanSet::from_memory(scans)
    }

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            epsilon_decay_span: 2_000_000,
            ..TrainConfig::default()
        };
        assert_eq!(epsilon(0, &cfg), 1.0);
        assert_eq!(epsilon(2_000_000, &cfg), 0.1);
        assert_eq!(epsilon(3_000_000, &cfg), 0.1);
        let mid = epsilon(1_000_000, &cfg);
        assert!((mid - 0.1f64.sqrt()).abs() < 1e-12, "mid = {mid}");
    }

    #[test]
    fn select_action_is_greedy_at_zero_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(select_action(&[0.1, 0.9, 0.2], 0.0, &mut rng), 1);
        }
    }

    #[test]
    fn select_action_uniform_at_full_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let draws = 30_000;
        for _ in 0..draws {
            counts[select_action(&[5.0, -1.0, 0.0], 1.0, &mut rng)] += 1;
        }
        for c in counts {
            let frac = c as f64 / draws as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "frac = {frac}");
        }
    }

    #[test]
    fn select_action_mixture_at_half_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 30_000;
        let mut greedy = 0usize;
        for _ in 0..draws {
            if select_action(&[1.0, 0.0, 0.0], 0.5, &mut rng) == 0 {
                greedy += 1;
            }
        }
        let frac = greedy as f64 / draws as f64;
        let expect = 0.5 + 0.5 / 3.0;
        assert!((frac - expect).abs() < 0.02, "frac = {frac}");
    }

    #[test]
    fn td_target_arithmetic() {
        assert!((td_target(-0.4, 1.0, 0.99) - 0.59).abs() < 1e-12);
        assert_eq!(td_target(-0.25, 0.0, 0.99), -0.25);
        let c = 3.5;
        assert!((td_target(0.0, c, 0.99) - 0.99 * c).abs() < 1e-12);
    }

    struct OneTensor(Tensor);

    impl ParamTensors for OneTensor {
        fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
            vec![("t", &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
            vec![("t", &mut self.0)]
        }
        fn zeros_like(&self) -> Self {
            OneTensor(Tensor::zeros(self.0.shape.clone()))
        }
    }

    impl Clone for OneTensor {
        fn clone(&self) -> Self {
            OneTensor(self.0.clone())
        }
    }

    #[test]
    fn ema_fixed_point_and_first_step() {
        let online = OneTensor(Tensor {
            shape: vec![1],
            data: vec![1.0],
        });
        let mut target = EmaTarget::new(&online);
        target.update(&online, 0.005);
        assert_eq!(target.values()[0][0], 1.0); // theta_online == theta_target

        let zero = OneTensor(Tensor::zeros(vec![1]));
        let mut target = EmaTarget::new(&zero);
        target.update(&online, 0.005);
        assert!((target.values()[0][0] - 0.005).abs() < 1e-15);
        assert!(target.shadow().0.data[0] > 0.0);
    }

    #[test]
    fn ema_matches_closed_form_over_many_steps() {
        let online = OneTensor(Tensor {
            shape: vec![1],
            data: vec![1.0],
        });
        let zero = OneTensor(Tensor::zeros(vec![1]));
        let mut target = EmaTarget::new(&zero);
        for k in 1..=2000u32 {
            target.update(&online, 0.005);
            let closed = 1.0 - 0.995f64.powi(k as i32);
            assert!(
                (target.values()[0][0] - closed).abs() < 1e-9,
                "k = {k}: {} vs {closed}",
                target.values()[0][0]
            );
        }
    }

    #[test]
    fn ema_target_differs_from_online_after_one_step() {
        let online = QNetworkParams::with_dims(4, 6, 3, 5);
        let start = QNetworkParams::with_dims(4, 6, 3, 9);
        let mut target = EmaTarget::new(&start);
        target.update(&online, 0.005);
        assert_ne!(target.shadow(), &online);
    }

    #[test]
    fn gradient_flows_only_through_taken_action() {
        let params = QNetworkParams::with_dims(4, 6, 3, 7);
        let states = [0.3f32, -0.2, 0.9, 0.1];
        let (q, tape) = mlp_forward_batch(&params, &states, 1).unwrap();
        let dq = action_dq(&[1.0], &[2u8], 3);
        assert_eq!(dq, vec![0.0, 0.0, 1.0]);
        let mut grads = params.zeros_like();
        mlp_backward(&params, &tape, &dq, &mut grads, false).unwrap();
        // Head rows for the untaken actions stay zero.
        assert!(grads.w3.data[0..6].iter().all(|&v| v == 0.0));
        assert!(grads.w3.data[6..12].iter().all(|&v| v == 0.0));
        assert!(grads.w3.data[12..18].iter().any(|&v| v != 0.0));
        assert_eq!(grads.b3.data[..2], [0.0, 0.0]);
        let _ = q;
    }

    #[test]
    fn zero_budget_returns_untrained_checkpoint_and_empty_log() {
        let scans = scan_set(2, 6, 0);
        let cfg = TrainConfig {
            total_experiences: 0,
            ..small_cfg()
        };
        let out = train(&scans, &scans, TrainVariant::Scalar(MetricKind::Mgm), &cfg, None)
            .unwrap();
        assert!(out.log.rows.is_empty());
        assert_eq!(out.best.meta.experiences, 0);
        assert_eq!(out.best, out.last);
        let mut q = QNetworkParams::new(SCALAR_STATE_WIDTH, 0);
        out.best.load_into(&mut q).unwrap();
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_runs() {
        let scans = scan_set(2, 10, 3);
        let cfg = TrainConfig {
            seed: 42,
            ..small_cfg()
        };
        let a = train(&scans, &scans, TrainVariant::Scalar(MetricKind::Mgm), &cfg, None)
            .unwrap();
        let b = train(&scans, &scans, TrainVariant::Scalar(MetricKind::Mgm), &cfg, None)
            .unwrap();
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        // Bit-level row comparison (early rows hold NaN placeholders).
        assert_eq!(a.log.rows.len(), b.log.rows.len());
        for (ra, rb) in a.log.rows.iter().zip(&b.log.rows) {
            assert_eq!(ra.episode, rb.episode);
            assert_eq!(ra.experiences, rb.experiences);
            assert_eq!(ra.epsilon.to_bits(), rb.epsilon.to_bits());
            assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
            assert_eq!(ra.mean_return.to_bits(), rb.mean_return.to_bits());
            assert_eq!(ra.val_mae.to_bits(), rb.val_mae.to_bits());
        }
    }

    #[test]
    fn rewards_logged_within_unit_band() {
        let scans = scan_set(2, 10, 7);
        let cfg = small_cfg();
        let out = train(&scans, &scans, TrainVariant::Scalar(MetricKind::Mgm), &cfg, None)
            .unwrap();
        for row in &out.log.rows {
            assert!(row.mean_return <= 0.0 && row.mean_return >= -1.0);
            assert!((0.1..=1.0).contains(&row.epsilon));
        }
        assert_eq!(out.last.meta.experiences, 120);
    }

    #[test]
    fn e2e_smoke_trains_and_checkpoints() {
        let scans = scan_set(1, 8, 11);
        let cfg = TrainConfig {
            replay_capacity: 64,
            batch_size: 4,
            warmup_transitions: 8,
            epsilon_decay_span: 30,
            total_experiences: 40,
            validation_every: 3,
            ..TrainConfig::default()
        };
        let out = train(&scans, &scans, TrainVariant::EndToEnd, &cfg, None).unwrap();
        assert_eq!(out.last.meta.variant, "rl-cnn");
        let spec = PolicySpec::from_checkpoint(&out.best).unwrap();
        assert_eq!(spec.descriptor(), "rl-cnn");
        // Losses were recorded and stayed finite.
        assert!(out
            .log
            .rows
            .iter()
            .any(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn resume_rejects_mismatched_architecture() {
        let scans = scan_set(1, 8, 13);
        let cfg = small_cfg();
        let out = train(&scans, &scans, TrainVariant::EndToEnd, &TrainConfig {
            total_experiences: 0,
            ..cfg.clone()
        }, None)
        .unwrap();
        let err = train(
            &scans,
            &scans,
            TrainVariant::Scalar(MetricKind::Mgm),
            &cfg,
            Some(&out.last),
        );
        assert!(matches!(err, Err(Error::ArchitectureMismatch(_))));
    }
}
