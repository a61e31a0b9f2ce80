//! The autofocus policy ladder: fixed, metric hill-climber, learned
//! scalar-metric policy, and the end-to-end CNN policy, plus the shared
//! state-history assembly for the learned variants.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{evaluate_metric, MetricKind, DEFAULT_MLR_SIGMA};
use crate::neural::checkpoint::Checkpoint;
use crate::neural::{
    cnn_encode, mlp_forward, EncoderParams, QNetworkParams, ENCODING_WIDTH, PATCH_PIXELS,
};

/// Focal-power step size `h`.
pub const ACTION_STEP: f64 = 0.05;
/// Ordered action set `(-h, 0, +h)`.
pub const ACTIONS: [f64; 3] = [-ACTION_STEP, 0.0, ACTION_STEP];
/// Number of (observation, focal power) pairs in the policy state.
pub const HISTORY_LEN: usize = 8;
/// State width of the scalar-metric policy: N * (metric, focal power).
pub const SCALAR_STATE_WIDTH: usize = 2 * HISTORY_LEN;
/// State width of the end-to-end policy: N encodings then N focal powers.
pub const E2E_STATE_WIDTH: usize = HISTORY_LEN * ENCODING_WIDTH + HISTORY_LEN;

/// Argmax over the three q-values. Ties prefer the lower-magnitude
/// action: hold (index 1), then -h (index 0), then +h.
pub fn argmax_action(q: &[f32]) -> usize {
    debug_assert_eq!(q.len(), ACTIONS.len());
    let mut best = 1usize;
    for i in [0usize, 2] {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

/// Applies action `a` to `f` and confines the result to `[0,1]`.
pub fn apply_action(f: f64, action: usize) -> f64 {
    (f + ACTIONS[action]).clamp(0.0, 1.0)
}

/// Scale divisor applied to raw metric values before they enter the
/// state vector. Stored in checkpoints so inference matches training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricNormalizer {
    pub scale: f64,
}

impl MetricNormalizer {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "metric normalizer scale must be positive and finite, got {scale}"
            )));
        }
        Ok(MetricNormalizer { scale })
    }
}

/// Ring of the N most recent (observation, focal power) pairs, newest
/// first. Before N steps have elapsed the missing slots hold a zero
/// observation and the initial focal power.
#[derive(Debug, Clone)]
pub struct PolicyHistory<O: Copy> {
    entries: VecDeque<(O, f64)>,
}

impl<O: Copy> PolicyHistory<O> {
    pub fn new(zero_obs: O, initial_f: f64) -> Self {
        let entries = (0..HISTORY_LEN).map(|_| (zero_obs, initial_f)).collect();
        PolicyHistory { entries }
    }

    pub fn push(&mut self, obs: O, f: f64) {
        self.entries.push_front((obs, f));
        self.entries.pop_back();
    }

    /// Newest first.
    pub fn entries(&self) -> impl Iterator<Item = &(O, f64)> {
        self.entries.iter()
    }
}

/// Scalar-metric state vector: interleaved `(metric / scale, f)` pairs,
/// newest first. Width 16.
pub fn assemble_scalar_state(
    history: &PolicyHistory<f64>,
    normalizer: &MetricNormalizer,
) -> Vec<f32> {
    let mut state = Vec::with_capacity(SCALAR_STATE_WIDTH);
    for (obs, f) in history.entries() {
        state.push((obs / normalizer.scale) as f32);
        state.push(*f as f32);
    }
    state
}

/// End-to-end state vector: the N 8-wide encodings newest first, followed
/// by the N focal powers newest first. Width 72.
pub fn assemble_e2e_state(history: &PolicyHistory<[f32; ENCODING_WIDTH]>) -> Vec<f32> {
    let mut state = Vec::with_capacity(E2E_STATE_WIDTH);
    for (enc, _) in history.entries() {
        state.extend_from_slice(enc);
    }
    for (_, f) in history.entries() {
        state.push(*f as f32);
    }
    state
}

/// Greedy Q step: argmax action applied to `f_t` with clamping.
pub fn learned_policy_step(
    qnet: &QNetworkParams,
    state: &[f32],
    f_t: f64,
) -> Result<(f64, usize)> {
    let q = mlp_forward(qnet, state)?;
    let action = argmax_action(&q);
    Ok((apply_action(f_t, action), action))
}

/// Hill-climber state: keeps walking in the previous direction while the
/// metric improves, reverses otherwise, and never rests.
#[derive(Debug, Clone, Copy)]
pub struct HillClimber {
    f: f64,
    prev_f: f64,
    prev_metric: f64,
    /// Direction of the previous executed step, -1 or +1. Starts at +1;
    /// a zero-length executed move (clamping) flips it.
    dir: f64,
}

impl HillClimber {
    pub fn new(f0: f64) -> Self {
        HillClimber {
            f: f0,
            prev_f: f0,
            prev_metric: f64::NEG_INFINITY,
            dir: 1.0,
        }
    }

    pub fn focal_power(&self) -> f64 {
        self.f
    }

    /// One control step given the metric observed at the current focal
    /// power. Returns the next focal power.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improving = metric > self.prev_metric;
        let interior = self.f > 0.0 && self.f < 1.0;
        let raw = if interior && improving {
            self.f + self.dir * ACTION_STEP
        } else {
            self.f - self.dir * ACTION_STEP
        };
        let next = raw.clamp(0.0, 1.0);
        let executed = next - self.f;
        self.dir = if executed > 0.0 {
            1.0
        } else if executed < 0.0 {
            -1.0
        } else {
            -self.dir
        };
        self.prev_metric = metric;
        self.prev_f = self.f;
        self.f = next;
        next
    }
}

// ---------------------------------------------------------------------------
// Policy runners
// ---------------------------------------------------------------------------

/// Immutable description of a policy; instantiated per scan rollout.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Fixed {
        f0: f64,
    },
    HillClimb {
        kind: MetricKind,
    },
    Learned {
        kind: MetricKind,
        normalizer: MetricNormalizer,
        qnet: Arc<QNetworkParams>,
    },
    EndToEnd {
        encoder: Arc<EncoderParams>,
        qnet: Arc<QNetworkParams>,
    },
}

impl PolicySpec {
    pub fn descriptor(&self) -> String {
        match self {
            PolicySpec::Fixed { f0 } => format!("fixed@{f0}"),
            PolicySpec::HillClimb { kind } => format!("hc-{}", kind.name()),
            PolicySpec::Learned { kind, .. } => format!("rl-{}", kind.name()),
            PolicySpec::EndToEnd { .. } => "rl-cnn".to_string(),
        }
    }

    /// Whether rollouts need the observed patch at all (the fixed policy
    /// ignores it, so rendering can be skipped).
    pub fn needs_observation(&self) -> bool {
        !matches!(self, PolicySpec::Fixed { .. })
    }

    pub fn instantiate(&self, initial_f: f64) -> PolicyInstance {
        match self {
            PolicySpec::Fixed { f0 } => PolicyInstance::Fixed { f: *f0 },
            PolicySpec::HillClimb { kind } => PolicyInstance::HillClimb {
                kind: *kind,
                state: HillClimber::new(initial_f),
            },
            PolicySpec::Learned {
                kind,
                normalizer,
                qnet,
            } => PolicyInstance::Learned {
                kind: *kind,
                normalizer: *normalizer,
                qnet: qnet.clone(),
                history: PolicyHistory::new(0.0, initial_f),
                f: initial_f,
            },
            PolicySpec::EndToEnd { encoder, qnet } => PolicyInstance::EndToEnd {
                encoder: encoder.clone(),
                qnet: qnet.clone(),
                history: PolicyHistory::new([0.0; ENCODING_WIDTH], initial_f),
                f: initial_f,
                encoder_invocations: 0,
            },
        }
    }

    /// Rebuilds a learned policy from a training checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta.variant.as_str() {
            "rl-mgm" | "rl-mlr" => {
                let kind = if ckpt.meta.variant == "rl-mgm" {
                    MetricKind::Mgm
                } else {
                    MetricKind::Mlr {
                        sigma: ckpt.meta.mlr_sigma.unwrap_or(DEFAULT_MLR_SIGMA),
                    }
                };
                let mut qnet = QNetworkParams::new(SCALAR_STATE_WIDTH, 0);
                ckpt.load_into(&mut qnet)?;
                Ok(PolicySpec::Learned {
                    kind,
                    normalizer: MetricNormalizer::new(ckpt.meta.normalizer_scale)?,
                    qnet: Arc::new(qnet),
                })
            }
            "rl-cnn" => {
                let mut params = crate::neural::E2eParams {
                    encoder: EncoderParams::new(0),
                    qnet: QNetworkParams::new(E2E_STATE_WIDTH, 0),
                };
                ckpt.load_into(&mut params)?;
                Ok(PolicySpec::EndToEnd {
                    encoder: Arc::new(params.encoder),
                    qnet: Arc::new(params.qnet),
                })
            }
            other => Err(Error::ArchitectureMismatch(format!(
                "checkpoint variant {other:?} is not a policy"
            ))),
        }
    }
}

/// Mutable per-rollout policy state. `step` consumes the patch observed
/// at the current focal power and returns the next focal power.
#[derive(Debug, Clone)]
pub enum PolicyInstance {
    Fixed {
        f: f64,
    },
    HillClimb {
        kind: MetricKind,
        state: HillClimber,
    },
    Learned {
        kind: MetricKind,
        normalizer: MetricNormalizer,
        qnet: Arc<QNetworkParams>,
        history: PolicyHistory<f64>,
        f: f64,
    },
    EndToEnd {
        encoder: Arc<EncoderParams>,
        qnet: Arc<QNetworkParams>,
        history: PolicyHistory<[f32; ENCODING_WIDTH]>,
        f: f64,
        encoder_invocations: u64,
    },
}

impl PolicyInstance {
    pub fn focal_power(&self) -> f64 {
        match self {
            PolicyInstance::Fixed { f }
            | PolicyInstance::Learned { f, .. }
            | PolicyInstance::EndToEnd { f, .. } => *f,
            PolicyInstance::HillClimb { state, .. } => state.focal_power(),
        }
    }

    pub fn step(&mut self, patch: &GrayImage) -> Result<f64> {
        match self {
            PolicyInstance::Fixed { f } => Ok(*f),
            PolicyInstance::HillClimb { kind, state } => {
                Ok(state.step(evaluate_metric(*kind, patch)))
            }
            PolicyInstance::Learned {
                kind,
                normalizer,
                qnet,
                history,
                f,
            } => {
                history.push(evaluate_metric(*kind, patch), *f);
                let state = assemble_scalar_state(history, normalizer);
                let (next, _) = learned_policy_step(qnet, &state, *f)?;
                *f = next;
                Ok(next)
            }
            PolicyInstance::EndToEnd {
                encoder,
                qnet,
                history,
                f,
                encoder_invocations,
            } => {
                let pixels = patch_to_f32(patch)?;
                // Each new frame is encoded exactly once; earlier
                // encodings stay cached in the history.
                let encoding = cnn_encode(encoder, &pixels)?;
                *encoder_invocations += 1;
                history.push(encoding, *f);
                let state = assemble_e2e_state(history);
                let (next, _) = learned_policy_step(qnet, &state, *f)?;
                *f = next;
                Ok(next)
            }
        }
    }

    /// Total number of encoder forward passes performed so far (end-to-end
    /// policy only).
    pub fn encoder_invocations(&self) -> u64 {
        match self {
            PolicyInstance::EndToEnd {
                encoder_invocations,
                ..
            } => *encoder_invocations,
            _ => 0,
        }
    }
}

/// Row-major `f32` pixels of a 32x32 patch.
pub fn patch_to_f32(patch: &GrayImage) -> Result<Vec<f32>> {
    if patch.width() * patch.height() != PATCH_PIXELS {
        return Err(Error::WidthMismatch {
            context: "policy patch",
            expected: PATCH_PIXELS,
            got: patch.width() * patch.height(),
        });
    }
    Ok(patch.pixels().iter().map(|&p| p as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ParamTensors;
    use crate::texture::generate_texture;

    #[test]
    fn fresh_history_zero_fills() {
        let h = PolicyHistory::new(0.0f64, 0.5);
        let norm = MetricNormalizer::new(1.0).unwrap();
        let state = assemble_scalar_state(&h, &norm);
        assert_eq!(state.len(), SCALAR_STATE_WIDTH);
        for pair in state.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 0.5);
        }
    }

    #[test]
    fn history_is_newest_first_and_normalized() {
        let mut h = PolicyHistory::new(0.0f64, 0.5);
        h.push(1.0, 0.5);
        h.push(2.0, 0.55);
        let norm = MetricNormalizer::new(1.0).unwrap();
        let state = assemble_scalar_state(&h, &norm);
        assert_eq!(state[0], 2.0);
        assert_eq!(state[1], 0.55);
        assert_eq!(state[2], 1.0);
        assert_eq!(state[3], 0.5);

        let mut h = PolicyHistory::new(0.0f64, 0.5);
        h.push(3.0, 0.5);
        let norm = MetricNormalizer::new(3.0).unwrap();
        let state = assemble_scalar_state(&h, &norm);
        assert_eq!(state[0], 1.0);
    }

    #[test]
    fn e2e_state_layout_is_encodings_then_focals() {
        let mut h = PolicyHistory::new([0.0f32; ENCODING_WIDTH], 0.5);
        let mut enc = [0.0f32; ENCODING_WIDTH];
        enc[0] = 9.0;
        h.push(enc, 0.7);
        let state = assemble_e2e_state(&h);
        assert_eq!(state.len(), E2E_STATE_WIDTH);
        assert_eq!(state[0], 9.0); // newest encoding first
        assert_eq!(state[ENCODING_WIDTH], 0.0); // older encodings zero-filled
        assert_eq!(state[HISTORY_LEN * ENCODING_WIDTH], 0.7); // newest focal power
        assert_eq!(state[HISTORY_LEN * ENCODING_WIDTH + 1], 0.5);
    }

    #[test]
    fn argmax_prefers_hold_then_down() {
        assert_eq!(argmax_action(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax_action(&[0.9, 0.1, 0.3]), 0);
        assert_eq!(argmax_action(&[0.5, 0.5, 0.5]), 1);
        assert_eq!(argmax_action(&[0.9, 0.1, 0.9]), 0);
        assert_eq!(argmax_action(&[0.1, 0.1, 0.9]), 2);
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let q = [0.2f32, -0.4, 0.7];
        let a = argmax_action(&q);
        for s in [0.5f32, 2.0, 10.0] {
            let scaled: Vec<f32> = q.iter().map(|v| v * s).collect();
            assert_eq!(argmax_action(&scaled), a);
        }
    }

    #[test]
    fn learned_step_clamps_to_unit_interval() {
        // Zero network: all q equal, tie resolves to hold.
        let qnet = QNetworkParams::new(SCALAR_STATE_WIDTH, 0).zeros_like();
        let state = vec![0.0f32; SCALAR_STATE_WIDTH];
        let (f, a) = learned_policy_step(&qnet, &state, 0.4).unwrap();
        assert_eq!(a, 1);
        assert_eq!(f, 0.4);
    }

    #[test]
    fn hill_climber_matches_update_rule() {
        // Improving metric, interior focal power: continue in d_prev.
        let mut hc = HillClimber {
            f: 0.50,
            prev_f: 0.45,
            prev_metric: 0.6,
            dir: 1.0,
        };
        assert!((hc.step(0.8) - 0.55).abs() < 1e-12);

        // Worsening metric: reverse, which here also moves up.
        let mut hc = HillClimber {
            f: 0.50,
            prev_f: 0.55,
            prev_metric: 0.8,
            dir: -1.0,
        };
        assert!((hc.step(0.6) - 0.55).abs() < 1e-12);

        // Boundary: the interior guard fails even when improving.
        let mut hc = HillClimber {
            f: 1.0,
            prev_f: 0.95,
            prev_metric: 0.6,
            dir: 1.0,
        };
        assert!((hc.step(0.8) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn hill_climber_converges_then_oscillates_on_static_peak() {
        // Static unimodal landscape observed at the current focal power.
        let target = 0.8;
        let metric = |f: f64| 1.0 - (f - target).abs();
        let mut hc = HillClimber::new(0.2);
        let budget = ((0.8f64 - 0.2).abs() / ACTION_STEP).ceil() as usize + 2;
        let mut converged_at = None;
        let mut f = 0.2;
        for step in 0..200 {
            f = hc.step(metric(f));
            if converged_at.is_none() && (f - target).abs() <= ACTION_STEP + 1e-12 {
                converged_at = Some(step + 1);
            }
            if converged_at.is_some() {
                assert!(
                    (f - target).abs() <= 2.0 * ACTION_STEP + 1e-12,
                    "left the oscillation band at step {step}: f = {f}"
                );
            }
        }
        assert!(converged_at.unwrap() <= budget, "took {converged_at:?}");
    }

    #[test]
    fn policies_respect_step_bound_and_range() {
        let patch = generate_texture(32, 32, 50);
        let qnet = Arc::new(QNetworkParams::new(SCALAR_STATE_WIDTH, 5));
        let enc = Arc::new(EncoderParams::new(5));
        let e2e_q = Arc::new(QNetworkParams::new(E2E_STATE_WIDTH, 6));
        let specs = [
            PolicySpec::Fixed { f0: 0.5 },
            PolicySpec::HillClimb {
                kind: MetricKind::Mgm,
            },
            PolicySpec::Learned {
                kind: MetricKind::Mgm,
                normalizer: MetricNormalizer::new(1.0).unwrap(),
                qnet,
            },
            PolicySpec::EndToEnd {
                encoder: enc,
                qnet: e2e_q,
            },
        ];
        for spec in &specs {
            for f0 in [0.0, 0.02, 0.5, 1.0] {
                let mut p = spec.instantiate(f0);
                let mut prev = p.focal_power();
                for _ in 0..40 {
                    let next = p.step(&patch).unwrap();
                    assert!((0.0..=1.0).contains(&next));
                    let bound = if matches!(spec, PolicySpec::Fixed { .. }) {
                        0.0
                    } else {
                        ACTION_STEP
                    };
                    assert!((next - prev).abs() <= bound + 1e-12);
                    prev = next;
                }
            }
        }
    }

    #[test]
    fn e2e_encodes_each_frame_exactly_once() {
        let spec = PolicySpec::EndToEnd {
            encoder: Arc::new(EncoderParams::new(1)),
            qnet: Arc::new(QNetworkParams::new(E2E_STATE_WIDTH, 2)),
        };
        let mut p = spec.instantiate(0.5);
        for t in 0..25 {
            let patch = generate_texture(32, 32, t);
            p.step(&patch).unwrap();
        }
        assert_eq!(p.encoder_invocations(), 25);
    }

    #[test]
    fn zero_encoder_reduces_to_focal_history_policy() {
        // With zero encoder weights every encoding is the zero vector, so
        // trajectories cannot depend on the observed patches.
        let spec = PolicySpec::EndToEnd {
            encoder: Arc::new(EncoderParams::new(0).zeros_like()),
            qnet: Arc::new(QNetworkParams::new(E2E_STATE_WIDTH, 3)),
        };
        let mut a = spec.instantiate(0.5);
        let mut b = spec.instantiate(0.5);
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        for t in 0..20 {
            fa.push(a.step(&generate_texture(32, 32, t)).unwrap());
            fb.push(b.step(&generate_texture(32, 32, t + 500)).unwrap());
        }
        assert_eq!(fa, fb);
    }
}
