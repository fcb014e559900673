//! Sequential rollout collection: a set of worker slots, each owning one
//! episode at a time, stepped in a fixed order so fixed seeds reproduce
//! batches bitwise. Transitions are stored ordered by worker id, then time,
//! which keeps per-episode segments contiguous.

use crate::autodiff::Tensor;
use crate::params::ParamTree;
use crate::policy::{self, ActMode, NetDims, PolicyError};
use crate::sim::{
    build_scene, EpisodeDriver, EpisodeMode, EpisodeResult, Scene, SceneConfig, SimConfig,
    SkillGoal, TaskPlan,
};
use crate::training::ppo::{gae, gaussian_log_prob};
use crate::sim::{gen_trajectory, TrajParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("rollout needs at least one worker and a positive horizon")]
    EmptyConfig,
    #[error("batch invariant violated: {0}")]
    BadBatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Builds a fresh episode whenever a worker slot needs one.
pub trait EpisodeSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> (Scene, TaskPlan);
}

/// Every episode replays one fixed scene and plan.
pub struct FixedTask {
    pub scene: Scene,
    pub plan: TaskPlan,
}

impl EpisodeSampler for FixedTask {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> (Scene, TaskPlan) {
        (self.scene.clone(), self.plan.clone())
    }
}

/// Random trajectory-following episodes on flat ground: a fresh start pose
/// and a fresh constraint-satisfying reference path each episode.
pub struct FollowSampler {
    /// Start positions are drawn from `[-area, area]²`.
    pub area: f64,
    pub params: TrajParams,
    pub max_transition_train: usize,
    pub max_transition_test: usize,
    pub success_threshold: f64,
    flat: Scene,
}

impl FollowSampler {
    pub fn new(area: f64, params: TrajParams) -> FollowSampler {
        let cfg = SceneConfig {
            name: "flat".into(),
            world_half_extent: (2.0 * area).max(30.0),
            objects: vec![],
        };
        FollowSampler {
            area,
            params,
            max_transition_train: 60,
            max_transition_test: 20,
            success_threshold: 0.3,
            flat: build_scene(&cfg).expect("an empty scene always builds"),
        }
    }
}

impl EpisodeSampler for FollowSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> (Scene, TaskPlan) {
        let start = [
            rng.gen_range(-self.area..=self.area),
            rng.gen_range(-self.area..=self.area),
        ];
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let traj = gen_trajectory(rng, start, heading, &self.params);
        let plan = TaskPlan {
            name: "follow-random".into(),
            goals: vec![SkillGoal::Traj { traj }],
            start,
            start_yaw: heading,
            max_transition_train: self.max_transition_train,
            max_transition_test: self.max_transition_test,
            success_threshold: self.success_threshold,
        };
        (self.flat.clone(), plan)
    }
}

/// Fixed-length observation history. Until `window` real frames arrive the
/// oldest frame is replicated, so the tensor is always `[window, width]`
/// with rows ordered oldest → newest.
pub struct WindowBuffer {
    window: usize,
    width: usize,
    frames: VecDeque<Vec<f64>>,
}

impl WindowBuffer {
    pub fn new(window: usize, width: usize) -> WindowBuffer {
        assert!(window > 0 && width > 0);
        WindowBuffer { window, width, frames: VecDeque::with_capacity(window) }
    }

    pub fn reset(&mut self, first: &[f64]) {
        self.frames.clear();
        self.push(first);
    }

    pub fn push(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.width);
        if self.frames.len() == self.window {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.to_vec());
    }

    pub fn tensor(&self) -> Tensor {
        assert!(!self.frames.is_empty(), "reset before use");
        let mut data = Vec::with_capacity(self.window * self.width);
        let pad = self.window - self.frames.len();
        for _ in 0..pad {
            data.extend_from_slice(&self.frames[0]);
        }
        for f in &self.frames {
            data.extend_from_slice(f);
        }
        Tensor::new(&[self.window, self.width], data)
    }
}

/// One policy decision and its consequence.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Exactly what the policy saw (mask included), `[window, d_env_raw]`.
    pub obs_env: Tensor,
    /// `[window, d_self_raw]`.
    pub obs_self: Tensor,
    /// `[1, action_dim]`.
    pub action: Tensor,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub env_id: usize,
}

/// A collected batch plus its advantage estimates.
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Mean per-step reward across the batch.
    pub mean_step_reward: f64,
    /// Episodes that terminated during collection.
    pub finished: Vec<EpisodeResult>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Check the plumbing invariants: aligned lengths, finite advantage
    /// estimates, and worker segments contiguous (env ids non-decreasing).
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.transitions.len() != self.advantages.len()
            || self.transitions.len() != self.returns.len()
        {
            return Err(RolloutError::BadBatch(format!(
                "lengths diverge: {} transitions, {} advantages, {} returns",
                self.transitions.len(),
                self.advantages.len(),
                self.returns.len()
            )));
        }
        if let Some(bad) = self.advantages.iter().chain(&self.returns).find(|a| !a.is_finite()) {
            return Err(RolloutError::BadBatch(format!("non-finite advantage/return {bad}")));
        }
        let mut prev = 0usize;
        for t in &self.transitions {
            if t.env_id < prev {
                return Err(RolloutError::BadBatch(
                    "worker segments are interleaved".to_string(),
                ));
            }
            prev = t.env_id;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub n_envs: usize,
    /// Steps collected per worker per call.
    pub horizon: usize,
    pub gamma: f64,
    pub lam: f64,
    /// Probability that one randomly chosen stream window is zeroed before
    /// the policy sees it (cross-stream dropout; 0.3 in the reference
    /// setup, disabled by default).
    pub mask_prob: f64,
    pub mode: EpisodeMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            n_envs: 8,
            horizon: 64,
            gamma: 0.99,
            lam: 0.95,
            mask_prob: 0.0,
            mode: EpisodeMode::Train,
        }
    }
}

struct Slot {
    driver: EpisodeDriver,
    buf_env: WindowBuffer,
    buf_self: WindowBuffer,
    rng: ChaCha8Rng,
    episodes_started: u64,
}

/// Persistent worker slots; episodes carry over between collection rounds.
pub struct Workers<S: EpisodeSampler> {
    sampler: S,
    sim_cfg: SimConfig,
    cfg: RolloutConfig,
    slots: Vec<Slot>,
}

impl<S: EpisodeSampler> Workers<S> {
    pub fn new(
        mut sampler: S,
        sim_cfg: SimConfig,
        dims: &NetDims,
        cfg: RolloutConfig,
        seed: u64,
    ) -> Result<Workers<S>, RolloutError> {
        if cfg.n_envs == 0 || cfg.horizon == 0 {
            return Err(RolloutError::EmptyConfig);
        }
        let mut slots = Vec::with_capacity(cfg.n_envs);
        for i in 0..cfg.n_envs {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let (scene, plan) = sampler.sample(&mut rng);
            let driver = EpisodeDriver::new(&scene, &plan, &sim_cfg, cfg.mode, None);
            let (oe, os) = driver.initial_obs();
            let mut buf_env = WindowBuffer::new(dims.window, oe.len());
            let mut buf_self = WindowBuffer::new(dims.window, os.len());
            buf_env.reset(&oe);
            buf_self.reset(&os);
            slots.push(Slot { driver, buf_env, buf_self, rng, episodes_started: 1 });
        }
        Ok(Workers { sampler, sim_cfg, cfg, slots })
    }

    /// Total episodes started across all slots (for logging).
    pub fn episodes_started(&self) -> u64 {
        self.slots.iter().map(|s| s.episodes_started).sum()
    }

    /// Collect `horizon` steps from every worker under the current policy.
    pub fn collect(
        &mut self,
        tree: &ParamTree,
        dims: &NetDims,
    ) -> Result<RolloutBatch, RolloutError> {
        let mut transitions = Vec::with_capacity(self.cfg.n_envs * self.cfg.horizon);
        let mut advantages = Vec::with_capacity(transitions.capacity());
        let mut returns = Vec::with_capacity(transitions.capacity());
        let mut finished = Vec::new();
        let mut reward_sum = 0.0;

        for i in 0..self.slots.len() {
            let slot = &mut self.slots[i];
            let mut rewards = Vec::with_capacity(self.cfg.horizon);
            let mut values = Vec::with_capacity(self.cfg.horizon);
            let mut dones = Vec::with_capacity(self.cfg.horizon);

            for _ in 0..self.cfg.horizon {
                let mut we = slot.buf_env.tensor();
                let mut ws = slot.buf_self.tensor();
                if self.cfg.mask_prob > 0.0 && slot.rng.gen_bool(self.cfg.mask_prob) {
                    // drop one stream for this decision (stored as seen)
                    if slot.rng.gen_bool(0.5) {
                        we = Tensor::zeros(we.shape());
                    } else {
                        ws = Tensor::zeros(ws.shape());
                    }
                }
                let eval = policy::forward(tree, dims, &we, &ws)?;
                let action = policy::act(&eval, ActMode::Sample, &mut slot.rng);
                let log_prob = gaussian_log_prob(&eval.mean, &eval.log_std, &action);
                let step = slot.driver.step(&action);
                let done = step.done.is_some();
                reward_sum += step.reward;
                rewards.push(step.reward);
                values.push(eval.value);
                dones.push(done);
                transitions.push(Transition {
                    obs_env: we,
                    obs_self: ws,
                    action: Tensor::new(&[1, action.len()], action),
                    log_prob,
                    reward: step.reward,
                    value: eval.value,
                    done,
                    env_id: i,
                });
                if done {
                    finished.push(slot.driver.result());
                    let (scene, plan) = self.sampler.sample(&mut slot.rng);
                    slot.driver =
                        EpisodeDriver::new(&scene, &plan, &self.sim_cfg, self.cfg.mode, None);
                    slot.episodes_started += 1;
                    let (oe, os) = slot.driver.initial_obs();
                    slot.buf_env.reset(&oe);
                    slot.buf_self.reset(&os);
                } else {
                    slot.buf_env.push(&step.obs_env);
                    slot.buf_self.push(&step.obs_self);
                }
            }

            // bootstrap from the value of the state the worker is left in
            let bootstrap = if *dones.last().expect("horizon > 0") {
                0.0
            } else {
                let we = slot.buf_env.tensor();
                let ws = slot.buf_self.tensor();
                policy::forward(tree, dims, &we, &ws)?.value
            };
            let (adv, ret) =
                gae(&rewards, &values, &dones, bootstrap, self.cfg.gamma, self.cfg.lam);
            advantages.extend(adv);
            returns.extend(ret);
        }

        let batch = RolloutBatch {
            mean_step_reward: reward_sum / transitions.len() as f64,
            transitions,
            advantages,
            returns,
            finished,
        };
        batch.validate()?;
        Ok(batch)
    }
}
