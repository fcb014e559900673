//! Kinematic single-agent environment.
//!
//! The agent is a low-DoF kinematic surrogate: root position + yaw driven
//! by velocity commands, plus 8 abstract joints with limits. There is no
//! contact solver — interaction rules are geometric:
//!
//! * **support**: the highest surface under the root is the local ground;
//!   the episode ends in a fall whenever root z clears it by < 0.15 m
//!   (walking into a tall object therefore "trips" the agent),
//! * **grasp**: a carriable object attaches after the hand stays within
//!   0.2 m of it for 5 consecutive steps; it then follows the hand,
//! * **deliver / climb / sit**: distance thresholds per skill.
//!
//! Rewards are shaped per skill: a proximity kernel `exp(-2 d)` plus the
//! per-step decrease in `d`, minus the power and carried-object speed
//! penalties. Everything is deterministic given state and action.

use super::scene::Scene;
use super::trajectory::Trajectory;
use serde::{Deserialize, Serialize};

pub const NUM_JOINTS: usize = 8;
/// [v_forward, v_lateral, v_up, yaw_rate, 8 joint velocity commands]
pub const ACTION_DIM: usize = 4 + NUM_JOINTS;
/// Per-timestep self-stream width: clearance, sin/cos yaw, body velocity
/// (3), yaw rate, q (8), qvel (8), carrying flag.
pub const D_SELF: usize = 1 + 2 + 3 + 1 + NUM_JOINTS + NUM_JOINTS + 1;
/// Per-timestep env-stream width without the perception grid.
pub const D_ENV_BASE: usize = 19;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("action has {got} entries, expected {want}")]
    ActionDim { got: usize, want: usize },
    #[error("non-finite action component {index}")]
    NonFiniteAction { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Traj,
    Carry,
    Climb,
    Sit,
}

impl Skill {
    pub fn parse(s: &str) -> Option<Skill> {
        match s {
            "traj" => Some(Skill::Traj),
            "carry" => Some(Skill::Carry),
            "climb" => Some(Skill::Climb),
            "sit" => Some(Skill::Sit),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Skill::Traj => 0,
            Skill::Carry => 1,
            Skill::Climb => 2,
            Skill::Sit => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Skill::Traj => "traj",
            Skill::Carry => "carry",
            Skill::Climb => "climb",
            Skill::Sit => "sit",
        }
    }
}

/// The objective driving observations, rewards, and success checks.
#[derive(Debug, Clone)]
pub enum SkillGoal {
    /// Follow `traj`'s time-indexed reference point.
    Traj { traj: Trajectory },
    /// Grasp object `object` and deliver it to `target`.
    Carry { object: usize, target: [f64; 3] },
    /// Get the pelvis at or above `target[2]` while over object `object`.
    Climb { object: usize, target: [f64; 3] },
    /// Put the pelvis within tolerance of `target` (sit point).
    Sit { object: usize, target: [f64; 3] },
}

impl SkillGoal {
    pub fn skill(&self) -> Skill {
        match self {
            SkillGoal::Traj { .. } => Skill::Traj,
            SkillGoal::Carry { .. } => Skill::Carry,
            SkillGoal::Climb { .. } => Skill::Climb,
            SkillGoal::Sit { .. } => Skill::Sit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Control rate (Hz).
    pub control_hz: f64,
    /// Kinematic integration substeps per control step.
    pub substeps: usize,
    /// Steps before timeout.
    pub episode_budget: usize,
    /// Fall when root z clears local ground by less than this (m).
    pub fall_clearance: f64,
    /// Trajectory skill aborts past this deviation (m).
    pub traj_fail_dist: f64,
    /// Power penalty coefficient over joint channels.
    pub power_coeff: f64,
    /// Carried-object speed penalty coefficient and threshold (m/s).
    pub speed_pen_coeff: f64,
    pub speed_pen_threshold: f64,
    /// Grasp proximity (m) and required consecutive steps.
    pub grasp_radius: f64,
    pub grasp_steps: usize,
    /// Success / transition distance threshold (m).
    pub success_threshold: f64,
    /// Sit tolerances (m).
    pub sit_xy_tol: f64,
    pub sit_z_tol: f64,
    /// Default standing pelvis height above local ground (m).
    pub standing_height: f64,
    /// Attach the 25x25 perception grid to the env stream.
    pub use_grid: bool,
    pub grid_n: usize,
    pub grid_spacing: f64,
    /// Divisor applied to relative positions/distances in observations.
    pub obs_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            control_hz: 30.0,
            substeps: 2,
            episode_budget: 1200,
            fall_clearance: 0.15,
            traj_fail_dist: 4.0,
            power_coeff: 0.0005,
            speed_pen_coeff: 1.0,
            speed_pen_threshold: 1.5,
            grasp_radius: 0.2,
            grasp_steps: 5,
            success_threshold: 0.3,
            sit_xy_tol: 0.2,
            sit_z_tol: 0.1,
            standing_height: 0.9,
            use_grid: false,
            grid_n: 25,
            grid_spacing: 0.1,
            obs_scale: 5.0,
        }
    }
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    pub fn d_env(&self) -> usize {
        if self.use_grid {
            D_ENV_BASE + self.grid_n * self.grid_n
        } else {
            D_ENV_BASE
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub pos: [f64; 3],
    pub yaw: f64,
    pub q: [f64; NUM_JOINTS],
    pub qvel: [f64; NUM_JOINTS],
    /// Last achieved body-frame velocity (for observations).
    pub vel_body: [f64; 3],
    pub yaw_rate: f64,
    pub carried: Option<usize>,
    pub grasp_counter: usize,
}

/// Joint limits (symmetric) and command clamps.
pub const JOINT_LIMIT: f64 = std::f64::consts::FRAC_PI_2;
pub const JOINT_VEL_LIMIT: f64 = 4.0;
pub const V_FWD_LIMIT: f64 = 2.0;
pub const V_LAT_LIMIT: f64 = 1.0;
pub const V_UP_LIMIT: f64 = 1.5;
pub const YAW_RATE_LIMIT: f64 = 3.0;

/// What a step reports besides the observation and reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepEvents {
    pub fell: bool,
    pub traj_failed: bool,
    pub timeout: bool,
    pub grasped_now: bool,
    pub delivered_now: bool,
    /// The active goal's success condition held at this step.
    pub goal_met: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs_env: Vec<f64>,
    pub obs_self: Vec<f64>,
    pub reward: f64,
    pub events: StepEvents,
}

pub struct Env {
    pub scene: Scene,
    pub cfg: SimConfig,
    pub agent: AgentState,
    pub goal: SkillGoal,
    /// Object positions (carriables can move).
    pub object_pos: Vec<[f64; 3]>,
    pub step_count: usize,
    /// Steps since the active goal was installed (drives the traj clock).
    pub goal_step: usize,
    prev_goal_dist: Option<f64>,
    delivered: bool,
    /// Largest deviation from the trajectory reference seen under the
    /// current goal.
    pub max_traj_dev: f64,
    /// While set (by the episode runner, between skills) the goal clock
    /// stays at zero and trajectory deviation is not charged.
    pub transition_hold: bool,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Env {
    pub fn new(scene: Scene, cfg: SimConfig, goal: SkillGoal, start: [f64; 2], start_yaw: f64) -> Env {
        let object_pos = scene.objects.iter().map(|o| o.position).collect();
        let ground = scene.ground_height(start[0], start[1], None);
        let agent = AgentState {
            pos: [start[0], start[1], ground + cfg.standing_height],
            yaw: start_yaw,
            q: [0.0; NUM_JOINTS],
            qvel: [0.0; NUM_JOINTS],
            vel_body: [0.0; 3],
            yaw_rate: 0.0,
            carried: None,
            grasp_counter: 0,
        };
        let mut env = Env {
            scene,
            cfg,
            agent,
            goal,
            object_pos,
            step_count: 0,
            goal_step: 0,
            prev_goal_dist: None,
            delivered: false,
            max_traj_dev: 0.0,
            transition_hold: false,
        };
        env.prev_goal_dist = Some(env.goal_distance());
        env
    }

    /// Swap in a new objective (used between skills of a long-horizon
    /// episode); the goal clock and per-goal stats reset.
    pub fn set_goal(&mut self, goal: SkillGoal) {
        self.goal = goal;
        self.goal_step = 0;
        self.delivered = false;
        self.max_traj_dev = 0.0;
        self.prev_goal_dist = Some(self.goal_distance());
    }

    /// Restart the goal clock and per-goal stats without changing the
    /// goal itself (called when a transition phase ends so reference
    /// timing and deviation tracking start from the skill's real start).
    pub fn restart_goal_clock(&mut self) {
        self.goal_step = 0;
        self.max_traj_dev = 0.0;
        self.prev_goal_dist = Some(self.goal_distance());
    }

    /// Hand frame: 0.3 m ahead of the root, 0.2 m below it.
    pub fn hand_pos(&self) -> [f64; 3] {
        let (s, c) = self.agent.yaw.sin_cos();
        [self.agent.pos[0] + 0.3 * c, self.agent.pos[1] + 0.3 * s, self.agent.pos[2] - 0.2]
    }

    /// Local ground under the root, ignoring a carried object.
    pub fn local_ground(&self) -> f64 {
        self.scene.ground_height(self.agent.pos[0], self.agent.pos[1], self.agent.carried)
    }

    fn traj_time(&self) -> f64 {
        self.goal_step as f64 * self.cfg.dt()
    }

    /// The scalar the reward shaping tracks for the active goal.
    pub fn goal_distance(&self) -> f64 {
        match &self.goal {
            SkillGoal::Traj { traj } => {
                let r = traj.ref_point(self.traj_time());
                dist2([self.agent.pos[0], self.agent.pos[1]], r)
            }
            SkillGoal::Carry { object, target } => {
                if self.delivered {
                    0.0
                } else if self.agent.carried == Some(*object) {
                    dist3(self.object_pos[*object], *target)
                } else {
                    dist3(self.hand_pos(), self.object_pos[*object])
                }
            }
            SkillGoal::Climb { object, target } => {
                let o = &self.scene.objects[*object];
                let dxy = if o.footprint_contains(self.agent.pos[0], self.agent.pos[1]) {
                    0.0
                } else {
                    dist2([self.agent.pos[0], self.agent.pos[1]], [target[0], target[1]])
                };
                let dz = (target[2] - self.agent.pos[2]).max(0.0);
                (dxy * dxy + dz * dz).sqrt()
            }
            SkillGoal::Sit { target, .. } => dist3(self.agent.pos, *target),
        }
    }

    /// Success condition of the active goal at the current state.
    /// For `Traj` this means "the reference finished and the agent stayed
    /// within the success threshold throughout".
    pub fn goal_met(&self) -> bool {
        match &self.goal {
            SkillGoal::Traj { traj } => {
                // reference finished, the agent stayed in the corridor
                // the whole way, and it actually reached the endpoint
                self.traj_time() >= traj.duration()
                    && self.max_traj_dev <= self.cfg.success_threshold
                    && dist2([self.agent.pos[0], self.agent.pos[1]], traj.end())
                        <= self.cfg.success_threshold
            }
            SkillGoal::Carry { .. } => self.delivered,
            SkillGoal::Climb { object, target } => {
                let o = &self.scene.objects[*object];
                o.footprint_contains(self.agent.pos[0], self.agent.pos[1])
                    && self.agent.pos[2] >= target[2]
            }
            SkillGoal::Sit { target, .. } => {
                dist2([self.agent.pos[0], self.agent.pos[1]], [target[0], target[1]])
                    <= self.cfg.sit_xy_tol
                    && (self.agent.pos[2] - target[2]).abs() <= self.cfg.sit_z_tol
            }
        }
    }

    /// Whether the agent ever grasped during the current carry goal
    /// (feeds the 0.5 partial-credit rule).
    pub fn has_grasped(&self) -> bool {
        match &self.goal {
            SkillGoal::Carry { object, .. } => self.delivered || self.agent.carried == Some(*object),
            _ => false,
        }
    }

    /// Advance one control step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionDim { got: action.len(), want: ACTION_DIM });
        }
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction { index: i });
        }
        let dt = self.cfg.dt();
        let v_fwd = action[0].clamp(-V_FWD_LIMIT, V_FWD_LIMIT);
        let v_lat = action[1].clamp(-V_LAT_LIMIT, V_LAT_LIMIT);
        let v_up = action[2].clamp(-V_UP_LIMIT, V_UP_LIMIT);
        let yaw_rate = action[3].clamp(-YAW_RATE_LIMIT, YAW_RATE_LIMIT);

        let sub_dt = dt / self.cfg.substeps as f64;
        for _ in 0..self.cfg.substeps {
            let (s, c) = self.agent.yaw.sin_cos();
            self.agent.pos[0] += (c * v_fwd - s * v_lat) * sub_dt;
            self.agent.pos[1] += (s * v_fwd + c * v_lat) * sub_dt;
            self.agent.pos[2] += v_up * sub_dt;
            self.agent.yaw += yaw_rate * sub_dt;
            let lim = self.scene.world_half_extent;
            self.agent.pos[0] = self.agent.pos[0].clamp(-lim, lim);
            self.agent.pos[1] = self.agent.pos[1].clamp(-lim, lim);
        }
        self.agent.vel_body = [v_fwd, v_lat, v_up];
        self.agent.yaw_rate = yaw_rate;

        let mut power = 0.0;
        for j in 0..NUM_JOINTS {
            let cmd = action[4 + j].clamp(-JOINT_VEL_LIMIT, JOINT_VEL_LIMIT);
            let q_new = (self.agent.q[j] + cmd * dt).clamp(-JOINT_LIMIT, JOINT_LIMIT);
            self.agent.qvel[j] = (q_new - self.agent.q[j]) / dt;
            self.agent.q[j] = q_new;
            power += (cmd * self.agent.qvel[j]).abs();
        }

        // carried object follows the hand
        let mut carried_speed = 0.0;
        if let Some(i) = self.agent.carried {
            let prev = self.object_pos[i];
            let hp = self.hand_pos();
            self.object_pos[i] = hp;
            carried_speed = dist3(prev, hp) / dt;
        }

        let mut events = StepEvents::default();

        // grasp bookkeeping + one-time bonuses
        let mut bonus = 0.0;
        if let SkillGoal::Carry { object, target } = &self.goal {
            let (object, target) = (*object, *target);
            if self.agent.carried.is_none() && !self.delivered {
                if dist3(self.hand_pos(), self.object_pos[object]) <= self.cfg.grasp_radius {
                    self.agent.grasp_counter += 1;
                } else {
                    self.agent.grasp_counter = 0;
                }
                if self.agent.grasp_counter >= self.cfg.grasp_steps {
                    self.agent.carried = Some(object);
                    self.agent.grasp_counter = 0;
                    events.grasped_now = true;
                    bonus += 0.5;
                }
            } else if self.agent.carried == Some(object)
                && dist3(self.object_pos[object], target) <= self.cfg.success_threshold
            {
                // delivery: release in place
                self.agent.carried = None;
                self.delivered = true;
                events.delivered_now = true;
                bonus += 2.0;
            }
        }

        self.step_count += 1;
        if !self.transition_hold {
            self.goal_step += 1;
        }

        // task-progress shaping
        let d = self.goal_distance();
        let prev = self.prev_goal_dist.unwrap_or(d);
        self.prev_goal_dist = Some(d);
        let mut reward = (-2.0 * d).exp() + (prev - d);
        reward += bonus;
        reward -= self.cfg.power_coeff * power;
        if carried_speed > self.cfg.speed_pen_threshold {
            reward -= self.cfg.speed_pen_coeff * (carried_speed - self.cfg.speed_pen_threshold);
        }

        // trajectory tracking (suspended while a transition phase holds
        // the goal clock at zero): success deviation is charged against
        // the path corridor; the hard failure distance is against the
        // time-indexed reference, so falling behind is also a failure
        if !self.transition_hold {
            if let SkillGoal::Traj { traj } = &self.goal {
                let p = [self.agent.pos[0], self.agent.pos[1]];
                let dev = traj.nearest_dist(p);
                self.max_traj_dev = self.max_traj_dev.max(dev);
                let ref_dist = dist2(p, traj.ref_point(self.traj_time()));
                if ref_dist > self.cfg.traj_fail_dist {
                    events.traj_failed = true;
                }
            }
        }

        // terminations
        let clearance = self.agent.pos[2] - self.local_ground();
        if clearance < self.cfg.fall_clearance {
            events.fell = true;
            reward -= 2.0;
        }
        if self.step_count >= self.cfg.episode_budget {
            events.timeout = true;
        }
        events.goal_met = self.goal_met();
        if events.goal_met {
            // a met goal pre-empts the fall check (sitting crouches low)
            events.fell = false;
        }

        Ok(StepResult { obs_env: self.obs_env(), obs_self: self.obs_self(), reward, events })
    }

    /// Body-frame vector from the agent root to `p`.
    fn to_body(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.agent.pos[0];
        let dy = p[1] - self.agent.pos[1];
        let (s, c) = self.agent.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.agent.pos[2]]
    }

    /// Environment-stream observation (scene/task-centric).
    pub fn obs_env(&self) -> Vec<f64> {
        let k = self.cfg.obs_scale;
        let (goal_point, lookahead) = match &self.goal {
            SkillGoal::Traj { traj } => {
                let r = traj.ref_point(self.traj_time());
                let la = traj.ref_point(self.traj_time() + 0.5);
                let g = self.local_ground();
                ([r[0], r[1], g + self.cfg.standing_height], [la[0], la[1], g + self.cfg.standing_height])
            }
            SkillGoal::Carry { object, target } => {
                if self.agent.carried == Some(*object) || self.delivered {
                    (*target, *target)
                } else {
                    (self.object_pos[*object], *target)
                }
            }
            SkillGoal::Climb { target, .. } => (*target, *target),
            SkillGoal::Sit { target, .. } => (*target, *target),
        };
        let rel = self.to_body(goal_point);
        let rel_la = self.to_body(lookahead);
        let d = self.goal_distance();
        let mut skill_onehot = [0.0; 4];
        skill_onehot[self.goal.skill().index()] = 1.0;
        let carried_rel = match self.agent.carried {
            Some(i) => self.to_body(self.object_pos[i]),
            None => match &self.goal {
                SkillGoal::Carry { object, .. } if !self.delivered => {
                    self.to_body(self.object_pos[*object])
                }
                _ => [0.0; 3],
            },
        };
        let carry_target_rel = match &self.goal {
            SkillGoal::Carry { target, .. } => self.to_body(*target),
            _ => [0.0; 3],
        };
        let goal_surface_delta = goal_point[2] - self.agent.pos[2];
        let (s, c) = self.agent.yaw.sin_cos();
        let ahead = [self.agent.pos[0] + 0.5 * c, self.agent.pos[1] + 0.5 * s];
        let ground_ahead =
            self.scene.ground_height(ahead[0], ahead[1], self.agent.carried) - self.agent.pos[2];

        let mut v = Vec::with_capacity(self.cfg.d_env());
        v.extend_from_slice(&[rel[0] / k, rel[1] / k, rel[2] / k]);
        v.push(d / k);
        v.extend_from_slice(&[rel_la[0] / k, rel_la[1] / k, rel_la[2] / k]);
        v.extend_from_slice(&skill_onehot);
        v.extend_from_slice(&[carried_rel[0] / k, carried_rel[1] / k, carried_rel[2] / k]);
        v.extend_from_slice(&[
            carry_target_rel[0] / k,
            carry_target_rel[1] / k,
            carry_target_rel[2] / k,
        ]);
        v.push(goal_surface_delta / k);
        v.push(ground_ahead / k);
        if self.cfg.use_grid {
            v.extend(self.scene.perception_grid(
                [self.agent.pos[0], self.agent.pos[1]],
                self.agent.yaw,
                self.agent.pos[2],
                self.cfg.grid_n,
                self.cfg.grid_spacing,
                self.agent.carried,
            ));
        }
        debug_assert_eq!(v.len(), self.cfg.d_env());
        v
    }

    /// Self-stream observation (proprioceptive).
    pub fn obs_self(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(D_SELF);
        v.push(self.agent.pos[2] - self.local_ground());
        v.push(self.agent.yaw.sin());
        v.push(self.agent.yaw.cos());
        v.extend_from_slice(&self.agent.vel_body);
        v.push(self.agent.yaw_rate);
        v.extend_from_slice(&self.agent.q);
        v.extend_from_slice(&self.agent.qvel);
        v.push(if self.agent.carried.is_some() { 1.0 } else { 0.0 });
        debug_assert_eq!(v.len(), D_SELF);
        v
    }
}
