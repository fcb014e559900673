//! Long-horizon episodes: ordered skill plans, transition windows, and
//! sequential success semantics (a failed subtask zeroes every later one).

use super::env::{Env, Skill, SkillGoal, SimConfig, StepEvents, ACTION_DIM};
use super::scene::{build_scene, Scene, SceneConfig, SceneError};
use super::trajectory::{resolve_spec, TrajParams, Trajectory, TrajectoryError, TrajectorySpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn invalid(field: &str, msg: impl Into<String>) -> PlanError {
    PlanError::Invalid { field: field.to_string(), msg: msg.into() }
}

/// On-disk task description: scene, ordered skills, and the sampling
/// vocabulary (`traj_k` / `scene_i` / `tarpos_j` sources).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub scene: SceneConfig,
    pub skills: Vec<String>,
    pub target_indices: Vec<usize>,
    pub sources: Vec<String>,
    #[serde(default)]
    pub carry_targets: Vec<[f64; 3]>,
    /// Which object the carry skill moves; defaults to the first carriable.
    #[serde(default)]
    pub carry_object: Option<usize>,
    pub start: [f64; 2],
    #[serde(default)]
    pub start_yaw: f64,
    #[serde(default)]
    pub trajectories: Vec<TrajectorySpec>,
    #[serde(default = "default_transition_train")]
    pub max_transition_steps_train: usize,
    #[serde(default = "default_transition_test")]
    pub max_transition_steps_test: usize,
    #[serde(default = "default_success_threshold")]
    pub success_threshold: f64,
}

fn default_transition_train() -> usize {
    60
}
fn default_transition_test() -> usize {
    20
}
fn default_success_threshold() -> f64 {
    0.3
}

/// Fully resolved, executable plan.
#[derive(Debug, Clone)]
pub struct TaskPlan {
    pub name: String,
    pub goals: Vec<SkillGoal>,
    pub start: [f64; 2],
    pub start_yaw: f64,
    pub max_transition_train: usize,
    pub max_transition_test: usize,
    pub success_threshold: f64,
}

impl TaskPlan {
    pub fn skills(&self) -> Vec<Skill> {
        self.goals.iter().map(|g| g.skill()).collect()
    }
}

/// Source tags from the task vocabulary.
enum Source {
    Traj(usize),
    SceneObj(usize),
    TarPos(usize),
}

fn parse_source(s: &str, field: &str) -> Result<Source, PlanError> {
    let parse_idx = |rest: &str| {
        rest.parse::<usize>().map_err(|_| invalid(field, format!("bad index in source '{s}'")))
    };
    if let Some(rest) = s.strip_prefix("traj_") {
        Ok(Source::Traj(parse_idx(rest)?))
    } else if let Some(rest) = s.strip_prefix("scene_") {
        Ok(Source::SceneObj(parse_idx(rest)?))
    } else if let Some(rest) = s.strip_prefix("tarpos_") {
        Ok(Source::TarPos(parse_idx(rest)?))
    } else {
        Err(invalid(field, format!("unknown source '{s}' (want traj_k / scene_i / tarpos_j)")))
    }
}

/// Validate a task config and resolve it against its scene.
pub fn resolve_task(cfg: &TaskConfig, traj_params: &TrajParams) -> Result<(Scene, TaskPlan), PlanError> {
    let scene = build_scene(&cfg.scene)?;
    let n = cfg.skills.len();
    if n == 0 {
        return Err(invalid("skills", "empty plan"));
    }
    if cfg.target_indices.len() != n {
        return Err(invalid(
            "target_indices",
            format!("{} entries for {} skills", cfg.target_indices.len(), n),
        ));
    }
    if cfg.sources.len() != n {
        return Err(invalid("sources", format!("{} entries for {} skills", cfg.sources.len(), n)));
    }
    let trajectories: Vec<Trajectory> = cfg
        .trajectories
        .iter()
        .map(|s| resolve_spec(s, traj_params))
        .collect::<Result<_, _>>()?;

    let carry_object = match cfg.carry_object {
        Some(i) => {
            if i >= scene.objects.len() || !scene.objects[i].carriable {
                return Err(invalid("carry_object", format!("object {i} is not carriable")));
            }
            Some(i)
        }
        None => scene.first_carriable(),
    };

    let mut goals = Vec::with_capacity(n);
    for (k, skill_name) in cfg.skills.iter().enumerate() {
        let field = format!("skills[{k}]");
        let skill = Skill::parse(skill_name)
            .ok_or_else(|| invalid(&field, format!("unknown skill '{skill_name}'")))?;
        let source = parse_source(&cfg.sources[k], &format!("sources[{k}]"))?;
        let goal = match skill {
            Skill::Traj => match source {
                Source::Traj(i) => {
                    let traj = trajectories.get(i).ok_or_else(|| {
                        invalid(&format!("sources[{k}]"), format!("trajectory {i} not defined"))
                    })?;
                    SkillGoal::Traj { traj: traj.clone() }
                }
                _ => return Err(invalid(&format!("sources[{k}]"), "traj skill needs a traj_k source")),
            },
            Skill::Carry => {
                let object = carry_object
                    .ok_or_else(|| invalid(&field, "carry skill but no carriable object in scene"))?;
                let target = match source {
                    Source::TarPos(j) => *cfg.carry_targets.get(j).ok_or_else(|| {
                        invalid(&format!("sources[{k}]"), format!("carry target {j} not defined"))
                    })?,
                    _ => *cfg.carry_targets.first().ok_or_else(|| {
                        invalid("carry_targets", "carry skill needs at least one carry target")
                    })?,
                };
                SkillGoal::Carry { object, target }
            }
            Skill::Climb => {
                let object = source_object(source, &scene, k)?;
                let target = scene.objects[object].climb_target();
                SkillGoal::Climb { object, target }
            }
            Skill::Sit => {
                let object = source_object(source, &scene, k)?;
                let target = scene.objects[object].sit_target();
                SkillGoal::Sit { object, target }
            }
        };
        goals.push(goal);
    }

    Ok((
        scene,
        TaskPlan {
            name: cfg.name.clone(),
            goals,
            start: cfg.start,
            start_yaw: cfg.start_yaw,
            max_transition_train: cfg.max_transition_steps_train,
            max_transition_test: cfg.max_transition_steps_test,
            success_threshold: cfg.success_threshold,
        },
    ))
}

fn source_object(source: Source, scene: &Scene, k: usize) -> Result<usize, PlanError> {
    match source {
        Source::SceneObj(i) => {
            if i >= scene.objects.len() {
                Err(invalid(&format!("sources[{k}]"), format!("scene object {i} does not exist")))
            } else {
                Ok(i)
            }
        }
        _ => Err(invalid(&format!("sources[{k}]"), "this skill needs a scene_i source")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    Completed,
    Fall,
    Timeout,
    TrajFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Per-subtask outcome in {0, 0.5, 1}, sequential semantics.
    pub outcomes: Vec<f64>,
    /// Seconds each subtask was active.
    pub durations: Vec<f64>,
    pub cause: TerminationCause,
    /// Sim seconds elapsed.
    pub total_time: f64,
    pub steps: usize,
    pub total_reward: f64,
}

impl EpisodeResult {
    pub fn lh_success(&self) -> bool {
        self.outcomes.iter().all(|o| *o == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeMode {
    Train,
    Test,
}

/// One row of the per-step trace (optional CSV export).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub skill: &'static str,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub reward: f64,
    pub event: &'static str,
}

/// Anything that can drive the agent.
pub trait Controller {
    fn reset(&mut self);
    /// Produce an action; `env` grants scripted controllers privileged
    /// state access (learned policies should only read the observations).
    fn act(&mut self, obs_env: &[f64], obs_self: &[f64], env: &Env) -> Vec<f64>;
}

/// Where a transition phase is trying to get to (within the success
/// threshold) before the next skill's clock starts.
fn transition_gap(env: &Env, goal: &SkillGoal) -> f64 {
    let p = env.agent.pos;
    match goal {
        SkillGoal::Traj { traj } => {
            let s = traj.points[0];
            ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2)).sqrt()
        }
        SkillGoal::Carry { object, .. } => {
            let h = env.hand_pos();
            let o = env.object_pos[*object];
            ((h[0] - o[0]).powi(2) + (h[1] - o[1]).powi(2) + (h[2] - o[2]).powi(2)).sqrt()
        }
        SkillGoal::Climb { object, target } | SkillGoal::Sit { object, target } => {
            let o = &env.scene.objects[*object];
            let reach = 0.5 * (o.extents[0].powi(2) + o.extents[1].powi(2)).sqrt();
            let d = ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt();
            (d - reach).max(0.0)
        }
    }
}

/// Outcome of a single [`EpisodeDriver::step`] call.
#[derive(Debug, Clone)]
pub struct DriveStep {
    pub reward: f64,
    pub obs_env: Vec<f64>,
    pub obs_self: Vec<f64>,
    pub events: StepEvents,
    /// Set when this step ended the episode.
    pub done: Option<TerminationCause>,
    /// False when the env did not actually move (bad action, or the episode
    /// was already over).
    pub advanced: bool,
}

/// Stepwise long-horizon episode state machine.
///
/// Skills run in order; each gets `episode_budget / n_skills` active steps.
/// After a success the next goal is installed immediately, but its clock
/// only starts once the agent is within the transition threshold of the
/// next objective (or the transition-step cap is exhausted). Failures
/// zero every later outcome.
///
/// [`run_lh_episode`] drives it with a [`Controller`]; the RL rollout
/// collector drives it one action at a time.
pub struct EpisodeDriver {
    pub env: Env,
    goals: Vec<SkillGoal>,
    success_threshold: f64,
    per_skill_window: usize,
    max_transition: usize,
    k: usize,
    in_transition: bool,
    transition_steps: usize,
    skill_start_step: usize,
    outcomes: Vec<f64>,
    durations: Vec<f64>,
    total_reward: f64,
    cause: Option<TerminationCause>,
}

impl EpisodeDriver {
    pub fn new(
        scene: &Scene,
        plan: &TaskPlan,
        cfg: &SimConfig,
        mode: EpisodeMode,
        spawn_jitter: Option<([f64; 2], f64)>,
    ) -> EpisodeDriver {
        let n = plan.goals.len();
        let (mut start, mut yaw) = (plan.start, plan.start_yaw);
        if let Some((dxy, dyaw)) = spawn_jitter {
            start[0] += dxy[0];
            start[1] += dxy[1];
            yaw += dyaw;
        }
        let env = Env::new(scene.clone(), cfg.clone(), plan.goals[0].clone(), start, yaw);
        let max_transition = match mode {
            EpisodeMode::Train => plan.max_transition_train,
            EpisodeMode::Test => plan.max_transition_test,
        };
        EpisodeDriver {
            env,
            goals: plan.goals.clone(),
            success_threshold: plan.success_threshold,
            per_skill_window: cfg.episode_budget / n.max(1),
            max_transition,
            k: 0,
            in_transition: false,
            transition_steps: 0,
            skill_start_step: 0,
            outcomes: vec![0.0; n],
            durations: vec![0.0; n],
            total_reward: 0.0,
            cause: None,
        }
    }

    pub fn initial_obs(&self) -> (Vec<f64>, Vec<f64>) {
        (self.env.obs_env(), self.env.obs_self())
    }

    pub fn skill_index(&self) -> usize {
        self.k
    }

    pub fn in_transition(&self) -> bool {
        self.in_transition
    }

    pub fn done_cause(&self) -> Option<TerminationCause> {
        self.cause
    }

    /// Advance one control step. Calling after the episode ended returns an
    /// inert step that repeats the termination cause.
    pub fn step(&mut self, action: &[f64]) -> DriveStep {
        if let Some(cause) = self.cause {
            return DriveStep {
                reward: 0.0,
                obs_env: self.env.obs_env(),
                obs_self: self.env.obs_self(),
                events: StepEvents::default(),
                done: Some(cause),
                advanced: false,
            };
        }
        let fallback;
        let action = if action.len() == ACTION_DIM {
            action
        } else {
            fallback = vec![0.0; ACTION_DIM];
            &fallback
        };
        let r = match self.env.step(action) {
            Ok(r) => r,
            Err(_) => {
                // a NaN action fails the episode outright
                self.cause = Some(TerminationCause::Fall);
                return DriveStep {
                    reward: 0.0,
                    obs_env: self.env.obs_env(),
                    obs_self: self.env.obs_self(),
                    events: StepEvents::default(),
                    done: self.cause,
                    advanced: false,
                };
            }
        };
        self.total_reward += r.reward;

        if r.events.fell {
            self.cause = Some(TerminationCause::Fall);
        } else if r.events.traj_failed && !self.in_transition {
            // deviation during a transition phase is expected (the next
            // reference starts wherever the previous skill finished)
            self.cause = Some(TerminationCause::TrajFailure);
        } else {
            if self.in_transition {
                self.transition_steps += 1;
                if transition_gap(&self.env, &self.goals[self.k]) <= self.success_threshold
                    || self.transition_steps >= self.max_transition
                {
                    self.in_transition = false;
                    self.skill_start_step = self.env.step_count;
                    self.env.transition_hold = false;
                    self.env.restart_goal_clock();
                }
            } else {
                self.durations[self.k] =
                    (self.env.step_count - self.skill_start_step) as f64 * self.env.cfg.dt();
                if r.events.goal_met {
                    self.outcomes[self.k] = 1.0;
                    if self.k + 1 == self.goals.len() {
                        self.cause = Some(TerminationCause::Completed);
                    } else {
                        self.k += 1;
                        self.env.set_goal(self.goals[self.k].clone());
                        self.in_transition = true;
                        self.env.transition_hold = true;
                        self.transition_steps = 0;
                    }
                } else if self.env.step_count - self.skill_start_step >= self.per_skill_window {
                    // skill timed out: carry keeps 0.5 partial credit if grasped
                    if self.env.goal.skill() == Skill::Carry && self.env.has_grasped() {
                        self.outcomes[self.k] = 0.5;
                    }
                    self.cause = Some(TerminationCause::Timeout);
                }
            }
            if self.cause.is_none() && r.events.timeout {
                if self.env.goal.skill() == Skill::Carry
                    && self.env.has_grasped()
                    && self.outcomes[self.k] == 0.0
                {
                    self.outcomes[self.k] = 0.5;
                }
                self.cause = Some(TerminationCause::Timeout);
            }
        }

        DriveStep {
            reward: r.reward,
            obs_env: r.obs_env,
            obs_self: r.obs_self,
            events: r.events,
            done: self.cause,
            advanced: true,
        }
    }

    /// Episode summary (sequential semantics: everything after the first
    /// non-success is zeroed). Valid mid-episode too; `cause` defaults to
    /// `Timeout` if the episode was abandoned before a terminal step.
    pub fn result(&self) -> EpisodeResult {
        let mut outcomes = self.outcomes.clone();
        let mut blocked = false;
        for o in outcomes.iter_mut() {
            if blocked {
                *o = 0.0;
            } else if *o != 1.0 {
                blocked = true;
            }
        }
        EpisodeResult {
            outcomes,
            durations: self.durations.clone(),
            cause: self.cause.unwrap_or(TerminationCause::Timeout),
            total_time: self.env.step_count as f64 * self.env.cfg.dt(),
            steps: self.env.step_count,
            total_reward: self.total_reward,
        }
    }
}

/// Execute a full long-horizon episode under `controller`.
pub fn run_lh_episode(
    scene: &Scene,
    plan: &TaskPlan,
    cfg: &SimConfig,
    controller: &mut dyn Controller,
    mode: EpisodeMode,
    spawn_jitter: Option<([f64; 2], f64)>,
    collect_trace: bool,
) -> (EpisodeResult, Vec<TraceRow>) {
    let mut driver = EpisodeDriver::new(scene, plan, cfg, mode, spawn_jitter);
    controller.reset();
    let (mut obs_env, mut obs_self) = driver.initial_obs();
    let mut trace = Vec::new();

    loop {
        let action = controller.act(&obs_env, &obs_self, &driver.env);
        let step = driver.step(&action);
        obs_env = step.obs_env;
        obs_self = step.obs_self;
        if collect_trace && step.advanced {
            let event = if step.events.fell {
                "fall"
            } else if step.events.delivered_now {
                "delivered"
            } else if step.events.grasped_now {
                "grasped"
            } else if step.events.goal_met {
                "goal_met"
            } else {
                ""
            };
            trace.push(TraceRow {
                step: driver.env.step_count,
                skill: driver.env.goal.skill().name(),
                x: driver.env.agent.pos[0],
                y: driver.env.agent.pos[1],
                z: driver.env.agent.pos[2],
                yaw: driver.env.agent.yaw,
                reward: step.reward,
                event,
            });
        }
        if step.done.is_some() {
            break;
        }
    }
    (driver.result(), trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_rule_zeroes_everything_after_a_failure() {
        // simulated raw outcomes [1, 1, 0, 1] must collapse to [1,1,0,0]
        let mut outcomes = [1.0, 1.0, 0.0, 1.0];
        let mut blocked = false;
        for o in outcomes.iter_mut() {
            if blocked {
                *o = 0.0;
            } else if *o != 1.0 {
                blocked = true;
            }
        }
        assert_eq!(outcomes, [1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn partial_carry_blocks_later_skills() {
        let mut outcomes = [1.0, 0.5, 1.0];
        let mut blocked = false;
        for o in outcomes.iter_mut() {
            if blocked {
                *o = 0.0;
            } else if *o != 1.0 {
                blocked = true;
            }
        }
        assert_eq!(outcomes, [1.0, 0.5, 0.0]);
        let res = EpisodeResult {
            outcomes: outcomes.to_vec(),
            durations: vec![1.0; 3],
            cause: TerminationCause::Timeout,
            total_time: 3.0,
            steps: 90,
            total_reward: 0.0,
        };
        assert!(!res.lh_success());
    }

    #[test]
    fn task_validation_reports_the_offending_field() {
        let cfg = TaskConfig {
            name: "bad".into(),
            scene: SceneConfig { name: "s".into(), world_half_extent: 30.0, objects: vec![] },
            skills: vec!["traj".into(), "warp".into()],
            target_indices: vec![0, 0],
            sources: vec!["traj_0".into(), "scene_0".into()],
            carry_targets: vec![],
            carry_object: None,
            start: [0.0, 0.0],
            start_yaw: 0.0,
            trajectories: vec![TrajectorySpec::Line { from: [0.0, 0.0], to: [5.8, 0.0] }],
            max_transition_steps_train: 60,
            max_transition_steps_test: 20,
            success_threshold: 0.3,
        };
        match resolve_task(&cfg, &TrajParams::default()) {
            Err(PlanError::Invalid { field, .. }) => assert_eq!(field, "skills[1]"),
            other => panic!("expected field error, got {other:?}"),
        }
    }

    #[test]
    fn missing_trajectory_source_is_rejected() {
        let cfg = TaskConfig {
            name: "bad".into(),
            scene: SceneConfig { name: "s".into(), world_half_extent: 30.0, objects: vec![] },
            skills: vec!["traj".into()],
            target_indices: vec![0],
            sources: vec!["traj_3".into()],
            carry_targets: vec![],
            carry_object: None,
            start: [0.0, 0.0],
            start_yaw: 0.0,
            trajectories: vec![],
            max_transition_steps_train: 60,
            max_transition_steps_test: 20,
            success_threshold: 0.3,
        };
        match resolve_task(&cfg, &TrajParams::default()) {
            Err(PlanError::Invalid { field, .. }) => assert_eq!(field, "sources[0]"),
            other => panic!("expected field error, got {other:?}"),
        }
    }
}
