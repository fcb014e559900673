//! Scripted proportional controllers that solve tasks from privileged
//! state. They exist to prove the environments are solvable and to give
//! the metrics pipeline known-good episode streams.

use super::env::{Env, SkillGoal, ACTION_DIM, V_FWD_LIMIT, V_UP_LIMIT, YAW_RATE_LIMIT};
use super::episode::Controller;

/// Waypoint-chasing P-controller over all four skills.
pub struct OracleController {
    /// Seconds of lookahead along a reference trajectory.
    pub lookahead: f64,
}

impl Default for OracleController {
    fn default() -> Self {
        OracleController { lookahead: 0.15 }
    }
}

fn wrap_angle(mut a: f64) -> f64 {
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

impl OracleController {
    /// Drive toward `(target_xy, target_z)`: turn-then-walk with a
    /// height P-term. `feed_fwd` is added to the proportional speed so a
    /// moving target can be tracked without steady-state lag. With
    /// `allow_reverse` the controller backs up when the target is behind
    /// instead of making a slow 180-degree turn (useful between skills,
    /// wrong while hauling: the hand must lead).
    fn steer(
        &self,
        env: &Env,
        target_xy: [f64; 2],
        target_z: f64,
        speed_cap: f64,
        feed_fwd: f64,
        allow_reverse: bool,
    ) -> Vec<f64> {
        let p = env.agent.pos;
        let dx = target_xy[0] - p[0];
        let dy = target_xy[1] - p[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let mut a = vec![0.0; ACTION_DIM];
        if dist > 1e-6 {
            let heading = dy.atan2(dx);
            let err = wrap_angle(heading - env.agent.yaw);
            let reversed = allow_reverse && err.cos() < 0.0;
            let turn_err = if reversed {
                wrap_angle(err - std::f64::consts::PI.copysign(err))
            } else {
                err
            };
            a[3] = (4.0 * turn_err).clamp(-YAW_RATE_LIMIT, YAW_RATE_LIMIT);
            let facing = if reversed { err.cos() } else { err.cos().max(0.0) };
            a[0] = (feed_fwd + 3.0 * dist).min(speed_cap) * facing;
        }
        a[2] = (2.5 * (target_z - p[2])).clamp(-V_UP_LIMIT, V_UP_LIMIT);
        a
    }

    fn act_for_goal(&self, env: &Env) -> Vec<f64> {
        let standing = env.cfg.standing_height;
        match &env.goal {
            SkillGoal::Traj { traj } => {
                let ground = env.local_ground();
                if env.transition_hold {
                    // between skills: park slightly behind the reference
                    // start, facing along the path, so tracking begins
                    // aligned the moment the skill clock starts
                    let r0 = traj.ref_point(0.0);
                    let r1 = traj.ref_point(0.2);
                    let seg = ((r1[0] - r0[0]).powi(2) + (r1[1] - r0[1]).powi(2)).sqrt().max(1e-9);
                    let dir = [(r1[0] - r0[0]) / seg, (r1[1] - r0[1]) / seg];
                    let pre = [r0[0] - 0.2 * dir[0], r0[1] - 0.2 * dir[1]];
                    let p = env.agent.pos;
                    let d_pre = ((pre[0] - p[0]).powi(2) + (pre[1] - p[1]).powi(2)).sqrt();
                    if d_pre > 0.12 {
                        return self.steer(env, pre, ground + standing, V_FWD_LIMIT, 0.0, true);
                    }
                    // in place: just rotate onto the path heading
                    let mut a = vec![0.0; ACTION_DIM];
                    let err = wrap_angle(dir[1].atan2(dir[0]) - env.agent.yaw);
                    a[3] = (4.0 * err).clamp(-YAW_RATE_LIMIT, YAW_RATE_LIMIT);
                    a[2] = (2.5 * (ground + standing - p[2])).clamp(-V_UP_LIMIT, V_UP_LIMIT);
                    return a;
                }
                let t = env.goal_step as f64 * env.cfg.dt();
                let r = traj.ref_point(t + self.lookahead);
                // reference speed at the lookahead point (zero once the
                // clamped reference stops at the end)
                let h = env.cfg.dt();
                let r2 = traj.ref_point(t + self.lookahead + h);
                let ff = ((r2[0] - r[0]).powi(2) + (r2[1] - r[1]).powi(2)).sqrt() / h;
                self.steer(env, r, ground + standing, V_FWD_LIMIT, ff, true)
            }
            SkillGoal::Carry { object, target } => {
                if env.agent.carried == Some(*object) {
                    // haul: steer the root so the HAND (0.3 m ahead,
                    // 0.2 m down) lands on the drop point; capped under
                    // the dynamic-object speed penalty threshold
                    let hand = env.hand_pos();
                    let p = env.agent.pos;
                    let root_goal =
                        [target[0] - (hand[0] - p[0]), target[1] - (hand[1] - p[1])];
                    self.steer(env, root_goal, target[2] + 0.2, 1.3, 0.0, false)
                } else {
                    // put the hand on the object: stand 0.3 m short of it
                    let o = env.object_pos[*object];
                    let p = env.agent.pos;
                    let dx = o[0] - p[0];
                    let dy = o[1] - p[1];
                    let d = (dx * dx + dy * dy).sqrt();
                    let stop = 0.3;
                    let target_xy = if d > stop {
                        [o[0] - dx / d * stop, o[1] - dy / d * stop]
                    } else {
                        [p[0], p[1]]
                    };
                    let mut a = self.steer(env, target_xy, o[2] + 0.2, V_FWD_LIMIT, 0.0, false);
                    if d <= stop + 0.05 {
                        // face the object while the grasp counter runs
                        let heading = dy.atan2(dx);
                        let err = wrap_angle(heading - env.agent.yaw);
                        a[3] = (4.0 * err).clamp(-YAW_RATE_LIMIT, YAW_RATE_LIMIT);
                        a[0] = 0.0;
                    }
                    a
                }
            }
            SkillGoal::Climb { object, target } => {
                let p = env.agent.pos;
                let dxy = ((target[0] - p[0]).powi(2) + (target[1] - p[1]).powi(2)).sqrt();
                let o = &env.scene.objects[*object];
                let reach = 0.6 * (o.extents[0].powi(2) + o.extents[1].powi(2)).sqrt();
                // walk up at standing height, then ascend in place until
                // safely above the surface before crossing the edge
                let near = dxy < reach + 1.5;
                let z_des =
                    if near { target[2] + 0.4 } else { env.local_ground() + env.cfg.standing_height };
                let cruise = if p[2] >= target[2] + 0.2 || !near { V_FWD_LIMIT } else { 0.0 };
                self.steer(env, [target[0], target[1]], z_des, cruise, 0.0, false)
            }
            SkillGoal::Sit { target, .. } => {
                let p = env.agent.pos;
                let dxy = ((target[0] - p[0]).powi(2) + (target[1] - p[1]).powi(2)).sqrt();
                if dxy > env.cfg.sit_xy_tol * 0.6 {
                    // hover above the seat on approach
                    let cruise = if p[2] >= target[2] + 0.15 { 1.2 } else { 0.3 };
                    self.steer(env, [target[0], target[1]], target[2] + 0.25, cruise, 0.0, false)
                } else {
                    // settle: stop a hair above the sit point, safely over
                    // the fall line
                    self.steer(env, [target[0], target[1]], target[2] + 0.08, 0.5, 0.0, false)
                }
            }
        }
    }
}

impl Controller for OracleController {
    fn reset(&mut self) {}

    fn act(&mut self, _obs_env: &[f64], _obs_self: &[f64], env: &Env) -> Vec<f64> {
        self.act_for_goal(env)
    }
}

/// Uniform-random controller: the reward baseline for learning tests.
pub struct RandomController {
    pub rng: rand_chacha::ChaCha8Rng,
    pub scale: f64,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        RandomController { rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed), scale: 1.0 }
    }
}

impl Controller for RandomController {
    fn reset(&mut self) {}

    fn act(&mut self, _obs_env: &[f64], _obs_self: &[f64], _env: &Env) -> Vec<f64> {
        use rand::Rng;
        (0..ACTION_DIM).map(|_| self.rng.gen_range(-self.scale..=self.scale)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::env::SimConfig;
    use crate::sim::episode::{run_lh_episode, EpisodeMode, TaskPlan};
    use crate::sim::scene::{build_scene, SceneConfig};
    use crate::sim::trajectory::{line_trajectory, TrajParams};

    #[test]
    fn oracle_follows_a_line_within_threshold() {
        let scene =
            build_scene(&SceneConfig { name: "flat".into(), world_half_extent: 30.0, objects: vec![] })
                .unwrap();
        let traj = line_trajectory([0.0, 0.0], [5.8, 0.0], &TrajParams::default()).unwrap();
        let plan = TaskPlan {
            name: "follow".into(),
            goals: vec![SkillGoal::Traj { traj }],
            start: [0.0, 0.0],
            start_yaw: 0.0,
            max_transition_train: 60,
            max_transition_test: 20,
            success_threshold: 0.3,
        };
        let cfg = SimConfig { episode_budget: 300, ..SimConfig::default() };
        let mut oracle = OracleController::default();
        let (res, _) =
            run_lh_episode(&scene, &plan, &cfg, &mut oracle, EpisodeMode::Test, None, false);
        assert_eq!(res.outcomes, vec![1.0], "cause {:?}", res.cause);
        assert!(res.lh_success());
    }
}
