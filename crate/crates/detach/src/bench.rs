//! Standard benchmark harnesses: the training smoke run on the
//! trajectory-following micro-task and the seed-averaged encoder-ablation
//! comparison. Both are library functions so the command-line tool and
//! the acceptance suite execute identical experiments.

use crate::config::RunConfig;
use crate::metrics::{self, EvalTask, PolicyController, Variant};
use crate::params::ParamTree;
use crate::policy::{ActMode, NetDims};
use crate::sim::{
    build_scene, gen_trajectory, run_lh_episode, EpisodeMode, RandomController, Scene,
    SceneConfig, SimConfig, SkillGoal, TaskPlan, TrajParams,
};
use crate::training::rollout::FollowSampler;
use crate::training::{run_protocol, ProtocolError, StageLog, TrainSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of the learning smoke run.
#[derive(Debug)]
pub struct SmokeReport {
    pub follow_success: f64,
    pub mean_reward: f64,
    pub random_mean_reward: f64,
    pub train_seconds: f64,
    pub iterations: usize,
    pub log: StageLog,
}

/// A fixed evaluation set of trajectory-following episodes.
fn follow_eval_tasks(
    n: usize,
    seed: u64,
    params: &TrajParams,
    area: f64,
) -> (Scene, Vec<TaskPlan>) {
    let scene = build_scene(&SceneConfig {
        name: "flat".into(),
        world_half_extent: 30.0,
        objects: vec![],
    })
    .expect("empty scene builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = (0..n)
        .map(|i| {
            let start = [rng.gen_range(-area..=area), rng.gen_range(-area..=area)];
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let traj = gen_trajectory(&mut rng, start, heading, params);
            TaskPlan {
                name: format!("follow-eval-{i}"),
                goals: vec![SkillGoal::Traj { traj }],
                start,
                start_yaw: heading,
                max_transition_train: 60,
                max_transition_test: 20,
                success_threshold: 0.3,
            }
        })
        .collect();
    (scene, plans)
}

/// Mean per-episode reward and follow success of a controller-building
/// closure over a fixed plan set.
fn eval_follow_set<F>(
    scene: &Scene,
    plans: &[TaskPlan],
    sim: &SimConfig,
    mut make: F,
) -> (f64, f64)
where
    F: FnMut(u64) -> Box<dyn crate::sim::Controller>,
{
    let mut reward = 0.0;
    let mut hits = 0usize;
    for (i, plan) in plans.iter().enumerate() {
        let mut ctl = make(i as u64);
        let (result, _) =
            run_lh_episode(scene, plan, sim, ctl.as_mut(), EpisodeMode::Test, None, false);
        reward += result.total_reward;
        if result.lh_success() {
            hits += 1;
        }
    }
    (hits as f64 / plans.len() as f64, reward / plans.len() as f64)
}

/// Train the full pipeline on randomized trajectory-following episodes and
/// evaluate it against a random-action baseline on a held-out plan set.
pub fn smoke_run(
    cfg: &RunConfig,
    seed: u64,
    eval_episodes: usize,
) -> Result<SmokeReport, ProtocolError> {
    let sim = cfg.sim_config();
    let dims = cfg.net_dims(&sim);
    let schedule = cfg.train_schedule(None);
    let params = cfg.traj_params();
    let sampler = FollowSampler::new(2.0, params);

    let t0 = std::time::Instant::now();
    let (tree, log) = run_protocol(&schedule, sampler, &sim, &dims, seed)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let (scene, plans) = follow_eval_tasks(eval_episodes, seed ^ 0x5eed_e4a1, &params, 2.0);
    let (follow_success, mean_reward) = eval_follow_set(&scene, &plans, &sim, |i| {
        Box::new(PolicyController::new(&tree, &dims, ActMode::Mean, 1000 + i))
    });
    let (_, random_mean_reward) = eval_follow_set(&scene, &plans, &sim, |i| {
        Box::new(RandomController::new(2000 + i))
    });

    Ok(SmokeReport {
        follow_success,
        mean_reward,
        random_mean_reward,
        train_seconds,
        iterations: log.rows.len(),
        log,
    })
}

/// Per-variant outcome of the ablation micro-benchmark, averaged over
/// seeds.
#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Per-seed in-distribution follow rate.
    pub base_rates: Vec<f64>,
    /// Per-seed environment-shifted follow rate.
    pub shifted_rates: Vec<f64>,
    /// Per-seed carry/climb/sit rates.
    pub carry_rates: Vec<f64>,
    pub climb_rates: Vec<f64>,
    pub sit_rates: Vec<f64>,
    /// Per-seed ratios.
    pub egr: Vec<f64>,
    pub sgr: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl VariantSummary {
    pub fn mean_egr(&self) -> f64 {
        mean(&self.egr)
    }
    pub fn mean_sgr(&self) -> f64 {
        mean(&self.sgr)
    }
    pub fn mean_base(&self) -> f64 {
        mean(&self.base_rates)
    }
    pub fn mean_shifted(&self) -> f64 {
        mean(&self.shifted_rates)
    }
}

/// Full micro-benchmark result.
#[derive(Debug)]
pub struct AblationReport {
    pub seeds: usize,
    pub trials: usize,
    pub full: VariantSummary,
    pub a1: VariantSummary,
    pub a2: VariantSummary,
    pub seconds: f64,
}

impl AblationReport {
    /// The two directional claims the benchmark exists to test.
    pub fn egr_direction_holds(&self) -> bool {
        self.a1.mean_egr() <= self.full.mean_egr() + 1e-12
    }
    pub fn sgr_direction_holds(&self) -> bool {
        self.a2.mean_sgr() <= self.full.mean_sgr() + 1e-12
    }

    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!(
            "{:<18}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "variant", "follow", "shifted", "carry", "climb", "sit", "egr", "sgr"
        );
        for v in [&self.full, &self.a1, &self.a2] {
            let _ = writeln!(
                out,
                "{:<18}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}",
                v.variant.name(),
                v.mean_base(),
                v.mean_shifted(),
                mean(&v.carry_rates),
                mean(&v.climb_rates),
                mean(&v.sit_rates),
                v.mean_egr(),
                v.mean_sgr(),
            );
        }
        let _ = writeln!(
            out,
            "egr direction (a1 ≤ full): {}   sgr direction (a2 ≤ full): {}",
            if self.egr_direction_holds() { "holds" } else { "VIOLATED" },
            if self.sgr_direction_holds() { "holds" } else { "VIOLATED" },
        );
        out
    }

    pub fn csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("variant,seed,follow,shifted,carry,climb,sit,egr,sgr\n");
        for v in [&self.full, &self.a1, &self.a2] {
            for s in 0..v.base_rates.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    v.variant.name(),
                    s,
                    v.base_rates[s],
                    v.shifted_rates[s],
                    v.carry_rates[s],
                    v.climb_rates[s],
                    v.sit_rates[s],
                    v.egr[s],
                    v.sgr[s],
                );
            }
        }
        out
    }
}

/// Micro-benchmark knobs (kept small: the point is the seed-averaged
/// direction, not absolute rates).
#[derive(Debug, Clone)]
pub struct MicroBench {
    pub seeds: usize,
    pub trials: usize,
}

impl Default for MicroBench {
    fn default() -> Self {
        MicroBench { seeds: 10, trials: 16 }
    }
}

impl MicroBench {
    /// Train each encoder variant through the identical protocol per seed
    /// and compare the seed-averaged generalization ratios.
    pub fn run(&self) -> Result<AblationReport, ProtocolError> {
        let t0 = std::time::Instant::now();
        let (sim, dims, schedule, params) = micro_setup();
        let mut summaries = Vec::new();
        for variant in [Variant::Full, Variant::A1, Variant::A2] {
            let mut summary = VariantSummary {
                variant,
                base_rates: Vec::new(),
                shifted_rates: Vec::new(),
                carry_rates: Vec::new(),
                climb_rates: Vec::new(),
                sit_rates: Vec::new(),
                egr: Vec::new(),
                sgr: Vec::new(),
            };
            for seed in 0..self.seeds as u64 {
                let mut vdims = dims.clone();
                match variant {
                    Variant::Full => {}
                    Variant::A1 => vdims.env_kind = crate::policy::EncoderKind::Linear,
                    Variant::A2 => vdims.self_kind = crate::policy::EncoderKind::Linear,
                }
                let sampler = FollowSampler::new(1.5, params);
                let (tree, _log) = run_protocol(&schedule, sampler, &sim, &vdims, seed)?;
                let rates = micro_eval(&tree, &vdims, &sim, &params, self.trials, seed);
                // a seed that learned nothing on the base task cannot
                // demonstrate generalization: both ratios are 0 for it
                let egr_s = if rates.base > 0.0 { rates.shifted / rates.base } else { 0.0 };
                let early = (rates.base + rates.carry) / 2.0;
                let late = (rates.climb + rates.sit) / 2.0;
                let sgr_s = if early > 0.0 { late / early } else { 0.0 };
                summary.base_rates.push(rates.base);
                summary.shifted_rates.push(rates.shifted);
                summary.carry_rates.push(rates.carry);
                summary.climb_rates.push(rates.climb);
                summary.sit_rates.push(rates.sit);
                summary.egr.push(egr_s);
                summary.sgr.push(sgr_s);
            }
            summaries.push(summary);
        }
        let mut it = summaries.into_iter();
        Ok(AblationReport {
            seeds: self.seeds,
            trials: self.trials,
            full: it.next().expect("three variants"),
            a1: it.next().expect("three variants"),
            a2: it.next().expect("three variants"),
            seconds: t0.elapsed().as_secs_f64(),
        })
    }
}

struct MicroRates {
    base: f64,
    shifted: f64,
    carry: f64,
    climb: f64,
    sit: f64,
}

fn micro_setup() -> (SimConfig, NetDims, TrainSchedule, TrajParams) {
    let mut cfg = RunConfig::desk();
    cfg.sim.episode_steps = 240;
    cfg.schedule.stage_steps = [4, 4, 4, 12];
    cfg.schedule.rollout_horizon = 48;
    cfg.schedule.epochs = 2;
    cfg.schedule.minibatch = 48;
    cfg.schedule.corpus_windows = 24;
    cfg.sim.n_envs = 8;
    cfg.train.history_steps = 6;
    cfg.net.base_feature_dim = 16;
    cfg.net.branch_channels = 4;
    cfg.net.attention_heads = 2;
    cfg.net.recurrent_hidden = 6;
    cfg.net.trunk_layers = 1;
    let sim = cfg.sim_config();
    let dims = cfg.net_dims(&sim);
    let schedule = cfg.train_schedule(None);
    let mut params = cfg.traj_params();
    // short, gentle in-distribution paths
    params.n_points = 6;
    params.sharp_prob = 0.0;
    params.heading_sigma = 0.05;
    (sim, dims, schedule, params)
}

fn micro_eval(
    tree: &ParamTree,
    dims: &NetDims,
    sim: &SimConfig,
    params: &TrajParams,
    trials: usize,
    seed: u64,
) -> MicroRates {
    // in-distribution follow
    let (scene, base_plans) = follow_eval_tasks(trials, 0xba5e ^ seed, params, 1.5);
    let (base, _) = eval_follow_set(&scene, &base_plans, sim, |i| {
        Box::new(PolicyController::new(tree, dims, ActMode::Mean, 3000 + i))
    });
    // environment-shifted follow: longer paths with sharp turns, wider area
    let mut hard = *params;
    hard.n_points = 9;
    hard.sharp_prob = 0.25;
    hard.heading_sigma = 0.25;
    let (scene_h, hard_plans) = follow_eval_tasks(trials, 0x44a6d ^ seed, &hard, 3.0);
    let (shifted, _) = eval_follow_set(&scene_h, &hard_plans, sim, |i| {
        Box::new(PolicyController::new(tree, dims, ActMode::Mean, 4000 + i))
    });
    // single-skill micro tasks for the skill split
    let carry = micro_skill_rate(tree, dims, sim, trials, seed, MicroSkill::Carry);
    let climb = micro_skill_rate(tree, dims, sim, trials, seed, MicroSkill::Climb);
    let sit = micro_skill_rate(tree, dims, sim, trials, seed, MicroSkill::Sit);
    MicroRates { base, shifted, carry, climb, sit }
}

#[derive(Clone, Copy)]
enum MicroSkill {
    Carry,
    Climb,
    Sit,
}

/// Single-skill micro task evaluated zero-shot: short distances, one
/// object.
fn micro_skill_rate(
    tree: &ParamTree,
    dims: &NetDims,
    sim: &SimConfig,
    trials: usize,
    seed: u64,
    skill: MicroSkill,
) -> f64 {
    let (scene, plan) = micro_skill_task(skill);
    let task = EvalTask { name: "micro".into(), scene, plan };
    let report = metrics::run_eval(
        std::slice::from_ref(&task),
        "micro",
        sim,
        trials,
        seed ^ 0x5111,
        0.15,
        0.2,
        |_, s| PolicyController::new(tree, dims, ActMode::Mean, s),
    );
    match report {
        Ok(r) => r.rows[0].lh.value(),
        Err(_) => 0.0,
    }
}

fn micro_skill_task(skill: MicroSkill) -> (Scene, TaskPlan) {
    use crate::sim::SceneObject;
    use crate::sim::scene::ObjectKind;
    let obj = |name: &str, kind, position, extents, carriable| SceneObject {
        name: name.into(),
        kind,
        position,
        yaw: 0.0,
        extents,
        carriable,
    };
    let (objects, goal) = match skill {
        MicroSkill::Carry => (
            vec![obj("box", ObjectKind::Box, [1.2, 0.0, 0.35], [0.4, 0.4, 0.7], true)],
            SkillGoal::Carry { object: 0, target: [2.4, 0.6, 0.35] },
        ),
        MicroSkill::Climb => {
            let platform =
                obj("step", ObjectKind::Platform, [1.5, 0.0, 0.2], [1.2, 1.2, 0.4], false);
            let target = platform.climb_target();
            (vec![platform], SkillGoal::Climb { object: 0, target })
        }
        MicroSkill::Sit => {
            let stool = obj("stool", ObjectKind::Chair, [1.5, 0.0, 0.25], [0.5, 0.5, 0.5], false);
            let target = stool.sit_target();
            (vec![stool], SkillGoal::Sit { object: 0, target })
        }
    };
    let scene = build_scene(&SceneConfig {
        name: "micro".into(),
        world_half_extent: 10.0,
        objects,
    })
    .expect("micro scene builds");
    let plan = TaskPlan {
        name: "micro".into(),
        goals: vec![goal],
        start: [0.0, 0.0],
        start_yaw: 0.0,
        max_transition_train: 60,
        max_transition_test: 20,
        success_threshold: 0.3,
    };
    (scene, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::OracleController;

    #[test]
    fn micro_skill_tasks_are_solvable_by_the_oracle() {
        let sim = SimConfig { episode_budget: 240, ..SimConfig::default() };
        for skill in [MicroSkill::Carry, MicroSkill::Climb, MicroSkill::Sit] {
            let (scene, plan) = micro_skill_task(skill);
            let mut oracle = OracleController::default();
            let (result, _) =
                run_lh_episode(&scene, &plan, &sim, &mut oracle, EpisodeMode::Test, None, false);
            assert_eq!(result.outcomes, vec![1.0], "skill {} failed", plan.name);
        }
    }

    #[test]
    fn follow_eval_sets_are_deterministic_and_oracle_solvable() {
        let params = TrajParams { n_points: 6, sharp_prob: 0.0, ..TrajParams::default() };
        let (scene, plans) = follow_eval_tasks(4, 9, &params, 1.5);
        let (scene2, plans2) = follow_eval_tasks(4, 9, &params, 1.5);
        assert_eq!(plans.len(), plans2.len());
        for (a, b) in plans.iter().zip(&plans2) {
            assert_eq!(a.start, b.start);
        }
        let sim = SimConfig::default();
        let (rate, reward) = eval_follow_set(&scene, &plans, &sim, |_| {
            Box::new(OracleController::default())
        });
        assert_eq!(rate, 1.0);
        assert!(reward > 0.0);
        drop(scene2);
    }
}
