//! The run-level parameter sheet.
//!
//! Every tunable the system exposes lives here under a named key, grouped
//! the way the reference setup documents them: simulation, network,
//! training/reward, and data generation. [`RunConfig::default`] records
//! the full-scale reference values (4096 parallel environments, 1200-step
//! episodes, 30 Hz control, 64-wide features, …); [`RunConfig::desk`]
//! shrinks the same sheet to sizes a single CPU core handles in minutes.
//!
//! The sheet serializes to JSON losslessly: `to_json` followed by
//! [`RunConfig::from_json`] reproduces the struct exactly, which is what
//! the `--print-config` flag relies on.

use crate::encoders::{EnvEncoderDims, SelfEncoderDims};
use crate::policy::{EncoderKind, NetDims};
use crate::sim::{SimConfig, TrajParams, ACTION_DIM, D_SELF};
use crate::training::losses::LossWeights;
use crate::training::rollout::RolloutConfig;
use crate::training::{PpoConfig, Stage, StageConfig, TrainSchedule};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// A rejected parameter value, carrying the dotted path of the offending
/// field so the caller can point at it (the CLI exits with status 3 and
/// prints this path).
#[derive(Debug, thiserror::Error)]
#[error("invalid value at {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

// ─────────────────────────── section structs ────────────────────────────

/// Simulation-level parameters. The solver fields (`position_iterations`,
/// `contact_offset_m`, friction) are recorded from the reference sheet for
/// completeness; the kinematic backend integrates poses directly and does
/// not consume them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_envs: usize,
    pub episode_steps: usize,
    pub control_hz: f64,
    pub substeps: usize,
    pub env_spacing_m: f64,
    pub position_iterations: usize,
    pub contact_offset_m: f64,
    pub static_friction: f64,
    pub dynamic_friction: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n_envs: 4096,
            episode_steps: 1200,
            control_hz: 30.0,
            substeps: 2,
            env_spacing_m: 5.0,
            position_iterations: 4,
            contact_offset_m: 0.02,
            static_friction: 1.0,
            dynamic_friction: 1.0,
        }
    }
}

/// Network widths and depths. `task_obs_dims` and `adapter_units` are the
/// reference sheet's per-task observation widths and adapter sizes; the
/// desk-scale network derives its observation widths from the simulator
/// instead, so these two keys are informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub trunk_layers: usize,
    pub attention_heads: usize,
    pub base_feature_dim: usize,
    /// Per-branch channel count of the multi-scale env encoder (its output
    /// width is three branches wide).
    pub branch_channels: usize,
    /// Hidden width of each direction of the recurrent self encoder.
    pub recurrent_hidden: usize,
    pub task_obs_dims: Vec<usize>,
    pub adapter_units: Vec<usize>,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            trunk_layers: 4,
            attention_heads: 8,
            base_feature_dim: 64,
            branch_channels: 24,
            recurrent_hidden: 32,
            task_obs_dims: vec![128, 96, 112, 144],
            adapter_units: vec![1024, 512],
        }
    }
}

/// Training-strategy and reward parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Observation history length fed to both stream encoders.
    pub history_steps: usize,
    /// Sampling distribution over the skill library during curriculum
    /// draws; must be nonnegative and sum to 1.
    pub skill_sample_probs: Vec<f64>,
    pub mixed_init_prob: f64,
    pub max_transition_steps_train: usize,
    pub max_transition_steps_test: usize,
    pub success_threshold_m: f64,
    /// Early termination on interaction failure applies to the final
    /// subtask only.
    pub iet_last_subtask_only: bool,
    pub task_specific_discrimination: bool,
    pub power_coeff: f64,
    pub traj_fail_dist_m: f64,
    pub termination_height_m: f64,
    pub speed_pen_coeff: f64,
    pub speed_pen_threshold: f64,
    /// Probability that one stream's window is masked during rollouts
    /// (cross-stream dropout).
    pub mask_strength: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            history_steps: 10,
            skill_sample_probs: vec![
                0.1, 0.1, 0.2, 0.1, 0.1, 0.05, 0.0, 0.05, 0.1, 0.1, 0.1,
            ],
            mixed_init_prob: 0.5,
            max_transition_steps_train: 60,
            max_transition_steps_test: 20,
            success_threshold_m: 0.3,
            iet_last_subtask_only: true,
            task_specific_discrimination: true,
            power_coeff: 0.0005,
            traj_fail_dist_m: 4.0,
            termination_height_m: 0.15,
            speed_pen_coeff: 1.0,
            speed_pen_threshold: 1.5,
            mask_strength: 0.3,
        }
    }
}

/// Heightmap perception and reference-trajectory generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub use_heightmap: bool,
    pub cube_side_m: f64,
    pub grid_points: usize,
    pub grid_spacing_m: f64,
    /// Recorded from the reference sheet; the analytic heightmap needs no
    /// camera, so these two are informational.
    pub fov_spacing_m: f64,
    pub camera_height_m: f64,
    pub traj_sample_points: usize,
    pub traj_dt_s: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub sharp_turn_prob: f64,
    pub sharp_turn_angle_rad: f64,
    /// Std-dev of ordinary per-segment heading changes.
    pub heading_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            use_heightmap: true,
            cube_side_m: 2.0,
            grid_points: 25,
            grid_spacing_m: 0.1,
            fov_spacing_m: 1.0,
            camera_height_m: 10.0,
            traj_sample_points: 10,
            traj_dt_s: 0.5,
            v_min: 1.4,
            v_max: 1.5,
            a_max: 2.0,
            sharp_turn_prob: 0.02,
            sharp_turn_angle_rad: 1.57,
            heading_sigma: 0.12,
        }
    }
}

/// Stage schedule and optimizer knobs (these have no entry on the
/// reference sheet; defaults are the values the staged trainer ships
/// with).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Iterations for the four stages in protocol order: env pretrain,
    /// self pretrain, frozen-encoder fusion, joint fine-tune. Zero skips a
    /// stage.
    pub stage_steps: [usize; 4],
    pub lr: f64,
    pub pretrain_batch: usize,
    pub corpus_windows: usize,
    pub rollout_horizon: usize,
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub weights: LossWeights,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            stage_steps: [40, 40, 20, 20],
            lr: 3e-4,
            pretrain_batch: 16,
            corpus_windows: 64,
            rollout_horizon: 64,
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 64,
            value_coef: 0.5,
            entropy_coef: 0.0,
            weights: LossWeights::default(),
        }
    }
}

// ───────────────────────────── the full sheet ───────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sim: SimSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
}

impl Default for RunConfig {
    /// The full-scale reference values.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            sim: SimSection::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: 64 environments, 300-step episodes, the small
    /// network, heightmap off, masking off — sized so the training smoke
    /// test finishes on one CPU core.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.sim.n_envs = 64;
        c.sim.episode_steps = 300;
        c.net.trunk_layers = 2;
        c.net.attention_heads = 4;
        c.net.base_feature_dim = 32;
        c.net.branch_channels = 8;
        c.net.recurrent_hidden = 12;
        c.data.use_heightmap = false;
        c.train.mask_strength = 0.0;
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("the sheet always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| bad("<json>", e.to_string()))
    }

    /// Check every field, reporting the first offender by dotted path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sim.n_envs == 0 {
            return Err(bad("sim.n_envs", "need at least one environment"));
        }
        if self.sim.episode_steps == 0 {
            return Err(bad("sim.episode_steps", "episodes need at least one step"));
        }
        if !(self.sim.control_hz > 0.0) {
            return Err(bad("sim.control_hz", "control rate must be positive"));
        }
        if self.sim.substeps == 0 {
            return Err(bad("sim.substeps", "need at least one substep"));
        }
        if self.net.trunk_layers == 0 {
            return Err(bad("net.trunk_layers", "need at least one trunk block"));
        }
        if self.net.attention_heads == 0
            || self.net.base_feature_dim % self.net.attention_heads != 0
        {
            return Err(bad(
                "net.base_feature_dim",
                format!(
                    "feature width {} must be a positive multiple of attention_heads {}",
                    self.net.base_feature_dim, self.net.attention_heads
                ),
            ));
        }
        if self.net.branch_channels == 0 {
            return Err(bad("net.branch_channels", "need at least one channel"));
        }
        if 3 * self.net.branch_channels % self.net.attention_heads != 0 {
            return Err(bad(
                "net.branch_channels",
                format!(
                    "env encoder width {} (three branches) must be divisible by \
                     attention_heads {}",
                    3 * self.net.branch_channels,
                    self.net.attention_heads
                ),
            ));
        }
        if self.net.recurrent_hidden == 0 {
            return Err(bad("net.recurrent_hidden", "need a positive hidden width"));
        }
        if self.train.history_steps == 0 {
            return Err(bad("train.history_steps", "history must be at least one step"));
        }
        if self.train.skill_sample_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad(
                "train.skill_sample_probs",
                "every probability must lie in [0, 1]",
            ));
        }
        let prob_sum: f64 = self.train.skill_sample_probs.iter().sum();
        if !self.train.skill_sample_probs.is_empty() && (prob_sum - 1.0).abs() > 1e-9 {
            return Err(bad(
                "train.skill_sample_probs",
                format!("probabilities sum to {prob_sum}, expected 1"),
            ));
        }
        if !(0.0..=1.0).contains(&self.train.mixed_init_prob) {
            return Err(bad("train.mixed_init_prob", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.train.mask_strength) {
            return Err(bad("train.mask_strength", "must lie in [0, 1]"));
        }
        if !(self.train.success_threshold_m > 0.0) {
            return Err(bad("train.success_threshold_m", "must be positive"));
        }
        if !(self.data.v_min > 0.0) || self.data.v_min > self.data.v_max {
            return Err(bad(
                "data.v_min",
                format!(
                    "need 0 < v_min ≤ v_max, got [{}, {}]",
                    self.data.v_min, self.data.v_max
                ),
            ));
        }
        if !(self.data.a_max > 0.0) {
            return Err(bad("data.a_max", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.data.sharp_turn_prob) {
            return Err(bad("data.sharp_turn_prob", "must lie in [0, 1]"));
        }
        if self.data.traj_sample_points < 2 {
            return Err(bad("data.traj_sample_points", "need at least two waypoints"));
        }
        if !(self.data.traj_dt_s > 0.0) {
            return Err(bad("data.traj_dt_s", "must be positive"));
        }
        if self.data.use_heightmap && self.data.grid_points < 2 {
            return Err(bad("data.grid_points", "grid needs at least 2 points per side"));
        }
        if !(self.data.grid_spacing_m > 0.0) {
            return Err(bad("data.grid_spacing_m", "must be positive"));
        }
        if !(self.schedule.lr > 0.0) {
            return Err(bad("schedule.lr", "learning rate must be positive"));
        }
        if !(self.schedule.clip_eps > 0.0) {
            return Err(bad("schedule.clip_eps", "clip radius must be positive"));
        }
        if !(0.0 < self.schedule.gamma && self.schedule.gamma <= 1.0) {
            return Err(bad("schedule.gamma", "must lie in (0, 1]"));
        }
        if !(0.0 < self.schedule.lam && self.schedule.lam <= 1.0) {
            return Err(bad("schedule.lam", "must lie in (0, 1]"));
        }
        if self.schedule.epochs == 0 || self.schedule.minibatch == 0 {
            return Err(bad("schedule.epochs", "epochs and minibatch must be positive"));
        }
        if self.schedule.pretrain_batch == 0 || self.schedule.corpus_windows == 0 {
            return Err(bad("schedule.pretrain_batch", "pretraining sizes must be positive"));
        }
        if self.schedule.rollout_horizon == 0 {
            return Err(bad("schedule.rollout_horizon", "horizon must be positive"));
        }
        self.schedule.weights.validate().map_err(|e| bad("schedule.weights", e.to_string()))?;
        Ok(())
    }

    // ────────────────────────── converters ──────────────────────────────

    /// Simulator parameters implied by the sheet.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            control_hz: self.sim.control_hz,
            substeps: self.sim.substeps,
            episode_budget: self.sim.episode_steps,
            fall_clearance: self.train.termination_height_m,
            traj_fail_dist: self.train.traj_fail_dist_m,
            power_coeff: self.train.power_coeff,
            speed_pen_coeff: self.train.speed_pen_coeff,
            speed_pen_threshold: self.train.speed_pen_threshold,
            success_threshold: self.train.success_threshold_m,
            use_grid: self.data.use_heightmap,
            grid_n: self.data.grid_points,
            grid_spacing: self.data.grid_spacing_m,
            ..SimConfig::default()
        }
    }

    /// Network dimensions implied by the sheet for the given simulator
    /// (the env-stream width depends on whether the heightmap is on).
    pub fn net_dims(&self, sim: &SimConfig) -> NetDims {
        NetDims {
            d_env_raw: sim.d_env(),
            d_self_raw: D_SELF,
            window: self.train.history_steps,
            env: EnvEncoderDims {
                d_env: sim.d_env(),
                branch_channels: self.net.branch_channels,
                heads: self.net.attention_heads,
            },
            self_enc: SelfEncoderDims {
                d_self: D_SELF,
                d_h: self.net.recurrent_hidden,
            },
            d_model: self.net.base_feature_dim,
            fusion_heads: self.net.attention_heads,
            trunk_layers: self.net.trunk_layers,
            trunk_heads: self.net.attention_heads,
            action_dim: ACTION_DIM,
            env_kind: EncoderKind::Full,
            self_kind: EncoderKind::Full,
        }
    }

    /// Reference-trajectory generation parameters.
    pub fn traj_params(&self) -> TrajParams {
        TrajParams {
            n_points: self.data.traj_sample_points,
            dt: self.data.traj_dt_s,
            v_min: self.data.v_min,
            v_max: self.data.v_max,
            a_max: self.data.a_max,
            sharp_prob: self.data.sharp_turn_prob,
            sharp_angle: self.data.sharp_turn_angle_rad,
            heading_sigma: self.data.heading_sigma,
        }
    }

    /// The four-stage schedule implied by the sheet.
    pub fn train_schedule(&self, checkpoint_dir: Option<PathBuf>) -> TrainSchedule {
        let s = &self.schedule;
        let ppo = PpoConfig {
            clip_eps: s.clip_eps,
            value_coef: s.value_coef,
            entropy_coef: s.entropy_coef,
            epochs: s.epochs,
            minibatch: s.minibatch,
            normalize_adv: true,
        };
        let stages = [Stage::PretrainEnv, Stage::PretrainSelf, Stage::Fusion, Stage::Joint]
            .into_iter()
            .zip(s.stage_steps)
            .map(|(stage, steps)| {
                let mut sc = StageConfig::new(stage, steps);
                sc.lr = s.lr;
                sc.weights = s.weights;
                sc.ppo = ppo.clone();
                sc.batch = s.pretrain_batch;
                sc
            })
            .collect();
        TrainSchedule {
            stages,
            rollout: RolloutConfig {
                n_envs: self.sim.n_envs,
                horizon: s.rollout_horizon,
                gamma: s.gamma,
                lam: s.lam,
                mask_prob: self.train.mask_strength,
                ..RolloutConfig::default()
            },
            corpus_windows: s.corpus_windows,
            checkpoint_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_record_the_reference_sheet() {
        let c = RunConfig::default();
        assert_eq!(c.sim.n_envs, 4096);
        assert_eq!(c.sim.episode_steps, 1200);
        assert_eq!(c.sim.control_hz, 30.0);
        assert_eq!(c.sim.substeps, 2);
        assert_eq!(c.sim.env_spacing_m, 5.0);
        assert_eq!(c.sim.position_iterations, 4);
        assert_eq!(c.sim.contact_offset_m, 0.02);
        assert_eq!(c.sim.static_friction, 1.0);
        assert_eq!(c.sim.dynamic_friction, 1.0);

        assert_eq!(c.net.trunk_layers, 4);
        assert_eq!(c.net.attention_heads, 8);
        assert_eq!(c.net.base_feature_dim, 64);
        assert_eq!(c.net.task_obs_dims, vec![128, 96, 112, 144]);
        assert_eq!(c.net.adapter_units, vec![1024, 512]);

        assert_eq!(c.train.history_steps, 10);
        assert_eq!(c.train.skill_sample_probs.len(), 11);
        let sum: f64 = c.train.skill_sample_probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(c.train.mixed_init_prob, 0.5);
        assert_eq!(c.train.max_transition_steps_train, 60);
        assert_eq!(c.train.max_transition_steps_test, 20);
        assert_eq!(c.train.success_threshold_m, 0.3);
        assert!(c.train.iet_last_subtask_only);
        assert!(c.train.task_specific_discrimination);
        assert_eq!(c.train.power_coeff, 0.0005);
        assert_eq!(c.train.traj_fail_dist_m, 4.0);
        assert_eq!(c.train.termination_height_m, 0.15);
        assert_eq!(c.train.speed_pen_coeff, 1.0);
        assert_eq!(c.train.speed_pen_threshold, 1.5);
        assert_eq!(c.train.mask_strength, 0.3);

        assert!(c.data.use_heightmap);
        assert_eq!(c.data.cube_side_m, 2.0);
        assert_eq!(c.data.grid_points, 25);
        assert_eq!(c.data.grid_spacing_m, 0.1);
        assert_eq!(c.data.fov_spacing_m, 1.0);
        assert_eq!(c.data.camera_height_m, 10.0);
        assert_eq!(c.data.traj_sample_points, 10);
        assert_eq!(c.data.traj_dt_s, 0.5);
        assert_eq!(c.data.v_min, 1.4);
        assert_eq!(c.data.v_max, 1.5);
        assert_eq!(c.data.a_max, 2.0);
        assert_eq!(c.data.sharp_turn_prob, 0.02);
        assert_eq!(c.data.sharp_turn_angle_rad, 1.57);

        c.validate().unwrap();
    }

    #[test]
    fn print_config_round_trips_losslessly() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            let text = cfg.to_json();
            let back = RunConfig::from_json(&text).unwrap();
            assert_eq!(back, cfg);
            // and a second bounce produces identical text
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        v["sim"]["warp_drive"] = serde_json::json!(9);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("warp_drive"), "{err}");
    }

    #[test]
    fn desk_profile_is_small_and_valid() {
        let c = RunConfig::desk();
        assert_eq!(c.sim.n_envs, 64);
        assert_eq!(c.sim.episode_steps, 300);
        assert!(!c.data.use_heightmap);
        c.validate().unwrap();

        let sim = c.sim_config();
        assert_eq!(sim.episode_budget, 300);
        assert!(!sim.use_grid);
        let dims = c.net_dims(&sim);
        dims.validate().unwrap();
        assert_eq!(dims.d_model, 32);
        assert_eq!(dims.action_dim, ACTION_DIM);

        // the full-scale sheet maps to valid dims too (625 extra env
        // channels from the heightmap)
        let full = RunConfig::default();
        let fsim = full.sim_config();
        assert_eq!(fsim.d_env(), crate::sim::env::D_ENV_BASE + 25 * 25);
        full.net_dims(&fsim).validate().unwrap();
    }

    #[test]
    fn reference_dims_constructor_is_valid() {
        NetDims::reference(19, 24, 12).validate().unwrap();
        NetDims::desk(19, 24, 12).validate().unwrap();
    }

    #[test]
    fn converters_agree_with_the_handwritten_defaults() {
        let c = RunConfig::default();
        let sim = c.sim_config();
        let mut expect = SimConfig { use_grid: true, ..SimConfig::default() };
        assert_eq!(sim, expect);
        expect.use_grid = false;
        assert_eq!(RunConfig::desk().sim_config(), SimConfig {
            episode_budget: 300,
            ..expect
        });
        assert_eq!(c.traj_params().v_min, 1.4);
        assert_eq!(c.traj_params().sharp_prob, 0.02);

        let sched = RunConfig::desk().train_schedule(None);
        sched.validate().unwrap();
        assert_eq!(sched.stages.len(), 4);
        assert_eq!(sched.rollout.n_envs, 64);
        assert_eq!(sched.rollout.mask_prob, 0.0);
        assert_eq!(sched.stages[0].stage, Stage::PretrainEnv);
        assert_eq!(sched.stages[3].stage, Stage::Joint);
    }

    #[test]
    fn validation_reports_the_dotted_field_path() {
        let mut c = RunConfig::desk();
        c.sim.n_envs = 0;
        assert_eq!(c.validate().unwrap_err().field, "sim.n_envs");

        let mut c = RunConfig::desk();
        c.data.v_min = 2.0; // above v_max
        assert_eq!(c.validate().unwrap_err().field, "data.v_min");

        let mut c = RunConfig::desk();
        c.train.skill_sample_probs = vec![0.5, 0.6];
        assert_eq!(c.validate().unwrap_err().field, "train.skill_sample_probs");

        let mut c = RunConfig::desk();
        c.net.base_feature_dim = 33;
        assert_eq!(c.validate().unwrap_err().field, "net.base_feature_dim");

        let mut c = RunConfig::desk();
        c.schedule.gamma = 0.0;
        assert_eq!(c.validate().unwrap_err().field, "schedule.gamma");
    }
}
