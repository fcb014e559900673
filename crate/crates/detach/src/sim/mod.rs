//! Desk-scale kinematic simulator: scenes of yaw-rotated boxes, reference
//! trajectories, a point-body agent with joint state, sequential-skill
//! episodes, scripted controllers, and binary replays.

pub mod env;
pub mod episode;
pub mod oracle;
pub mod replay;
pub mod scene;
pub mod tasks;
pub mod trajectory;

pub use env::{AgentState, Env, EnvError, SimConfig, Skill, SkillGoal, ACTION_DIM, D_SELF};
pub use episode::{
    resolve_task, run_lh_episode, Controller, DriveStep, EpisodeDriver, EpisodeMode,
    EpisodeResult, TaskConfig, TaskPlan, TerminationCause,
};
pub use oracle::{OracleController, RandomController};
pub use replay::{PlaybackController, RecordingController, Replay};
pub use scene::{build_scene, Scene, SceneConfig, SceneObject};
pub use tasks::{follow_task, lh1_task, lh2_task, lh3_task, task_by_name};
pub use trajectory::{gen_trajectory, line_trajectory, TrajParams, Trajectory, TrajectorySpec};
