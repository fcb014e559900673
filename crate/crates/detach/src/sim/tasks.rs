//! Canonical task definitions. These builders are the single source of
//! truth; the JSON files under `configs/` are their serialized form.
//!
//! Object ordering matters: the `scene_i` sources in each plan refer to
//! these indices.

use super::episode::TaskConfig;
use super::scene::{ObjectKind, SceneConfig, SceneObject};
use super::trajectory::TrajectorySpec;

fn obj(
    name: &str,
    kind: ObjectKind,
    position: [f64; 3],
    yaw: f64,
    extents: [f64; 3],
    carriable: bool,
) -> SceneObject {
    SceneObject { name: name.into(), kind, position, yaw, extents, carriable }
}

/// Four-skill task: follow a path, carry a box to a drop point, climb a
/// platform, sit on the chair on top of it.
///
/// Objects: 0 platform (climb target), 1 chair (sit target), 2 carriable
/// box, 3-4 boundary walls.
pub fn lh1_task() -> TaskConfig {
    TaskConfig {
        name: "lh1".into(),
        scene: SceneConfig {
            name: "lh1".into(),
            world_half_extent: 30.0,
            objects: vec![
                obj("platform", ObjectKind::Platform, [0.0, 0.0, 0.58], 0.0, [4.0, 4.0, 1.16], false),
                obj("chair", ObjectKind::Chair, [0.0, 0.0, 1.46], -1.57, [0.5, 0.5, 0.6], false),
                obj("box", ObjectKind::Box, [4.5, -4.0, 0.35], 0.0, [0.4, 0.4, 0.7], true),
                obj("wall_a", ObjectKind::Wall, [6.0, -3.25, 1.5], 0.0, [0.2, 6.0, 3.0], false),
                obj("wall_b", ObjectKind::Wall, [6.0, 3.25, 1.5], 0.0, [0.2, 6.0, 3.0], false),
            ],
        },
        skills: vec!["traj".into(), "carry".into(), "climb".into(), "sit".into()],
        target_indices: vec![0, 0, 0, 1],
        sources: vec!["traj_0".into(), "tarpos_0".into(), "scene_0".into(), "scene_1".into()],
        carry_targets: vec![[0.0, -1.8, 0.35]],
        carry_object: Some(2),
        start: [10.0, 4.0],
        start_yaw: -2.3562,
        // the straight reference threads the gap between the two walls
        // at (6, 0) and ends on the box's side of them
        trajectories: vec![TrajectorySpec::Line { from: [10.0, 4.0], to: [5.0, -1.0] }],
        max_transition_steps_train: 60,
        max_transition_steps_test: 20,
        success_threshold: 0.3,
    }
}

/// Indoor navigation task: two trajectory legs, a carry between them, and
/// a sit on the sofa.
///
/// Objects: 0-1 carriable boxes, 2 bed, 3 table, 4-5 nightstands, 6 car,
/// 7 tv stand, 8 sofa (sit target), 9 television, 10 sleeping platform.
pub fn lh2_task() -> TaskConfig {
    TaskConfig {
        name: "lh2".into(),
        scene: lh2_scene(),
        skills: vec!["traj".into(), "carry".into(), "traj".into(), "sit".into()],
        target_indices: vec![0, 0, 0, 8],
        sources: vec!["traj_0".into(), "scene_0".into(), "traj_1".into(), "scene_8".into()],
        carry_targets: vec![[15.0, 11.0, 0.35]],
        carry_object: Some(0),
        start: [11.5, 0.0],
        start_yaw: 1.5708,
        trajectories: vec![
            TrajectorySpec::Line { from: [11.5, 0.0], to: [11.5, 8.0] },
            TrajectorySpec::Line { from: [14.0, 11.0], to: [18.0, 14.4] },
        ],
        max_transition_steps_train: 60,
        max_transition_steps_test: 20,
        success_threshold: 0.3,
    }
}

fn lh2_scene() -> SceneConfig {
    SceneConfig {
        name: "lh2".into(),
        world_half_extent: 30.0,
        objects: vec![
            obj("box_a", ObjectKind::Box, [11.0, 11.0, 0.5], 0.0, [0.4, 0.4, 1.0], true),
            obj("box_b", ObjectKind::Box, [15.0, 18.2, 0.5], 0.0, [0.4, 0.4, 1.0], true),
            obj("bed", ObjectKind::Bed, [15.0, 20.0, 1.5], 0.0, [2.0, 1.8, 0.6], false),
            obj("table", ObjectKind::Table, [15.0, 13.0, 0.3], 0.0, [1.2, 0.8, 0.6], false),
            obj("nightstand_a", ObjectKind::Nightstand, [13.7, 21.0, 1.7], 0.0, [0.5, 0.5, 1.0], false),
            obj("nightstand_b", ObjectKind::Nightstand, [16.5, 21.0, 1.65], 0.0, [0.5, 0.5, 0.9], false),
            obj("car", ObjectKind::Car, [13.2, 16.0, 0.5], 0.0, [1.8, 4.0, 1.0], false),
            obj("tv_stand", ObjectKind::TvStand, [18.0, 13.0, 0.35], 0.0, [1.6, 0.5, 0.7], false),
            obj("sofa", ObjectKind::Sofa, [18.0, 17.0, 0.35], 0.0, [2.0, 0.9, 0.7], false),
            obj("television", ObjectKind::Television, [18.0, 13.0, 1.5], 0.0, [1.2, 0.2, 1.6], false),
            obj("sleep_platform", ObjectKind::Platform, [15.1, 20.5, 0.6], 0.0, [4.6, 3.0, 1.2], false),
        ],
    }
}

/// Five-skill task: LH2's scene with the second carriable box replaced by
/// a climbable box, then traj-carry-traj-climb-sit.
///
/// Objects: 0 carriable box, 1 climb box (climb target), 2 bed (sit
/// target), then the LH2 furniture.
pub fn lh3_task() -> TaskConfig {
    TaskConfig {
        name: "lh3".into(),
        scene: SceneConfig {
            name: "lh3".into(),
            world_half_extent: 30.0,
            objects: vec![
                obj("box_a", ObjectKind::Box, [11.0, 11.0, 0.5], 0.0, [0.4, 0.4, 1.0], true),
                obj("climb_box", ObjectKind::Box, [15.0, 18.2, 0.43], 0.0, [0.8, 0.8, 0.86], false),
                obj("bed", ObjectKind::Bed, [15.0, 20.0, 1.5], 0.0, [2.0, 1.8, 0.6], false),
                obj("table", ObjectKind::Table, [15.0, 13.0, 0.3], 0.0, [1.2, 0.8, 0.6], false),
                obj("nightstand_a", ObjectKind::Nightstand, [13.7, 21.0, 1.7], 0.0, [0.5, 0.5, 1.0], false),
                obj("nightstand_b", ObjectKind::Nightstand, [16.5, 21.0, 1.65], 0.0, [0.5, 0.5, 0.9], false),
                obj("car", ObjectKind::Car, [13.2, 16.0, 0.5], 0.0, [1.8, 4.0, 1.0], false),
                obj("tv_stand", ObjectKind::TvStand, [18.0, 13.0, 0.35], 0.0, [1.6, 0.5, 0.7], false),
                obj("sofa", ObjectKind::Sofa, [18.0, 17.0, 0.35], 0.0, [2.0, 0.9, 0.7], false),
                obj("television", ObjectKind::Television, [18.0, 13.0, 1.5], 0.0, [1.2, 0.2, 1.6], false),
                obj("sleep_platform", ObjectKind::Platform, [15.1, 20.5, 0.6], 0.0, [4.6, 3.0, 1.2], false),
            ],
        },
        skills: vec![
            "traj".into(),
            "carry".into(),
            "traj".into(),
            "climb".into(),
            "sit".into(),
        ],
        target_indices: vec![0, 0, 0, 1, 2],
        sources: vec![
            "traj_0".into(),
            "tarpos_0".into(),
            "traj_1".into(),
            "scene_1".into(),
            "scene_2".into(),
        ],
        carry_targets: vec![[15.0, 11.0, 0.35]],
        carry_object: Some(0),
        start: [11.5, 0.0],
        start_yaw: 1.5708,
        trajectories: vec![
            TrajectorySpec::Line { from: [11.5, 0.0], to: [11.5, 8.0] },
            TrajectorySpec::Line { from: [14.0, 11.0], to: [15.0, 16.0] },
        ],
        max_transition_steps_train: 60,
        max_transition_steps_test: 20,
        success_threshold: 0.3,
    }
}

/// Single-skill trajectory-following task on flat ground (the learning
/// smoke-test target).
pub fn follow_task() -> TaskConfig {
    TaskConfig {
        name: "follow".into(),
        scene: SceneConfig { name: "flat".into(), world_half_extent: 30.0, objects: vec![] },
        skills: vec!["traj".into()],
        target_indices: vec![0],
        sources: vec!["traj_0".into()],
        carry_targets: vec![],
        carry_object: None,
        start: [0.0, 0.0],
        start_yaw: 0.0,
        trajectories: vec![TrajectorySpec::Line { from: [0.0, 0.0], to: [5.8, 0.0] }],
        max_transition_steps_train: 60,
        max_transition_steps_test: 20,
        success_threshold: 0.3,
    }
}

pub fn task_by_name(name: &str) -> Option<TaskConfig> {
    match name {
        "lh1" => Some(lh1_task()),
        "lh2" => Some(lh2_task()),
        "lh3" => Some(lh3_task()),
        "follow" => Some(follow_task()),
        _ => None,
    }
}
