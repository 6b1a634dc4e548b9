//! Synthetic tabletop suites: a point gripper, typed objects and a bowl on
//! the unit square, with scripted experts and per-task success predicates.

mod expert;
mod observe;
mod scene;
mod suite;

pub use expert::{expert_action, random_action, rollout, Rollout};
pub use observe::{observe, palette, proprio, ObsMode, IMAGE_CHANNELS, IMAGE_SIDE, PATCH_SIDE};
pub use scene::{generate_scene, Object, Scene};
pub use suite::{
    Edge, Family, Goal, Layout, TaskId, TaskSpec, TaskSuite, Vocabulary, PRETRAIN_TASKS, TASKS_PER_FAMILY,
    UNKNOWN_TOKEN,
};

/// Number of distinct object kinds; the flat observation has one slot each.
pub const NUM_KINDS: usize = 16;
/// present, x, y, offset from the agent (x, y), held, touched
pub const SLOT_FEATURES: usize = 7;
/// agent x, y, gripper, bowl x, y and its offset from the agent.
pub const FLAT_HEADER: usize = 7;
/// Header, then one slot per kind.
pub const FLAT_OBS_DIM: usize = FLAT_HEADER + NUM_KINDS * SLOT_FEATURES;
pub const PROPRIO_DIM: usize = 3;
/// dx, dy, gripper command.
pub const ACTION_DIM: usize = 3;

pub const MAX_STEP: f64 = 0.1;
pub const GRASP_RADIUS: f64 = 0.05;
pub const SUCCESS_EPS: f64 = 0.05;
pub const HORIZON: usize = 80;
/// Gripper commands inside (-GRIP_DEADBAND, GRIP_DEADBAND) leave it as is.
pub const GRIP_DEADBAND: f64 = 0.5;
pub const HOME: [f64; 2] = [0.5, 0.08];
pub const EDGE_BAND: f64 = 0.08;

/// Demonstration scenes are drawn from `0..EVAL_SEED_BASE`, evaluation
/// scenes from `EVAL_SEED_BASE..`, so the two never share a layout.
pub const EVAL_SEED_BASE: u64 = 1000;

pub fn eval_seed(i: usize) -> u64 {
    EVAL_SEED_BASE + i as u64
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
