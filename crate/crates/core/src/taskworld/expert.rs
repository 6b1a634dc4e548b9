use rand::Rng;

use super::scene::Scene;
use super::suite::{Edge, Goal, TaskSpec};
use super::{dist, EDGE_BAND, GRASP_RADIUS, HOME, MAX_STEP, SUCCESS_EPS};

const EDGE_MARGIN: f64 = EDGE_BAND / 2.0;

fn toward(from: [f64; 2], to: [f64; 2], grip: f64) -> [f64; 3] {
    [
        (to[0] - from[0]).clamp(-MAX_STEP, MAX_STEP),
        (to[1] - from[1]).clamp(-MAX_STEP, MAX_STEP),
        grip,
    ]
}

fn destination(scene: &Scene) -> [f64; 2] {
    let t = scene.target_object().pos;
    match scene.goal {
        Goal::Bowl => scene.bowl,
        Goal::Edge(Edge::Left) => [EDGE_MARGIN, t[1]],
        Goal::Edge(Edge::Right) => [1.0 - EDGE_MARGIN, t[1]],
        Goal::Edge(Edge::Back) => [t[0], 1.0 - EDGE_MARGIN],
        Goal::TouchRetreat => HOME,
    }
}

/// Scripted proportional controller. Gripper commands are always ±1 so the
/// demonstrated gripper channel is two-valued.
pub fn expert_action(scene: &Scene, _spec: &TaskSpec) -> [f64; 3] {
    let target = scene.target_object();
    if let Goal::TouchRetreat = scene.goal {
        if scene.gripper_closed {
            return [0.0, 0.0, -1.0];
        }
        let to = if target.touched { HOME } else { target.pos };
        return toward(scene.agent, to, -1.0);
    }
    if scene.held == Some(scene.target) {
        let dest = destination(scene);
        if dist(scene.agent, dest) < SUCCESS_EPS / 2.0 {
            return [0.0, 0.0, -1.0];
        }
        return toward(scene.agent, dest, 1.0);
    }
    if scene.gripper_closed {
        return [0.0, 0.0, -1.0];
    }
    if dist(scene.agent, target.pos) < GRASP_RADIUS {
        return [0.0, 0.0, 1.0];
    }
    toward(scene.agent, target.pos, -1.0)
}

/// Uniform action over the full action box.
pub fn random_action<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(-MAX_STEP..=MAX_STEP),
        rng.gen_range(-MAX_STEP..=MAX_STEP),
        rng.gen_range(-1.0..=1.0),
    ]
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// States visited before each action, `states[t]` paired with `actions[t]`.
    pub states: Vec<Scene>,
    pub actions: Vec<[f64; 3]>,
    pub success: bool,
}

/// Runs `policy` from `scene` until success or the horizon.
pub fn rollout<F>(scene: Scene, horizon: usize, mut policy: F) -> Rollout
where
    F: FnMut(&Scene, usize) -> [f64; 3],
{
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = scene;
    let mut success = s.success();
    for t in 0..horizon {
        if success {
            break;
        }
        let a = policy(&s, t);
        let next = s.step(a);
        states.push(s);
        actions.push(a);
        s = next;
        success = s.success();
    }
    Rollout { states, actions, success }
}
