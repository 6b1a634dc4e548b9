use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::suite::{Edge, Family, Goal, TaskSpec, SPATIAL_KINDS};
use super::{dist, EDGE_BAND, GRASP_RADIUS, GRIP_DEADBAND, HOME, MAX_STEP, NUM_KINDS, SUCCESS_EPS};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub kind: usize,
    pub color: usize,
    pub pos: [f64; 2],
    pub touched: bool,
}

/// Full world state. Value semantics: stepping returns a new scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agent: [f64; 2],
    pub gripper_closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<Object>,
    /// Index into `objects`.
    pub target: usize,
    pub bowl: [f64; 2],
    pub goal: Goal,
    pub seed: u64,
}

const MIN_SEPARATION: f64 = 0.15;
const DISTRACTORS: usize = 4;

fn place<R: Rng>(rng: &mut R, taken: &[[f64; 2]]) -> [f64; 2] {
    // Rejection sampling; the region is roomy enough that this terminates
    // quickly, and the fallback keeps it total.
    let mut best = [0.5, 0.5];
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..500 {
        let p = [rng.gen_range(0.15..0.85), rng.gen_range(0.25..0.85)];
        let gap = taken.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
        if gap >= MIN_SEPARATION {
            return p;
        }
        if gap > best_gap {
            best_gap = gap;
            best = p;
        }
    }
    best
}

fn object(kind: usize, pos: [f64; 2]) -> Object {
    Object { kind, color: kind, pos, touched: false }
}

/// Deterministic initial scene for `spec` under `seed`.
pub fn generate_scene(spec: &TaskSpec, seed: u64) -> Scene {
    let stream = seeding::mix(seed, spec.id.family.code() * 100 + spec.id.index as u64);
    let mut rng = seeding::rng(stream, "scene");
    let agent = [
        (HOME[0] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
        (HOME[1] + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0),
    ];

    let (bowl, objects) = match (spec.id.family, spec.layout) {
        (Family::Spatial, Some(layout)) => {
            let mut kinds = SPATIAL_KINDS;
            kinds.shuffle(&mut rng);
            let mut jitter = || [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
            let j = jitter();
            let bowl = [layout.bowl[0] + j[0], layout.bowl[1] + j[1]];
            let objects = layout
                .objects
                .iter()
                .zip(kinds)
                .map(|(p, k)| {
                    let j = jitter();
                    object(k, [p[0] + j[0], p[1] + j[1]])
                })
                .collect();
            (bowl, objects)
        }
        _ => {
            let target_kind = spec.target_kind.expect("object and goal tasks name a target kind");
            let mut others: Vec<usize> = match spec.id.family {
                Family::Goal => (0..10).collect(),
                _ => (0..10).filter(|&k| k != target_kind).collect(),
            };
            others.shuffle(&mut rng);
            let mut kinds = vec![target_kind];
            if spec.id.family == Family::Goal {
                // Both blocks are always on the table.
                kinds.push(if target_kind == 14 { 15 } else { 14 });
                kinds.extend(others.into_iter().take(DISTRACTORS - 1));
            } else {
                kinds.extend(others.into_iter().take(DISTRACTORS));
            }
            let bowl = [rng.gen_range(0.2..0.8), rng.gen_range(0.35..0.8)];
            let mut taken = vec![bowl];
            let mut objects = Vec::with_capacity(kinds.len());
            for k in kinds {
                let p = place(&mut rng, &taken);
                taken.push(p);
                objects.push(object(k, p));
            }
            (bowl, objects)
        }
    };
    debug_assert!(objects.iter().all(|o: &Object| o.kind < NUM_KINDS));

    Scene {
        agent,
        gripper_closed: false,
        held: None,
        objects,
        target: 0,
        bowl,
        goal: spec.goal,
        seed,
    }
}

impl Scene {
    pub fn target_object(&self) -> &Object {
        &self.objects[self.target]
    }

    /// Kinematic transition. The gripper command is applied first, then the
    /// agent moves (clamped to the unit square) carrying any held object.
    pub fn step(&self, action: [f64; 3]) -> Scene {
        let mut next = self.clone();
        let grip = action[2];
        if grip >= GRIP_DEADBAND && !next.gripper_closed {
            next.gripper_closed = true;
            next.held = next
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, dist(o.pos, next.agent)))
                .filter(|&(_, d)| d < GRASP_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
        } else if grip <= -GRIP_DEADBAND && next.gripper_closed {
            next.gripper_closed = false;
            next.held = None;
        }

        let dx = if action[0].is_finite() { action[0].clamp(-MAX_STEP, MAX_STEP) } else { 0.0 };
        let dy = if action[1].is_finite() { action[1].clamp(-MAX_STEP, MAX_STEP) } else { 0.0 };
        next.agent = [(next.agent[0] + dx).clamp(0.0, 1.0), (next.agent[1] + dy).clamp(0.0, 1.0)];
        if let Some(h) = next.held {
            next.objects[h].pos = next.agent;
        }
        let agent = next.agent;
        for o in &mut next.objects {
            if dist(o.pos, agent) < GRASP_RADIUS {
                o.touched = true;
            }
        }
        next
    }

    pub fn success(&self) -> bool {
        let t = self.target_object();
        let released = self.held != Some(self.target);
        match self.goal {
            Goal::Bowl => released && dist(t.pos, self.bowl) < SUCCESS_EPS,
            Goal::Edge(edge) => {
                released
                    && match edge {
                        Edge::Left => t.pos[0] <= EDGE_BAND,
                        Edge::Right => t.pos[0] >= 1.0 - EDGE_BAND,
                        Edge::Back => t.pos[1] >= 1.0 - EDGE_BAND,
                    }
            }
            Goal::TouchRetreat => t.touched && self.held.is_none() && dist(self.agent, HOME) < SUCCESS_EPS,
        }
    }
}
