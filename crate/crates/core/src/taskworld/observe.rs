use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::{FLAT_HEADER, FLAT_OBS_DIM, MAX_STEP, NUM_KINDS, PROPRIO_DIM, SLOT_FEATURES};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const PATCH_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    /// Agent, bowl and one fixed slot per object kind.
    #[default]
    Flat,
    /// Top-down 16×16 RGB raster, row-major, channels last.
    Image,
}

impl ObsMode {
    pub fn dim(self) -> usize {
        match self {
            ObsMode::Flat => FLAT_OBS_DIM,
            ObsMode::Image => IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS,
        }
    }
}

const PALETTE: [[f64; 3]; NUM_KINDS] = [
    [0.8, 0.1, 0.1],
    [0.9, 0.9, 0.6],
    [1.0, 0.8, 0.2],
    [0.9, 0.6, 0.1],
    [0.7, 0.2, 0.3],
    [0.2, 0.7, 0.2],
    [0.6, 0.4, 0.2],
    [0.4, 0.2, 0.1],
    [1.0, 0.5, 0.0],
    [0.6, 0.6, 0.9],
    [0.3, 0.8, 0.8],
    [0.8, 0.3, 0.8],
    [0.3, 0.3, 0.7],
    [0.7, 0.7, 0.2],
    [1.0, 0.0, 0.0],
    [0.0, 0.2, 1.0],
];
const BOWL_GRAY: [f64; 3] = [0.5, 0.5, 0.5];
const AGENT_WHITE: [f64; 3] = [1.0, 1.0, 1.0];

pub fn palette(color: usize) -> [f64; 3] {
    PALETTE[color % NUM_KINDS]
}

pub fn proprio(scene: &Scene) -> [f64; PROPRIO_DIM] {
    [scene.agent[0], scene.agent[1], if scene.gripper_closed { 1.0 } else { -1.0 }]
}

fn cell(p: [f64; 2]) -> (usize, usize) {
    let idx = |v: f64| ((v * IMAGE_SIDE as f64) as usize).min(IMAGE_SIDE - 1);
    (idx(p[1]), idx(p[0]))
}

pub fn observe(scene: &Scene, mode: ObsMode) -> Vec<f64> {
    match mode {
        ObsMode::Flat => {
            let mut v = vec![0.0; FLAT_OBS_DIM];
            v[..3].copy_from_slice(&proprio(scene));
            let [ax, ay] = scene.agent;
            let rel = |p: [f64; 2]| [((p[0] - ax) / MAX_STEP).clamp(-1.0, 1.0), ((p[1] - ay) / MAX_STEP).clamp(-1.0, 1.0)];
            let [bx, by] = rel(scene.bowl);
            v[3..7].copy_from_slice(&[scene.bowl[0], scene.bowl[1], bx, by]);
            for (i, o) in scene.objects.iter().enumerate() {
                let base = FLAT_HEADER + o.kind * SLOT_FEATURES;
                let [dx, dy] = rel(o.pos);
                v[base..base + 5].copy_from_slice(&[1.0, o.pos[0], o.pos[1], dx, dy]);
                v[base + 5] = if scene.held == Some(i) { 1.0 } else { 0.0 };
                v[base + 6] = if o.touched { 1.0 } else { 0.0 };
            }
            v
        }
        ObsMode::Image => {
            let mut img = vec![0.0; mode.dim()];
            let mut paint = |p: [f64; 2], rgb: [f64; 3]| {
                let (r, c) = cell(p);
                let at = (r * IMAGE_SIDE + c) * IMAGE_CHANNELS;
                img[at..at + IMAGE_CHANNELS].copy_from_slice(&rgb);
            };
            paint(scene.bowl, BOWL_GRAY);
            for o in &scene.objects {
                paint(o.pos, palette(o.color));
            }
            paint(scene.agent, AGENT_WHITE);
            img
        }
    }
}
