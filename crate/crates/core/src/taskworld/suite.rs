use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

use super::HORIZON;

/// Task families mirroring the three simulated suites: which object, which
/// location, which goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Object,
    Spatial,
    Goal,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Object, Family::Spatial, Family::Goal];

    pub fn name(self) -> &'static str {
        match self {
            Family::Object => "object",
            Family::Spatial => "spatial",
            Family::Goal => "goal",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Family::Object => 1,
            Family::Spatial => 2,
            Family::Goal => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "object" => Ok(Family::Object),
            "spatial" => Ok(Family::Spatial),
            "goal" => Ok(Family::Goal),
            other => Err(CoreError::Config(format!("unknown suite `{other}`"))),
        }
    }
}

/// A task within a family. `index` is zero-based; display is one-based
/// (`object-6` is the sixth object task, the first adaptation task).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub family: Family,
    pub index: usize,
}

impl TaskId {
    pub fn new(family: Family, index: usize) -> Self {
        Self { family, index }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.family, self.index + 1)
    }
}

impl FromStr for TaskId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CoreError::Config(format!("malformed task id `{s}`"));
        let (fam, idx) = s.rsplit_once('-').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        if idx == 0 || idx > TASKS_PER_FAMILY {
            return Err(bad());
        }
        Ok(TaskId::new(fam.parse()?, idx - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    Left,
    Right,
    Back,
}

/// What has to be true of the target object at the end of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Goal {
    /// Released within tolerance of the bowl.
    Bowl,
    /// Released beyond the edge band.
    Edge(Edge),
    /// Touched by the gripper, then the agent back at its home position.
    TouchRetreat,
}

/// Fixed arrangement used by the spatial family: bowl position, then object
/// positions with the target first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub bowl: [f64; 2],
    pub objects: [[f64; 2]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub description: String,
    /// Object kind the task manipulates (spatial tasks: none, target is by location).
    pub target_kind: Option<usize>,
    pub goal: Goal,
    pub layout: Option<Layout>,
    pub horizon: usize,
}

pub const TASKS_PER_FAMILY: usize = 10;
pub const PRETRAIN_TASKS: usize = 5;

const OBJECT_NAMES: [&str; 10] = [
    "ketchup", "milk", "butter", "cheese", "tomato", "salad", "cookies", "chocolate", "orange", "soup",
];
/// Kinds 10..14 are the spatial family's interchangeable dishes.
pub(crate) const SPATIAL_KINDS: [usize; 4] = [10, 11, 12, 13];
const RED_BLOCK: usize = 14;
const BLUE_BLOCK: usize = 15;

const SPATIAL: [(&str, Layout); 10] = [
    ("left of the bowl", Layout { bowl: [0.55, 0.55], objects: [[0.35, 0.55], [0.75, 0.30], [0.55, 0.80], [0.80, 0.75]] }),
    ("right of the bowl", Layout { bowl: [0.45, 0.55], objects: [[0.65, 0.55], [0.25, 0.30], [0.45, 0.80], [0.20, 0.75]] }),
    ("behind the bowl", Layout { bowl: [0.50, 0.45], objects: [[0.50, 0.68], [0.20, 0.30], [0.80, 0.30], [0.25, 0.80]] }),
    ("in front of the bowl", Layout { bowl: [0.50, 0.65], objects: [[0.50, 0.42], [0.20, 0.80], [0.80, 0.80], [0.80, 0.30]] }),
    ("in the back left corner", Layout { bowl: [0.50, 0.50], objects: [[0.20, 0.80], [0.80, 0.80], [0.20, 0.25], [0.80, 0.25]] }),
    ("in the back right corner", Layout { bowl: [0.45, 0.55], objects: [[0.80, 0.80], [0.20, 0.80], [0.20, 0.25], [0.80, 0.25]] }),
    ("in the front left corner", Layout { bowl: [0.55, 0.45], objects: [[0.20, 0.25], [0.20, 0.80], [0.80, 0.80], [0.80, 0.25]] }),
    ("in the front right corner", Layout { bowl: [0.50, 0.60], objects: [[0.80, 0.25], [0.20, 0.80], [0.80, 0.80], [0.20, 0.25]] }),
    ("at the center of the table", Layout { bowl: [0.20, 0.75], objects: [[0.50, 0.50], [0.80, 0.80], [0.20, 0.25], [0.80, 0.25]] }),
    ("farthest from the bowl", Layout { bowl: [0.20, 0.25], objects: [[0.80, 0.80], [0.45, 0.30], [0.30, 0.55], [0.55, 0.55]] }),
];

const GOALS: [(usize, Goal); 10] = [
    (RED_BLOCK, Goal::Bowl),
    (BLUE_BLOCK, Goal::Edge(Edge::Left)),
    (BLUE_BLOCK, Goal::Bowl),
    (RED_BLOCK, Goal::Edge(Edge::Back)),
    (RED_BLOCK, Goal::TouchRetreat),
    (BLUE_BLOCK, Goal::TouchRetreat),
    (RED_BLOCK, Goal::Edge(Edge::Right)),
    (BLUE_BLOCK, Goal::Edge(Edge::Back)),
    (RED_BLOCK, Goal::Edge(Edge::Left)),
    (BLUE_BLOCK, Goal::Edge(Edge::Right)),
];

fn kind_name(kind: usize) -> &'static str {
    match kind {
        k if k < OBJECT_NAMES.len() => OBJECT_NAMES[k],
        RED_BLOCK => "red block",
        BLUE_BLOCK => "blue block",
        _ => "dish",
    }
}

fn goal_description(kind: usize, goal: Goal) -> String {
    let name = kind_name(kind);
    match goal {
        Goal::Bowl => format!("put the {name} in the bowl"),
        Goal::Edge(edge) => {
            let side = match edge {
                Edge::Left => "left",
                Edge::Right => "right",
                Edge::Back => "back",
            };
            format!("push the {name} to the {side} edge")
        }
        Goal::TouchRetreat => format!("touch the {name} and retreat"),
    }
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        assert!(id.index < TASKS_PER_FAMILY, "task index out of range");
        let i = id.index;
        let (description, target_kind, goal, layout) = match id.family {
            Family::Object => (
                format!("pick up the {} and place it in the bowl", OBJECT_NAMES[i]),
                Some(i),
                Goal::Bowl,
                None,
            ),
            Family::Spatial => {
                let (phrase, layout) = SPATIAL[i];
                (
                    format!("pick up the dish {phrase} and place it in the bowl"),
                    None,
                    Goal::Bowl,
                    Some(layout),
                )
            }
            Family::Goal => {
                let (kind, goal) = GOALS[i];
                (goal_description(kind, goal), Some(kind), goal, None)
            }
        };
        Self {
            id,
            description,
            target_kind,
            goal,
            layout,
            horizon: HORIZON,
        }
    }
}

/// Ten tasks of one family: the first five pretrain the base policy, the
/// remaining five form the adaptation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub family: Family,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn new(family: Family) -> Self {
        let tasks = (0..TASKS_PER_FAMILY).map(|i| TaskSpec::new(TaskId::new(family, i))).collect();
        Self { family, tasks }
    }

    pub fn pretrain_tasks(&self) -> &[TaskSpec] {
        &self.tasks[..PRETRAIN_TASKS]
    }

    pub fn adapt_tasks(&self) -> &[TaskSpec] {
        &self.tasks[PRETRAIN_TASKS..]
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskSpec> {
        (id.family == self.family).then(|| self.tasks.get(id.index)).flatten()
    }
}

/// Whitespace vocabulary over every description of every family. Index 0 is
/// reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const UNKNOWN_TOKEN: usize = 0;

impl Vocabulary {
    pub fn global() -> Self {
        let mut words = BTreeSet::new();
        for family in Family::ALL {
            for t in TaskSuite::new(family).tasks {
                words.extend(t.description.split_whitespace().map(str::to_lowercase));
            }
        }
        let mut v = vec!["<unk>".to_string()];
        v.extend(words);
        Self { words: v }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words[1..]
                    .binary_search(&w)
                    .map(|i| i + 1)
                    .unwrap_or(UNKNOWN_TOKEN)
            })
            .collect()
    }

    pub fn word(&self, token: usize) -> Option<&str> {
        self.words.get(token).map(String::as_str)
    }
}
