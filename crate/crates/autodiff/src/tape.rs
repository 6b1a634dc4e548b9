use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{AutodiffError, Result};

/// Operation kinds recorded on the tape. Each carries whatever static
/// configuration its vector-Jacobian product needs; tensor operands live in
/// the node's saved inputs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Neg,
    Recip,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    SumAxis0,
    SumAxis1,
    ExpandScalar,
    ExpandRows,
    ExpandCols,
    AddRow,
    MatMul,
    MatMulNT,
    MatMulTN,
    Transpose,
    Reshape,
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { start: usize },
    SliceCols { start: usize },
    PadRows { start: usize },
    PadCols { start: usize },
    Gather(Arc<[usize]>),
    ScatterRows(Arc<[usize]>),
    Softmax,
    LogSumExp,
}

/// A value captured at record time: enough to rebuild the operand as a tensor
/// during the backward sweep, optionally still attached to its node.
#[derive(Debug, Clone)]
pub(crate) struct Saved {
    pub shape: Vec<usize>,
    pub data: Arc<[f64]>,
    pub node: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub output: Saved,
}

#[derive(Debug, Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub generation: u64,
}

/// Append-only record of differentiable operations.
///
/// Handles are cheap to clone and share the same underlying record.
/// [`Tape::clear`] drops every node and bumps the generation, after which any
/// tensor still pointing at the old generation is rejected.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

/// Handle from a tensor to the node that produced it.
#[derive(Debug, Clone)]
pub struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
    pub(crate) generation: u64,
}

impl NodeRef {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, TapeInner> {
        // A panic while recording leaves the node list consistent (pushes are atomic).
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.lock().generation
    }

    /// Drops all recorded nodes and invalidates every outstanding handle.
    pub fn clear(&self) {
        let mut inner = self.lock();
        inner.nodes.clear();
        inner.generation += 1;
    }

    pub(crate) fn check_live(&self, node: &NodeRef) -> Result<()> {
        let current = self.lock().generation;
        if node.generation != current {
            return Err(AutodiffError::StaleTape {
                node: node.generation,
                tape: current,
            });
        }
        Ok(())
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Saved>, shape: Vec<usize>, data: Arc<[f64]>) -> NodeRef {
        let mut inner = self.lock();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            output: Saved {
                shape,
                data,
                node: Some(id),
            },
        });
        NodeRef {
            tape: self.clone(),
            id,
            generation: inner.generation,
        }
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.lock().nodes[id].clone()
    }

    pub(crate) fn parents(&self, upto: usize) -> Vec<Vec<usize>> {
        let inner = self.lock();
        inner.nodes[..=upto]
            .iter()
            .map(|n| n.inputs.iter().filter_map(|s| s.node).collect())
            .collect()
    }
}
