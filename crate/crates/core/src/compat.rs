//! Fusion compatibility between partial mappings.
//!
//! Two partial mappings can be fused exactly when they exchange the shared
//! tensor through the same backing buffer: same tensor, same memory level,
//! and an identical stack of loops above that buffer, with one side
//! producing and the other consuming. Everything below the backing node is
//! private to each side, so this key is the only interface information a
//! join needs.

use std::sync::Arc;

use crate::looptree::Node;
use crate::workload::{RankId, TensorId};
use crate::arch::LevelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Producer,
    Consumer,
}

/// Interface of a partial mapping at a shared tensor's backing buffer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompatKey {
    pub tensor: TensorId,
    pub backing_level: LevelId,
    /// Loops above the backing node, outermost first, as (rank, trip).
    pub loops: Vec<(RankId, u64)>,
    pub direction: Direction,
}

impl CompatKey {
    /// The direction-free part, used to group states that expose the same
    /// interface.
    pub fn interface(&self) -> (TensorId, LevelId, Vec<(RankId, u64)>) {
        (self.tensor, self.backing_level, self.loops.clone())
    }
}

/// A producer-side key and a consumer-side key agree when they name the
/// same buffer under the same loops. `None` on both sides means two
/// independent mappings that may only be combined under a root split.
pub fn joinable(open: &Option<CompatKey>, consumed: &Option<CompatKey>) -> bool {
    match (open, consumed) {
        (None, None) => true,
        (Some(p), Some(c)) => {
            p.direction == Direction::Producer
                && c.direction == Direction::Consumer
                && p.tensor == c.tensor
                && p.backing_level == c.backing_level
                && p.loops == c.loops
        }
        _ => false,
    }
}

/// Extracts the key for `tensor` from a single-Einsum chain: the chain's
/// outermost storage node holding the tensor, together with the loops above
/// it. Returns `None` if the chain never stores the tensor.
pub fn key_of_chain(
    chain: &Arc<Node>,
    tensor: TensorId,
    direction: Direction,
) -> Option<CompatKey> {
    let mut loops = Vec::new();
    let mut cur = chain;
    loop {
        match &**cur {
            Node::Loop { rank, trip, child } => {
                loops.push((*rank, *trip));
                cur = child;
            }
            Node::Storage {
                level,
                tensor: t,
                child,
            } => {
                if *t == tensor {
                    return Some(CompatKey {
                        tensor,
                        backing_level: *level,
                        loops,
                        direction,
                    });
                }
                cur = child;
            }
            Node::Split { .. } | Node::Compute { .. } => return None,
        }
    }
}
