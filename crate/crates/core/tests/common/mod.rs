//! Shared helpers for the integration suites: building joined cascade
//! trees from candidate genomes using only the public tree API, without
//! touching the incremental search machinery.

use std::sync::Arc;

use fusemap_core::ffm::Candidate;
use fusemap_core::looptree::{graft, split_at_backing};
use fusemap_core::Node;

/// Joins a genome's candidates left to right by splitting each fragment at
/// its consumed backing and grafting it onto the running tree. Returns
/// `None` when a step is structurally impossible (the caller sampled an
/// incompatible or untrackable combination).
#[allow(dead_code)]
pub fn fold_genome(pools: &[Vec<Candidate>], genome: &[usize]) -> Option<Arc<Node>> {
    let mut tree = pools[0][genome[0]].tree.clone();
    for (e, &g) in genome.iter().enumerate().skip(1) {
        let c = &pools[e][g];
        let key = c.consumed.as_ref()?;
        let parts = split_at_backing(&c.tree, key.tensor, key.backing_level).ok()?;
        let (joined, _) = graft(&tree, key.tensor, key.backing_level, &key.loops, &parts).ok()?;
        tree = joined;
    }
    Some(tree)
}
