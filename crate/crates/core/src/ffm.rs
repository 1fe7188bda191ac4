//! The mapper: per-Einsum candidate enumeration and the Group → Prune →
//! Join search over fusion choices.
//!
//! Each Einsum is expanded into the full set of single-Einsum loop-tree
//! candidates (storage placements, divisor tilings, loop orders, and every
//! backing-level choice for the shared tensors). The search then folds the
//! cascade front to back: partial mappings are grouped by their open
//! producer interface, dominated ones are pruned with exact
//! (objective, reservation) criteria, and each surviving state is
//! joined with each compatible next-Einsum candidate. Costs merge exactly
//! and reservation profiles consolidate incrementally, so the final pick
//! is the optimum of the whole constructible space, not a heuristic.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use itertools::Itertools;
use rayon::prelude::*;
use thiserror::Error;

use crate::arch::{ArchSpec, LevelId};
use crate::compat::{joinable, key_of_chain, CompatKey, Direction};
use crate::costmodel::{evaluate, CostBreakdown, CostError};
use crate::looptree::{
    check_tree, compute, graft, loop_, render, split_at_backing, storage, FragmentParts, Node,
    TreeError,
};
use crate::pareto::{frontier, CriteriaVector};
use crate::reservation::{
    consolidate, join_delta, max_usage, profile_of, tile_bytes, JoinCase, JoinDelta,
    ReservationError, ReservationProfile,
};
use crate::workload::{EinsumId, RankId, TensorId, TensorRole, Workload};
use crate::Rat;

/// What the mapper minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Energy,
    Latency,
    /// Energy–delay product. Energy and latency are summed over the cascade
    /// first; their product is taken only when a mapping is scored.
    Edp,
}

impl Objective {
    pub fn score(&self, cost: &CostBreakdown, a: &ArchSpec) -> Rat {
        match self {
            Objective::Energy => cost.energy.clone(),
            Objective::Latency => cost.latency_cycles.clone(),
            Objective::Edp => cost.edp(a),
        }
    }
}

/// Mapper knobs. Capacity enforcement is always on: a partial mapping is
/// discarded the moment its folded usage exceeds any level's capacity.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub objective: Objective,
    /// At most this many tiling loops per rank above each memory level.
    pub max_loops_per_rank_per_level: usize,
    /// Explore loop orders within each gap. Capped at 4 ranks; larger
    /// Einsums keep the canonical rank order.
    pub explore_permutations: bool,
    /// Hard cap on candidates per Einsum. Exceeding it is an error, never a
    /// silent truncation.
    pub max_candidates_per_einsum: Option<usize>,
    /// Group states and candidates by interface and only attempt
    /// compatible joins. Turning this off attempts every (state, candidate)
    /// pair; the result is identical, the join counts are not.
    pub skip_incompatible_joins: bool,
    /// Fold finished branches into summary reservations at each join.
    /// Turning this off recomputes every profile from the whole tree and
    /// carries the unfolded history in the pruning vector; the result is
    /// identical, the frontiers grow.
    pub consolidate_reservations: bool,
    /// Re-derive every incremental profile and merged cost from the joined
    /// tree and fail loudly on any mismatch.
    pub verify_incremental_profiles: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            objective: Objective::Energy,
            max_loops_per_rank_per_level: 1,
            explore_permutations: true,
            max_candidates_per_einsum: None,
            skip_incompatible_joins: true,
            consolidate_reservations: true,
            verify_incremental_profiles: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum FfmError {
    #[error("no feasible mapping under the given buffer capacities")]
    NoFeasibleMapping,
    #[error("einsum {einsum}: {count} candidates exceed the enumeration budget {budget}")]
    BudgetExceeded {
        einsum: EinsumId,
        count: usize,
        budget: usize,
    },
    #[error("tensor {tensor} has no storage node in the candidate chain")]
    MissingBacking { tensor: TensorId },
    #[error("incremental {what} diverged from the value recomputed from the joined tree")]
    VerifyMismatch { what: String },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Reservation(#[from] ReservationError),
}

/// One enumerated single-Einsum mapping, annotated with everything a join
/// needs: its interfaces, its exact standalone cost (which is also its
/// exact contribution to any cascade it joins, since fragments never share
/// a traffic channel), and the reservation delta extracted from its
/// consumer-side decomposition.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub einsum: EinsumId,
    pub tree: Arc<Node>,
    /// Interface through which this Einsum reads the upstream intermediate.
    pub consumed: Option<CompatKey>,
    /// Interface through which the downstream Einsum will read our output.
    pub open: Option<CompatKey>,
    pub cost: CostBreakdown,
    /// Fragment pieces around the consumed backing; `Some` iff `consumed`.
    pub parts: Option<FragmentParts>,
    /// Reservation delta of joining this fragment; `Some` iff `consumed`.
    pub delta: Option<JoinDelta>,
    pub label: String,
}

impl Candidate {
    /// Builds a candidate from an explicit single-Einsum chain, reading the
    /// interface keys off the tree. Used for hand-built candidate tables;
    /// [`enumerate_candidates`] produces the same annotations.
    pub fn from_tree(
        w: &Workload,
        a: &ArchSpec,
        einsum: EinsumId,
        tree: Arc<Node>,
        consumed_tensor: Option<TensorId>,
        produced_tensor: Option<TensorId>,
    ) -> Result<Candidate, FfmError> {
        check_tree(&tree, w, a)?;
        let consumed = consumed_tensor
            .map(|t| {
                key_of_chain(&tree, t, Direction::Consumer)
                    .ok_or(FfmError::MissingBacking { tensor: t })
            })
            .transpose()?;
        let open = produced_tensor
            .map(|t| {
                key_of_chain(&tree, t, Direction::Producer)
                    .ok_or(FfmError::MissingBacking { tensor: t })
            })
            .transpose()?;
        finish_candidate(w, a, einsum, tree, consumed, open)?
            .ok_or(FfmError::Reservation(ReservationError::FusionTooShallow))
    }
}

/// Per-join-step search statistics. `elapsed` is wall-clock measurement and
/// is deliberately left out of serialized reports.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub einsum: EinsumId,
    pub candidates: usize,
    pub groups: usize,
    pub frontier_size: usize,
    pub joins_attempted: usize,
    pub joins_skipped: usize,
    pub elapsed: Duration,
}

/// The mapping the search settled on, with enough context to report it.
#[derive(Debug, Clone)]
pub struct MappingResult {
    pub tree: Arc<Node>,
    /// One candidate label per Einsum, in join order.
    pub labels: Vec<String>,
    pub cost: CostBreakdown,
    pub objective: Objective,
    pub objective_value: Rat,
    /// Peak buffer bytes per level, outermost first.
    pub peak_usage: Vec<u64>,
    pub render: String,
    pub steps: Vec<StepStats>,
}

/// A partial mapping: the first `last + 1` Einsums joined into one tree,
/// with the running cost and reservation profile the next join extends.
#[derive(Debug, Clone)]
pub struct Pmapping {
    pub tree: Arc<Node>,
    pub last: EinsumId,
    pub open: Option<CompatKey>,
    pub cost: CostBreakdown,
    pub profile: ReservationProfile,
    pub labels: Vec<String>,
    /// Pre-join profile snapshots, kept only when consolidation is off:
    /// they ride along in the pruning vector so dominance must also cover
    /// the unfolded history, which is exactly what consolidation avoids.
    pub epochs: Vec<Vec<u64>>,
}

// ---------------------------------------------------------------------------
// Enumeration

/// All divisors of `n`, ascending.
fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Ordered tuples `(t_0, …, t_{slots-1})`, each ≥ 1, whose product divides
/// `extent`; the undistributed factor runs as implicit innermost loops.
fn trip_tuples(extent: u64, slots: usize) -> Vec<Vec<u64>> {
    fn rec(rem: u64, slots: usize, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if slots == 0 {
            out.push(cur.clone());
            return;
        }
        for d in divisors(rem) {
            cur.push(d);
            rec(rem / d, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(extent, slots, &mut Vec::new(), &mut out);
    out
}

/// Non-empty level subsets, ascending within each subset. `force_backing`
/// pins level 0 (tensors that live outside the cascade must reside in the
/// backing store); intermediates may back anywhere.
fn level_subsets(levels: usize, force_backing: bool) -> Vec<Vec<LevelId>> {
    (1u32..1 << levels)
        .filter(|m| !force_backing || m & 1 == 1)
        .map(|m| (0..levels).filter(|l| m >> l & 1 == 1).collect())
        .collect()
}

/// One-line candidate description: storage and loop nodes top to bottom.
fn chain_label(tree: &Arc<Node>, w: &Workload, a: &ArchSpec) -> String {
    let mut parts = Vec::new();
    let mut cur = tree;
    loop {
        match &**cur {
            Node::Loop { rank, trip, child } => {
                parts.push(format!("{}/{}", w.ranks[*rank].name, trip));
                cur = child;
            }
            Node::Storage {
                level,
                tensor,
                child,
            } => {
                parts.push(format!(
                    "{}@{}",
                    w.tensors[*tensor].name, a.levels[*level].name
                ));
                cur = child;
            }
            Node::Split { .. } | Node::Compute { .. } => break,
        }
    }
    parts.join(" ")
}

/// Cost + reservation annotations for an assembled chain. Returns `Ok(None)`
/// when the chain fuses deeper than its consumed interface allows (no loop
/// between the two backings), which the reservation algebra cannot
/// represent — such chains are outside the mapping space.
fn finish_candidate(
    w: &Workload,
    a: &ArchSpec,
    einsum: EinsumId,
    tree: Arc<Node>,
    consumed: Option<CompatKey>,
    open: Option<CompatKey>,
) -> Result<Option<Candidate>, FfmError> {
    let (parts, delta) = match &consumed {
        None => (None, None),
        Some(k) => {
            let parts = split_at_backing(&tree, k.tensor, k.backing_level)?;
            let produced = open.as_ref().map(|o| (o.tensor, o.backing_level));
            match join_delta(w, a, k, &parts, &parts.gaps, produced) {
                Ok(d) => (Some(parts), Some(d)),
                Err(e) if e.is_structural() => return Ok(None),
                Err(err) => return Err(err.into()),
            }
        }
    };
    let (cost, _) = evaluate(&tree, w, a)?;
    let label = chain_label(&tree, w, a);
    Ok(Some(Candidate {
        einsum,
        tree,
        consumed,
        open,
        cost,
        parts,
        delta,
        label,
    }))
}

/// The full structurally-valid candidate space for one Einsum: every
/// storage placement per tensor, every backing level for the shared
/// tensors, every divisor tiling (at most `max_loops_per_rank_per_level`
/// loops per rank per level), and — for Einsums of at most four ranks with
/// permutations enabled — every loop order per gap.
///
/// Three structural rules keep every candidate joinable and representable:
/// loops above a shared backing must index the shared tensor; a bounded
/// (capacity-limited) storage node above a shared backing must sit under at
/// least one loop, or it would stay live across the entire cascade; and a
/// bounded consumed backing with no loop above it cannot host a
/// deeper-fused producer, since its tile would likewise pin the whole run.
pub fn enumerate_candidates(
    w: &Workload,
    a: &ArchSpec,
    e: EinsumId,
    cfg: &SearchConfig,
) -> Result<Vec<Candidate>, FfmError> {
    let levels = a.num_levels();
    let blocks = levels - 1;
    let per_level = cfg.max_loops_per_rank_per_level.max(1);
    let slots = blocks * per_level;
    let caps = capacities(a);

    let tensors = w.tensors_of(e);
    let out_t = *tensors.last().expect("einsum has an output");
    let consumed_t = w.shared_tensor(e);
    let produced_t = (w.tensors[out_t].role == TensorRole::Intermediate).then_some(out_t);
    let ranks: Vec<RankId> = w.einsums[e].rank_vars.clone();
    let permute = cfg.explore_permutations && ranks.len() <= 4;

    let placement_opts: Vec<Vec<Vec<LevelId>>> = tensors
        .iter()
        .map(|&t| level_subsets(levels, w.tensors[t].role != TensorRole::Intermediate))
        .collect();

    let mut pre: Vec<(Arc<Node>, Option<CompatKey>, Option<CompatKey>)> = Vec::new();
    for placement in placement_opts.iter().multi_cartesian_product() {
        let place: BTreeMap<TensorId, &Vec<LevelId>> =
            tensors.iter().copied().zip(placement).collect();
        let cb = consumed_t.map(|t| place[&t][0]);
        let pb = produced_t.map(|t| place[&t][0]);

        // Deepest storage level per rank drives the relevancy filter: a
        // loop is only emitted above some node it tiles.
        let deepest: BTreeMap<RankId, LevelId> = ranks
            .iter()
            .map(|&r| {
                let d = tensors
                    .iter()
                    .filter(|&&t| w.tensors[t].ranks.contains(&r))
                    .map(|&t| *place[&t].last().unwrap())
                    .max()
                    .unwrap_or(0);
                (r, d)
            })
            .collect();

        let tuples_per_rank: Vec<Vec<Vec<u64>>> = ranks
            .iter()
            .map(|&r| {
                trip_tuples(w.extent(r), slots)
                    .into_iter()
                    .filter(|tup| {
                        tup.iter()
                            .enumerate()
                            .all(|(s, &t)| t == 1 || deepest[&r] >= s / per_level + 1)
                    })
                    .collect()
            })
            .collect();

        for trips in tuples_per_rank.iter().multi_cartesian_product() {
            let mut block: Vec<Vec<(RankId, u64)>> = vec![Vec::new(); blocks];
            for (ri, tup) in trips.iter().enumerate() {
                for (s, &t) in tup.iter().enumerate() {
                    if t > 1 {
                        block[s / per_level].push((ranks[ri], t));
                    }
                }
            }
            let loops_above = |region: LevelId| region.min(blocks);
            let any_loop_above =
                |region: LevelId| block[..loops_above(region)].iter().any(|b| !b.is_empty());

            // Interface loops must index the shared tensor they tile.
            let anchored = |t: Option<TensorId>, b: Option<LevelId>| match (t, b) {
                (Some(t), Some(bl)) => block[..loops_above(bl)]
                    .iter()
                    .flatten()
                    .all(|&(r, _)| w.tensors[t].ranks.contains(&r)),
                _ => true,
            };
            if !anchored(consumed_t, cb) || !anchored(produced_t, pb) {
                continue;
            }
            // A bounded node above a shared backing needs a loop above it.
            let shared_span = match (cb, pb) {
                (Some(c), _) => Some(c),
                (None, Some(p)) => Some(p),
                (None, None) => None,
            };
            let node_ok = |t: TensorId, l: LevelId| {
                if l == 0
                    || (Some(t) == consumed_t && Some(l) == cb)
                    || (Some(t) == produced_t && Some(l) == pb)
                {
                    return true;
                }
                match shared_span {
                    Some(span) if l <= span => any_loop_above(l),
                    _ => true,
                }
            };
            if !tensors
                .iter()
                .all(|&t| place[&t].iter().all(|&l| node_ok(t, l)))
            {
                continue;
            }
            // A loop-less bounded consumed backing cannot host a deeper
            // producer join.
            if let (Some(c), Some(p)) = (cb, pb) {
                if p > c && c >= 1 && !any_loop_above(c) {
                    continue;
                }
            }

            let orderings: Vec<Vec<Vec<(RankId, u64)>>> = block
                .iter()
                .map(|content| {
                    if permute && content.len() > 1 {
                        content
                            .iter()
                            .cloned()
                            .permutations(content.len())
                            .collect()
                    } else {
                        vec![content.clone()]
                    }
                })
                .collect();

            for chosen in orderings.iter().multi_cartesian_product() {
                let key_loops = |region: LevelId| -> Vec<(RankId, u64)> {
                    chosen[..loops_above(region)]
                        .iter()
                        .flat_map(|b| b.iter().copied())
                        .collect()
                };
                let consumed = consumed_t.map(|t| CompatKey {
                    tensor: t,
                    backing_level: cb.unwrap(),
                    loops: key_loops(cb.unwrap()),
                    direction: Direction::Consumer,
                });
                let open = produced_t.map(|t| CompatKey {
                    tensor: t,
                    backing_level: pb.unwrap(),
                    loops: key_loops(pb.unwrap()),
                    direction: Direction::Producer,
                });

                // Region contents, outermost first: plain residents in
                // tensor order, then the produced anchor, then the consumed
                // anchor innermost so joins split directly under it.
                let mut region: Vec<Vec<TensorId>> = vec![Vec::new(); levels];
                for &t in &tensors {
                    for &l in place[&t] {
                        let anchor = (Some(t) == consumed_t && Some(l) == cb)
                            || (Some(t) == produced_t && Some(l) == pb);
                        if !anchor {
                            region[l].push(t);
                        }
                    }
                }
                for r in &mut region {
                    r.sort_unstable();
                }
                if let (Some(t), Some(l)) = (produced_t, pb) {
                    region[l].push(t);
                }
                if let (Some(t), Some(l)) = (consumed_t, cb) {
                    region[l].push(t);
                }

                let mut node = compute(e);
                for l in (0..levels).rev() {
                    for &t in region[l].iter().rev() {
                        node = storage(l, t, node);
                    }
                    if l >= 1 {
                        for &(r, tr) in chosen[l - 1].iter().rev() {
                            node = loop_(r, tr, node);
                        }
                    }
                }
                pre.push((node, consumed, open));
            }
        }
    }

    let finished: Result<Vec<Option<Candidate>>, FfmError> = pre
        .into_par_iter()
        .map(|(tree, consumed, open)| {
            // A chain that overflows a buffer on its own can never be part
            // of a feasible mapping: joining only adds residents.
            let mu = max_usage(&tree, w, a);
            if mu[1..].iter().zip(&caps).any(|(u, c)| u > c) {
                return Ok(None);
            }
            finish_candidate(w, a, e, tree, consumed, open)
        })
        .collect();
    let out: Vec<Candidate> = finished?.into_iter().flatten().collect();
    if let Some(budget) = cfg.max_candidates_per_einsum {
        if out.len() > budget {
            return Err(FfmError::BudgetExceeded {
                einsum: e,
                count: out.len(),
                budget,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dominance vectors

pub(crate) type Interface = Option<(TensorId, LevelId, Vec<(RankId, u64)>)>;

pub(crate) fn interface_of(k: &Option<CompatKey>) -> Interface {
    k.as_ref().map(CompatKey::interface)
}

fn flatten_criteria(p: &ReservationProfile) -> Vec<u64> {
    (0..p.per_level.len())
        .flat_map(|li| p.criteria(li))
        .collect()
}

/// The reservation entries a candidate contributes at its join. Within one
/// (consumed, open) interface pair all candidates share the same join case
/// and shape, so these vectors align entry by entry and every entry enters
/// the consolidated profile monotonically — entrywise dominance here is
/// dominance in every cascade the candidate could complete.
fn delta_flat(d: &JoinDelta) -> Vec<u64> {
    let mut v = Vec::new();
    for g in &d.ins {
        v.extend(g);
    }
    v.extend(&d.s_old);
    match &d.case {
        JoinCase::Prefix {
            pre,
            post,
            below_peak,
            ..
        } => {
            v.extend(pre);
            v.extend(post);
            v.extend(below_peak);
        }
        JoinCase::Below { rows, tail } => {
            for r in rows {
                v.extend(r);
            }
            v.extend(tail);
        }
        JoinCase::Final { below_peak } => v.extend(below_peak),
    }
    v
}

/// The objective scalars that enter the dominance vector: one summable
/// number per objective under optimization. A single-scalar objective
/// contributes only its own sum — tracking the other scalar would keep
/// states alive that can never win. The energy–delay product is not a sum,
/// so it is carried as the (energy, latency) pair and scored once mappings
/// are complete.
fn objective_scalars(obj: Objective, cost: &CostBreakdown) -> (Rat, Rat) {
    match obj {
        Objective::Energy => (cost.energy.clone(), rat(0)),
        Objective::Latency => (rat(0), cost.latency_cycles.clone()),
        Objective::Edp => (cost.energy.clone(), cost.latency_cycles.clone()),
    }
}

fn candidate_vector(
    w: &Workload,
    a: &ArchSpec,
    obj: Objective,
    c: &Candidate,
) -> Result<CriteriaVector, FfmError> {
    let reservations = match &c.delta {
        Some(d) => delta_flat(d),
        None => flatten_criteria(&profile_of(&c.tree, w, a, c.open.as_ref())?),
    };
    let (energy, latency) = objective_scalars(obj, &c.cost);
    Ok(CriteriaVector {
        energy,
        latency,
        reservations,
    })
}

/// Drops candidates dominated within their (consumed, open) interface pair.
/// Dominated here means: at least as much objective cost and reservation
/// pressure in every slot — such a candidate cannot beat its dominator in
/// any completion of any cascade.
pub fn prune_candidates(
    w: &Workload,
    a: &ArchSpec,
    obj: Objective,
    cands: Vec<Candidate>,
) -> Result<Vec<Candidate>, FfmError> {
    let mut groups: BTreeMap<(Interface, Interface), Vec<Candidate>> = BTreeMap::new();
    for c in cands {
        groups
            .entry((interface_of(&c.consumed), interface_of(&c.open)))
            .or_default()
            .push(c);
    }
    let mut out = Vec::new();
    for (_, members) in groups {
        let items: Result<Vec<(CriteriaVector, Candidate)>, FfmError> = members
            .into_iter()
            .map(|c| Ok((candidate_vector(w, a, obj, &c)?, c)))
            .collect();
        out.extend(frontier(items?).into_iter().map(|(_, c)| c));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The search

pub(crate) fn capacities(a: &ArchSpec) -> Vec<u64> {
    a.levels[1..]
        .iter()
        .map(|l| l.capacity_bytes.unwrap_or(u64::MAX))
        .collect()
}

/// Bytes the open backing tile pins at each bounded level.
fn s_open_vec(w: &Workload, a: &ArchSpec, open: &Option<CompatKey>) -> Vec<u64> {
    let mut v = vec![0; a.num_levels() - 1];
    if let Some(k) = open {
        if k.backing_level > 0 {
            v[k.backing_level - 1] = tile_bytes(w, a, k.tensor, &k.loops);
        }
    }
    v
}

fn feasible(p: &ReservationProfile, s_open: &[u64], caps: &[u64]) -> bool {
    p.total(s_open).iter().zip(caps).all(|(u, c)| u <= c)
}

fn initial_state(
    w: &Workload,
    a: &ArchSpec,
    caps: &[u64],
    c: &Candidate,
) -> Result<Option<Pmapping>, FfmError> {
    debug_assert!(
        c.consumed.is_none(),
        "the cascade is joined front to back; the first einsum consumes nothing"
    );
    let profile = match profile_of(&c.tree, w, a, c.open.as_ref()) {
        Ok(p) => p,
        Err(e) if e.is_structural() => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if !feasible(&profile, &s_open_vec(w, a, &c.open), caps) {
        return Ok(None);
    }
    Ok(Some(Pmapping {
        tree: c.tree.clone(),
        last: c.einsum,
        open: c.open.clone(),
        cost: c.cost.clone(),
        profile,
        labels: vec![c.label.clone()],
        epochs: Vec::new(),
    }))
}

/// Grafts one candidate onto one state. `Ok(None)` means the join is
/// skipped: incompatible interfaces, a fusion deeper than an already-closed
/// branch allows, or a folded usage above capacity.
fn try_join(
    w: &Workload,
    a: &ArchSpec,
    caps: &[u64],
    cfg: &SearchConfig,
    left: &Pmapping,
    cand: &Candidate,
) -> Result<Option<Pmapping>, FfmError> {
    if !joinable(&left.open, &cand.consumed) || cand.consumed.is_none() {
        return Ok(None);
    }
    let key = cand.consumed.as_ref().unwrap();
    let parts = cand.parts.as_ref().expect("consumed candidates carry parts");
    let delta0 = cand.delta.as_ref().expect("consumed candidates carry a delta");

    // Fusing below a branch that already closed cannot be represented: the
    // closed branch would sit between the new backing and its loop.
    if let JoinCase::Prefix { k, .. } = &delta0.case {
        if left.profile.split_at[*k] {
            return Ok(None);
        }
    }

    let (tree, inserted) = graft(&left.tree, key.tensor, key.backing_level, &key.loops, parts)?;
    // Chain workloads never lose gap residents to graft's on-path dedupe,
    // so the precomputed delta applies; recompute it if a workload ever
    // shares tensors across non-adjacent Einsums.
    let produced = cand.open.as_ref().map(|o| (o.tensor, o.backing_level));
    let recomputed;
    let delta = if inserted == parts.gaps {
        delta0
    } else {
        match join_delta(w, a, key, parts, &inserted, produced) {
            Ok(d) => {
                recomputed = d;
                &recomputed
            }
            Err(e) if e.is_structural() => return Ok(None),
            Err(err) => return Err(err.into()),
        }
    };

    let profile = if cfg.consolidate_reservations {
        match consolidate(&left.profile, delta) {
            Ok(p) => p,
            Err(e) if e.is_structural() => return Ok(None),
            Err(err) => return Err(err.into()),
        }
    } else {
        match profile_of(&tree, w, a, cand.open.as_ref()) {
            Ok(p) => p,
            Err(e) if e.is_structural() => return Ok(None),
            Err(err) => return Err(err.into()),
        }
    };
    if cfg.verify_incremental_profiles {
        match profile_of(&tree, w, a, cand.open.as_ref()) {
            Ok(fresh) if fresh == profile => {}
            fresh => {
                return Err(FfmError::VerifyMismatch {
                    what: format!(
                        "reservation profile after joining einsum {} ({fresh:?} rebuilt)",
                        cand.einsum
                    ),
                })
            }
        }
    }

    let cost = left.cost.merge(&cand.cost);
    if cfg.verify_incremental_profiles {
        let (full, _) = evaluate(&tree, w, a)?;
        if full != cost {
            return Err(FfmError::VerifyMismatch {
                what: format!("merged cost after joining einsum {}", cand.einsum),
            });
        }
    }

    if !feasible(&profile, &s_open_vec(w, a, &cand.open), caps) {
        return Ok(None);
    }

    let mut epochs = left.epochs.clone();
    if !cfg.consolidate_reservations {
        epochs.push(flatten_criteria(&left.profile));
    }
    let mut labels = left.labels.clone();
    labels.push(cand.label.clone());
    Ok(Some(Pmapping {
        tree,
        last: cand.einsum,
        open: cand.open.clone(),
        cost,
        profile,
        labels,
        epochs,
    }))
}

/// Groups states by open interface and keeps each group's Pareto frontier
/// over (objective, reservation criteria). States in one group share
/// the spine, so their criteria align; when consolidation is off, the
/// ragged per-epoch histories are zero-padded to the group's widths, which
/// only ever weakens dominance and therefore never prunes a state the
/// consolidated search would keep.
fn prune_states(states: Vec<Pmapping>, cfg: &SearchConfig) -> (Vec<Pmapping>, usize) {
    let mut groups: BTreeMap<Interface, Vec<Pmapping>> = BTreeMap::new();
    for s in states {
        groups.entry(interface_of(&s.open)).or_default().push(s);
    }
    let ngroups = groups.len();
    let mut kept = Vec::new();
    for (_, members) in groups {
        let depth = members.iter().map(|m| m.epochs.len()).max().unwrap_or(0);
        let widths: Vec<usize> = (0..depth)
            .map(|j| {
                members
                    .iter()
                    .map(|m| m.epochs.get(j).map_or(0, Vec::len))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let items: Vec<(CriteriaVector, Pmapping)> = members
            .into_iter()
            .map(|m| {
                let mut res = Vec::new();
                for (j, &w_) in widths.iter().enumerate() {
                    let ep = m.epochs.get(j).map_or(&[] as &[u64], Vec::as_slice);
                    res.extend_from_slice(ep);
                    res.extend(std::iter::repeat(0).take(w_ - ep.len()));
                }
                res.extend(flatten_criteria(&m.profile));
                let (energy, latency) = objective_scalars(cfg.objective, &m.cost);
                (
                    CriteriaVector {
                        energy,
                        latency,
                        reservations: res,
                    },
                    m,
                )
            })
            .collect();
        kept.extend(frontier(items).into_iter().map(|(_, m)| m));
    }
    (kept, ngroups)
}

/// Runs the Group → Prune → Join search over pre-built candidate pools,
/// one pool per Einsum in cascade order.
pub fn map_candidates(
    w: &Workload,
    a: &ArchSpec,
    cfg: &SearchConfig,
    pools: &[Vec<Candidate>],
) -> Result<MappingResult, FfmError> {
    if pools.is_empty() || pools.iter().any(Vec::is_empty) {
        return Err(FfmError::NoFeasibleMapping);
    }
    let caps = capacities(a);
    let mut steps: Vec<StepStats> = Vec::new();

    let t0 = Instant::now();
    let first: Result<Vec<Option<Pmapping>>, FfmError> = pools[0]
        .par_iter()
        .map(|c| initial_state(w, a, &caps, c))
        .collect();
    let seeded: Vec<Pmapping> = first?.into_iter().flatten().collect();
    if seeded.is_empty() {
        return Err(FfmError::NoFeasibleMapping);
    }
    let (mut states, groups) = prune_states(seeded, cfg);
    steps.push(StepStats {
        einsum: pools[0][0].einsum,
        candidates: pools[0].len(),
        groups,
        frontier_size: states.len(),
        joins_attempted: 0,
        joins_skipped: 0,
        elapsed: t0.elapsed(),
    });

    for pool in &pools[1..] {
        let t = Instant::now();
        let pairs: Vec<(&Pmapping, &Candidate)> = if cfg.skip_incompatible_joins {
            let mut by_consumed: BTreeMap<Interface, Vec<&Candidate>> = BTreeMap::new();
            for c in pool {
                by_consumed
                    .entry(interface_of(&c.consumed))
                    .or_default()
                    .push(c);
            }
            states
                .iter()
                .flat_map(|s| {
                    by_consumed
                        .get(&interface_of(&s.open))
                        .into_iter()
                        .flatten()
                        .map(move |&c| (s, c))
                })
                .collect()
        } else {
            states
                .iter()
                .flat_map(|s| pool.iter().map(move |c| (s, c)))
                .collect()
        };
        let joins_attempted = pairs.len();
        let joined: Result<Vec<Option<Pmapping>>, FfmError> = pairs
            .into_par_iter()
            .map(|(s, c)| try_join(w, a, &caps, cfg, s, c))
            .collect();
        let mut next: Vec<Pmapping> = Vec::new();
        let mut joins_skipped = 0;
        for r in joined? {
            match r {
                Some(p) => next.push(p),
                None => joins_skipped += 1,
            }
        }
        if next.is_empty() {
            return Err(FfmError::NoFeasibleMapping);
        }
        let (kept, groups) = prune_states(next, cfg);
        states = kept;
        steps.push(StepStats {
            einsum: pool[0].einsum,
            candidates: pool.len(),
            groups,
            frontier_size: states.len(),
            joins_attempted,
            joins_skipped,
            elapsed: t.elapsed(),
        });
    }

    // Deterministic final pick: best objective, ties broken by the
    // lexicographically smallest rendering.
    let mut best: Option<(Rat, String, &Pmapping)> = None;
    for s in &states {
        let score = cfg.objective.score(&s.cost, a);
        let text = render(&s.tree, w, a);
        if best
            .as_ref()
            .map_or(true, |(bs, bt, _)| (&score, &text) < (bs, bt))
        {
            best = Some((score, text, s));
        }
    }
    let (objective_value, rendering, s) = best.expect("states are nonempty");
    Ok(MappingResult {
        tree: s.tree.clone(),
        labels: s.labels.clone(),
        cost: s.cost.clone(),
        objective: cfg.objective,
        objective_value,
        peak_usage: max_usage(&s.tree, w, a),
        render: rendering,
        steps,
    })
}

/// Enumerates, prunes, and maps the whole cascade: the returned mapping
/// minimizes the configured objective over every constructible combination
/// of the enumerated per-Einsum candidates.
pub fn map(w: &Workload, a: &ArchSpec, cfg: &SearchConfig) -> Result<MappingResult, FfmError> {
    let mut pools = Vec::with_capacity(w.einsums.len());
    for e in 0..w.einsums.len() {
        pools.push(prune_candidates(w, a, enumerate_candidates(w, a, e, cfg)?)?);
    }
    map_candidates(w, a, cfg, &pools)
}

/// [`map`] with optimizations disabled for measurement: attempting every
/// join regardless of compatibility, or recomputing reservations from
/// scratch instead of consolidating. The mapping itself never changes —
/// only the per-step statistics do.
pub fn map_ablated(
    w: &Workload,
    a: &ArchSpec,
    cfg: &SearchConfig,
    disable_skip: bool,
    disable_consolidation: bool,
) -> Result<MappingResult, FfmError> {
    let mut cfg = cfg.clone();
    cfg.skip_incompatible_joins &= !disable_skip;
    cfg.consolidate_reservations &= !disable_consolidation;
    map(w, a, &cfg)
}
