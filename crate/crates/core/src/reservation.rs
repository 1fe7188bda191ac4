//! Memory-reservation accounting for partial mappings.
//!
//! A fused mapping holds buffers alive across Einsum boundaries, so a
//! partial mapping cannot be capacity-checked in isolation: later joins
//! insert storage nodes above loops that already exist. The
//! [`ReservationProfile`] captures exactly what future joins can still
//! affect — per bounded memory level, one usage entry per spine gap — and
//! [`consolidate`] updates it at join time without re-walking the tree.
//! [`profile_of`] builds the same profile fresh from a tree and serves as
//! the oracle.
//!
//! Spine terminology: the path from the root to the open backing node
//! passes the key loops `1..=n`; "gap j" is the stretch between loop j and
//! loop j+1 (gap 0 sits above loop 1, gap n directly above the backing).
//! `live[j]` sums the spine-resident buffers of gap j, `closed[j]` is the
//! peak of the finished split branch hanging off gap j (zero when none),
//! and `closed[n]` is the peak strictly below the open backing. A node
//! that sits below a gap's split is bucketed into the next gap: it is not
//! an ancestor of the split's finished branches.

use std::sync::Arc;

use thiserror::Error;

use crate::arch::{ArchSpec, LevelId};
use crate::compat::CompatKey;
use crate::looptree::{FragmentParts, Node, TreeError};
use crate::workload::{RankId, TensorId, Workload};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReservationError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("a split separates the backing node from its nearest outer loop")]
    SplitAboveBacking,
    #[error("bounded-level storage above the first spine loop (level {0})")]
    BoundedAboveFirstLoop(LevelId),
    #[error("gap {0} holds more than one split")]
    MultipleSplitsInGap(usize),
    #[error("usage timeline exceeds {0} events")]
    TimelineTooLong(usize),
    #[error("the produced backing needs a loop between it and the enclosing split")]
    FusionTooShallow,
    #[error("produced backing node not found in the joined fragment")]
    ProducedNotFound,
}

impl ReservationError {
    /// `true` for the verdicts that place a tree outside the representable
    /// space — the membership rule every search shares. Anything else
    /// signals API misuse and should propagate as a fault.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            ReservationError::SplitAboveBacking
                | ReservationError::MultipleSplitsInGap(_)
                | ReservationError::BoundedAboveFirstLoop(_)
                | ReservationError::FusionTooShallow
        )
    }
}

/// Tile footprint of one buffered tensor under the given loops.
pub fn tile_bytes(
    w: &Workload,
    a: &ArchSpec,
    tensor: TensorId,
    loops_above: &[(RankId, u64)],
) -> u64 {
    crate::looptree::residual_datums(w, tensor, loops_above) * a.datum_bytes
}

/// Peak concurrent buffer bytes per level (indexed by level). At any
/// instant the live buffers are exactly the storage nodes on the path from
/// the root to the executing compute leaf, so the peak is the maximum
/// ancestor sum over leaves; split branches run sequentially and do not
/// add up.
pub fn max_usage(tree: &Arc<Node>, w: &Workload, a: &ArchSpec) -> Vec<u64> {
    max_usage_under(tree, w, a, &[])
}

/// [`max_usage`] of a subtree that sits under `above` in the full mapping;
/// the outer loops shrink the tiles of every storage node inside.
pub fn max_usage_under(
    tree: &Arc<Node>,
    w: &Workload,
    a: &ArchSpec,
    above: &[(RankId, u64)],
) -> Vec<u64> {
    fn walk(
        node: &Arc<Node>,
        stack: &mut Vec<(RankId, u64)>,
        w: &Workload,
        a: &ArchSpec,
    ) -> Vec<u64> {
        match &**node {
            Node::Loop { rank, trip, child } => {
                stack.push((*rank, *trip));
                let r = walk(child, stack, w, a);
                stack.pop();
                r
            }
            Node::Storage {
                level,
                tensor,
                child,
            } => {
                let mut r = walk(child, stack, w, a);
                r[*level] += tile_bytes(w, a, *tensor, stack);
                r
            }
            Node::Split { branches } => {
                let mut r = vec![0; a.num_levels()];
                for b in branches {
                    let rb = walk(b, stack, w, a);
                    for (x, y) in r.iter_mut().zip(rb) {
                        *x = (*x).max(y);
                    }
                }
                r
            }
            Node::Compute { .. } => vec![0; a.num_levels()],
        }
    }
    walk(tree, &mut above.to_vec(), w, a)
}

/// One allocation or release in execution order, with the usage per level
/// after the event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageEvent {
    pub alloc: bool,
    pub level: LevelId,
    pub tensor: TensorId,
    pub bytes: u64,
    pub usage: Vec<u64>,
}

/// Replays the mapping allocation by allocation, loop iterations included.
/// Independent of [`max_usage`]'s ancestor-sum shortcut; used to check it.
pub fn usage_events(
    tree: &Arc<Node>,
    w: &Workload,
    a: &ArchSpec,
    cap: usize,
) -> Result<Vec<UsageEvent>, ReservationError> {
    fn walk(
        node: &Arc<Node>,
        stack: &mut Vec<(RankId, u64)>,
        current: &mut Vec<u64>,
        out: &mut Vec<UsageEvent>,
        cap: usize,
        w: &Workload,
        a: &ArchSpec,
    ) -> Result<(), ReservationError> {
        match &**node {
            Node::Loop { rank, trip, child } => {
                stack.push((*rank, *trip));
                for _ in 0..*trip {
                    walk(child, stack, current, out, cap, w, a)?;
                }
                stack.pop();
            }
            Node::Storage {
                level,
                tensor,
                child,
            } => {
                let bytes = tile_bytes(w, a, *tensor, stack);
                for alloc in [true, false] {
                    if alloc {
                        current[*level] += bytes;
                    } else {
                        current[*level] -= bytes;
                    }
                    if out.len() >= cap {
                        return Err(ReservationError::TimelineTooLong(cap));
                    }
                    out.push(UsageEvent {
                        alloc,
                        level: *level,
                        tensor: *tensor,
                        bytes,
                        usage: current.clone(),
                    });
                    if alloc {
                        walk(child, stack, current, out, cap, w, a)?;
                    }
                }
            }
            Node::Split { branches } => {
                for b in branches {
                    walk(b, stack, current, out, cap, w, a)?;
                }
            }
            Node::Compute { .. } => {}
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(
        tree,
        &mut Vec::new(),
        &mut vec![0; a.num_levels()],
        &mut out,
        cap,
        w,
        a,
    )?;
    Ok(out)
}

/// Peak usage per level over a timeline.
pub fn peak_of_events(events: &[UsageEvent], num_levels: usize) -> Vec<u64> {
    let mut peak = vec![0; num_levels];
    for ev in events {
        for (p, u) in peak.iter_mut().zip(&ev.usage) {
            *p = (*p).max(*u);
        }
    }
    peak
}

/// Per-level reservation entries of one partial mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelProfile {
    pub level: LevelId,
    /// `closed[j]`: peak of the finished branch at gap j; `closed[n]` is
    /// the peak strictly below the open backing node.
    pub closed: Vec<u64>,
    /// `live[j]`: spine-resident bytes of gap j. `live[0]` is structurally
    /// zero at bounded levels.
    pub live: Vec<u64>,
}

/// Reservation state of a partial mapping with `n` key loops. `split_at[j]`
/// records whether gap j carries a finished split; it is structural
/// metadata for bucketing, not a criteria entry, and `split_at[n]` is
/// always false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReservationProfile {
    pub n: usize,
    pub split_at: Vec<bool>,
    /// One entry per bounded level, ascending (level 1 first).
    pub per_level: Vec<LevelProfile>,
}

impl ReservationProfile {
    /// A finished mapping: everything folded into `closed[0]`.
    pub fn complete(peaks_per_level: &[u64]) -> Self {
        ReservationProfile {
            n: 0,
            split_at: vec![false],
            per_level: peaks_per_level
                .iter()
                .enumerate()
                .map(|(li, &p)| LevelProfile {
                    level: li + 1,
                    closed: vec![p],
                    live: vec![0],
                })
                .collect(),
        }
    }

    /// Peak usage at bounded-level index `li` (level `li + 1`) if the
    /// mapping were finished as-is, with the open backing tile occupying
    /// `s_open` bytes at that level.
    pub fn fold(&self, li: usize, s_open: u64) -> u64 {
        let lp = &self.per_level[li];
        let mut u = lp.live[self.n] + s_open + lp.closed[self.n];
        for j in (0..self.n).rev() {
            u = lp.live[j] + lp.closed[j].max(u);
        }
        u
    }

    /// [`fold`](Self::fold) across all bounded levels; `s_open[li]` is the
    /// open backing tile size, nonzero at most at its own level.
    pub fn total(&self, s_open: &[u64]) -> Vec<u64> {
        (0..self.per_level.len())
            .map(|li| self.fold(li, s_open[li]))
            .collect()
    }

    /// The dominance entries for one level: `closed[0..=n]` then
    /// `live[1..=n]` — exactly 2n+1 values. `live[0]` is omitted because it
    /// is structurally zero, and the split flags are omitted because two
    /// numerically equal profiles fold identically regardless of flags.
    pub fn criteria(&self, li: usize) -> Vec<u64> {
        let lp = &self.per_level[li];
        let mut v = lp.closed.clone();
        v.extend_from_slice(&lp.live[1..]);
        v
    }

    fn check(&self) {
        debug_assert_eq!(self.split_at.len(), self.n + 1);
        debug_assert!(!self.split_at[self.n]);
        for lp in &self.per_level {
            debug_assert_eq!(lp.closed.len(), self.n + 1);
            debug_assert_eq!(lp.live.len(), self.n + 1);
            debug_assert_eq!(lp.live[0], 0);
        }
    }
}

/// Builds the profile of `tree` directly: walk the spine to the open
/// backing, size the gap residents, and take [`max_usage`] of everything
/// hanging off it. `open` is `None` for a finished mapping.
pub fn profile_of(
    tree: &Arc<Node>,
    w: &Workload,
    a: &ArchSpec,
    open: Option<&CompatKey>,
) -> Result<ReservationProfile, ReservationError> {
    let bounded = a.num_levels() - 1;
    let key = match open {
        None => {
            let mu = max_usage(tree, w, a);
            return Ok(ReservationProfile::complete(&mu[1..]));
        }
        Some(k) => k,
    };
    let path = crate::looptree::find_backing(tree, key.tensor, key.backing_level, &key.loops)?;
    let n = key.loops.len();
    let mut live = vec![vec![0u64; bounded]; n + 1];
    let mut closed = vec![vec![0u64; bounded]; n + 1];
    let mut split_at = vec![false; n + 1];

    let mut cur = tree;
    let mut gap = 0usize;
    let mut after_split = false;
    for (depth, &step) in path.iter().enumerate() {
        let _ = depth;
        match &**cur {
            Node::Loop { child, .. } => {
                gap += 1;
                after_split = false;
                cur = child;
            }
            Node::Storage {
                level,
                tensor,
                child,
            } => {
                if *level > 0 {
                    // Residents directly under a split belong to the next
                    // bucket: the other branch runs without them.
                    let bucket = gap + after_split as usize;
                    if bucket == 0 {
                        return Err(ReservationError::BoundedAboveFirstLoop(*level));
                    }
                    if bucket > n {
                        return Err(ReservationError::SplitAboveBacking);
                    }
                    live[bucket][*level - 1] +=
                        tile_bytes(w, a, *tensor, &key.loops[..gap]);
                }
                cur = child;
            }
            Node::Split { branches } => {
                if split_at[gap] {
                    return Err(ReservationError::MultipleSplitsInGap(gap));
                }
                split_at[gap] = true;
                after_split = true;
                for (i, b) in branches.iter().enumerate() {
                    if i == step {
                        continue;
                    }
                    let mu = max_usage_under(b, w, a, &key.loops[..gap]);
                    for li in 0..bounded {
                        closed[gap][li] = closed[gap][li].max(mu[li + 1]);
                    }
                }
                cur = &branches[step];
            }
            Node::Compute { .. } => unreachable!("path ends at the backing node"),
        }
    }
    if after_split {
        return Err(ReservationError::SplitAboveBacking);
    }
    // at the backing node: everything below it is the tail
    let tail = match &**cur {
        Node::Storage { child, .. } => max_usage_under(child, w, a, &key.loops),
        _ => unreachable!("find_backing returns a storage node"),
    };
    for li in 0..bounded {
        closed[n][li] = tail[li + 1];
    }

    let prof = ReservationProfile {
        n,
        split_at,
        per_level: (0..bounded)
            .map(|li| LevelProfile {
                level: li + 1,
                closed: closed.iter().map(|c| c[li]).collect(),
                live: live.iter().map(|l| l[li]).collect(),
            })
            .collect(),
    };
    prof.check();
    Ok(prof)
}

/// How a join reshapes the spine.
#[derive(Debug, Clone)]
pub enum JoinCase {
    /// The produced backing landed in spine gap `k`; `pre`/`post` are the
    /// inserted gap-k bytes above/below it and `below_peak` the peak of the
    /// consumer's subtree grafted under the old backing.
    Prefix {
        k: usize,
        pre: Vec<u64>,
        post: Vec<u64>,
        below_peak: Vec<u64>,
    },
    /// The produced backing sits below the old one, under `rows.len() ≥ 1`
    /// fresh loops; `rows[g]` are the new spine residents of each new gap
    /// and `tail` the peak below the produced backing.
    Below { rows: Vec<Vec<u64>>, tail: Vec<u64> },
    /// The produced tensor stays unbuffered (workload output): fold to a
    /// finished profile.
    Final { below_peak: Vec<u64> },
}

/// The per-level byte deltas a join contributes, extracted from the
/// consumer fragment before consolidation.
#[derive(Debug, Clone)]
pub struct JoinDelta {
    /// Inserted storage bytes per spine gap `0..=n` per bounded level,
    /// excluding the produced backing node.
    pub ins: Vec<Vec<u64>>,
    /// Old open backing tile bytes (nonzero at most at its level).
    pub s_old: Vec<u64>,
    pub case: JoinCase,
}

/// `live` after insertion: a gap-j insert lands directly above loop j+1,
/// which is below gap j's split when one exists, so it buckets into gap
/// j+1's residents.
fn merged_live(old: &ReservationProfile, ins: &[Vec<u64>], li: usize) -> Vec<u64> {
    let lp = &old.per_level[li];
    (0..=old.n)
        .map(|j| {
            let mut v = lp.live[j];
            if !old.split_at[j] {
                v += ins[j][li];
            }
            if j > 0 && old.split_at[j - 1] {
                v += ins[j - 1][li];
            }
            v
        })
        .collect()
}

/// Incremental profile update for one join. Never touches the joined tree;
/// [`profile_of`] recomputed on it must agree exactly.
pub fn consolidate(
    old: &ReservationProfile,
    d: &JoinDelta,
) -> Result<ReservationProfile, ReservationError> {
    old.check();
    let n = old.n;
    let bounded = old.per_level.len();
    debug_assert_eq!(d.ins.len(), n + 1);

    /// Folds gaps `stop..=n` plus the old tail into one peak, with the
    /// consumer's `below_peak` running as the second branch under the old
    /// backing.
    fn fold_tail(
        old: &ReservationProfile,
        mlive: &[u64],
        li: usize,
        s_old: u64,
        below_peak: u64,
        stop: usize,
    ) -> u64 {
        let lp = &old.per_level[li];
        let n = old.n;
        let mut u = s_old + lp.closed[n].max(below_peak);
        if stop <= n {
            u += mlive[n];
            for j in (stop..n).rev() {
                u = mlive[j] + lp.closed[j].max(u);
            }
        }
        u
    }

    let prof = match &d.case {
        JoinCase::Prefix {
            k,
            pre,
            post,
            below_peak,
        } => {
            let k = *k;
            if old.split_at[k] {
                return Err(ReservationError::FusionTooShallow);
            }
            let per_level = (0..bounded)
                .map(|li| {
                    let lp = &old.per_level[li];
                    debug_assert!(k == n || lp.closed[k] == 0);
                    let mlive = merged_live(old, &d.ins, li);
                    let tail =
                        post[li] + fold_tail(old, &mlive, li, d.s_old[li], below_peak[li], k + 1);
                    let mut live: Vec<u64> = mlive[..=k].to_vec();
                    live[k] += pre[li];
                    let mut closed: Vec<u64> = lp.closed[..k].to_vec();
                    closed.push(tail);
                    LevelProfile {
                        level: li + 1,
                        closed,
                        live,
                    }
                })
                .collect();
            let mut split_at = old.split_at[..k].to_vec();
            split_at.push(false);
            ReservationProfile {
                n: k,
                split_at,
                per_level,
            }
        }
        JoinCase::Below { rows, tail } => {
            let m = rows.len();
            if m == 0 {
                return Err(ReservationError::FusionTooShallow);
            }
            let per_level = (0..bounded)
                .map(|li| {
                    let lp = &old.per_level[li];
                    let mut live = merged_live(old, &d.ins, li);
                    live[n] += d.s_old[li];
                    live.extend(rows.iter().map(|r| r[li]));
                    let mut closed = lp.closed.clone();
                    closed.extend(std::iter::repeat(0).take(m - 1));
                    closed.push(tail[li]);
                    LevelProfile {
                        level: li + 1,
                        closed,
                        live,
                    }
                })
                .collect();
            let mut split_at = old.split_at[..n].to_vec();
            split_at.push(true);
            split_at.extend(std::iter::repeat(false).take(m));
            ReservationProfile {
                n: n + m,
                split_at,
                per_level,
            }
        }
        JoinCase::Final { below_peak } => {
            let peaks: Vec<u64> = (0..bounded)
                .map(|li| {
                    let lp = &old.per_level[li];
                    let mlive = merged_live(old, &d.ins, li);
                    let mut u = fold_tail(old, &mlive, li, d.s_old[li], below_peak[li], 1);
                    u = mlive[0] + lp.closed[0].max(u);
                    u
                })
                .collect();
            ReservationProfile::complete(&peaks)
        }
    };
    // Nothing bounded may stay resident above the first spine loop; a join
    // that would need it is outside the representable space, exactly like
    // the rebuilt profile's verdict.
    for lp in &prof.per_level {
        if lp.live[0] != 0 {
            return Err(ReservationError::BoundedAboveFirstLoop(lp.level));
        }
    }
    prof.check();
    Ok(prof)
}

/// Extracts the [`JoinDelta`] for joining a consumer fragment (already
/// decomposed into `parts` and grafted with `inserted` surviving the
/// on-path dedupe) onto the open key. `produced` names the consumer's own
/// backing choice, `None` when its output stays unbuffered.
pub fn join_delta(
    w: &Workload,
    a: &ArchSpec,
    key: &CompatKey,
    parts: &FragmentParts,
    inserted: &[Vec<(LevelId, TensorId)>],
    produced: Option<(TensorId, LevelId)>,
) -> Result<JoinDelta, ReservationError> {
    let bounded = a.num_levels() - 1;
    let n = key.loops.len();
    debug_assert_eq!(inserted.len(), n + 1);

    let mut s_old = vec![0u64; bounded];
    if key.backing_level > 0 {
        s_old[key.backing_level - 1] = tile_bytes(w, a, key.tensor, &key.loops);
    }

    let size_at = |t: TensorId, gap: usize| tile_bytes(w, a, t, &key.loops[..gap]);
    let mut ins = vec![vec![0u64; bounded]; n + 1];
    let mut found: Option<(usize, usize)> = None; // (gap, position)
    for (g, nodes) in inserted.iter().enumerate() {
        for (p, &(l, t)) in nodes.iter().enumerate() {
            if produced == Some((t, l)) {
                found = Some((g, p));
                continue;
            }
            if l > 0 {
                ins[g][l - 1] += size_at(t, g);
            }
        }
    }

    let case = match (produced, found) {
        (None, _) => JoinCase::Final {
            below_peak: max_usage_under(&parts.below, w, a, &key.loops)[1..].to_vec(),
        },
        (Some((pt, pl)), Some((k, pos))) => {
            // gap-k bytes split around the produced backing; pull them back
            // out of the flat insert accounting
            let mut pre = vec![0u64; bounded];
            let mut post = vec![0u64; bounded];
            for (p, &(l, t)) in inserted[k].iter().enumerate() {
                if (t, l) == (pt, pl) {
                    continue;
                }
                if l > 0 {
                    let s = size_at(t, k);
                    ins[k][l - 1] -= s;
                    if p < pos {
                        pre[l - 1] += s;
                    } else {
                        post[l - 1] += s;
                    }
                }
            }
            JoinCase::Prefix {
                k,
                pre,
                post,
                below_peak: max_usage_under(&parts.below, w, a, &key.loops)[1..].to_vec(),
            }
        }
        (Some((pt, pl)), None) => {
            // the produced backing sits inside the consumer's below part:
            // walk its chain collecting per-gap resident runs until it
            let mut rows: Vec<Vec<u64>> = vec![vec![0u64; bounded]];
            let mut mu: Vec<(RankId, u64)> = Vec::new();
            let mut cur = &parts.below;
            let tail = loop {
                match &**cur {
                    Node::Loop { rank, trip, child } => {
                        mu.push((*rank, *trip));
                        rows.push(vec![0u64; bounded]);
                        cur = child;
                    }
                    Node::Storage {
                        level,
                        tensor,
                        child,
                    } => {
                        if (*tensor, *level) == (pt, pl) {
                            let mut loops = key.loops.clone();
                            loops.extend_from_slice(&mu);
                            break max_usage_under(child, w, a, &loops)[1..].to_vec();
                        }
                        if *level > 0 {
                            let mut loops = key.loops.clone();
                            loops.extend_from_slice(&mu);
                            rows.last_mut().unwrap()[*level - 1] +=
                                tile_bytes(w, a, *tensor, &loops);
                        }
                        cur = child;
                    }
                    _ => return Err(ReservationError::ProducedNotFound),
                }
            };
            if mu.is_empty() {
                return Err(ReservationError::FusionTooShallow);
            }
            // rows[0] (above the first new loop) buckets into the first new
            // gap: those nodes sit below the split the join creates
            let bt = rows.remove(0);
            for (x, y) in rows[0].iter_mut().zip(bt) {
                *x += y;
            }
            JoinCase::Below { rows, tail }
        }
    };

    Ok(JoinDelta { ins, s_old, case })
}
