//! Dominance pruning over cost-and-reservation vectors.
//!
//! Partial mappings in the same compatibility group are comparable: lower
//! energy, lower latency, and lower reservation entries are each never
//! worse for any completion, so a mapping weakly dominated by another can
//! be dropped without losing the optimum. Reservation entries compare
//! slot-by-slot, which is meaningful only within a group — members share
//! the open key and therefore the slot layout.

use crate::Rat;

/// One prunable point: exact cost scalars plus the flattened reservation
/// entries of every bounded level (2n+1 values per level for n key loops).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CriteriaVector {
    pub energy: Rat,
    pub latency: Rat,
    pub reservations: Vec<u64>,
}

impl CriteriaVector {
    /// Weak dominance: no component worse. Equal vectors dominate each
    /// other; `frontier` keeps the first.
    pub fn dominates(&self, other: &CriteriaVector) -> bool {
        debug_assert_eq!(self.reservations.len(), other.reservations.len());
        self.energy <= other.energy
            && self.latency <= other.latency
            && self
                .reservations
                .iter()
                .zip(&other.reservations)
                .all(|(a, b)| a <= b)
    }

    pub fn strictly_dominates(&self, other: &CriteriaVector) -> bool {
        self.dominates(other) && self != other
    }
}

/// Keeps one representative of every minimal vector. Deterministic: items
/// are sorted by vector (stable, so equal vectors keep their input order)
/// and scanned front to back.
pub fn frontier<T>(mut items: Vec<(CriteriaVector, T)>) -> Vec<(CriteriaVector, T)> {
    items.sort_by(|a, b| a.0.cmp(&b.0));
    let mut kept: Vec<(CriteriaVector, T)> = Vec::new();
    for (v, t) in items {
        if kept.iter().all(|(k, _)| !k.dominates(&v)) {
            kept.push((v, t));
        }
    }
    kept
}

/// All-pairs reference filter: the distinct vectors with no strict
/// dominator anywhere in the input.
pub fn minimal_vectors(items: &[CriteriaVector]) -> Vec<CriteriaVector> {
    let mut out: Vec<CriteriaVector> = items
        .iter()
        .filter(|v| !items.iter().any(|u| u.strictly_dominates(v)))
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rat;
    use proptest::prelude::*;

    fn cv(e: u64, l: u64, res: &[u64]) -> CriteriaVector {
        CriteriaVector {
            energy: rat(e),
            latency: rat(l),
            reservations: res.to_vec(),
        }
    }

    #[test]
    fn incomparable_points_both_survive() {
        let f = frontier(vec![(cv(1, 5, &[2]), "a"), (cv(5, 1, &[2]), "b"), (cv(5, 5, &[3]), "c")]);
        let names: Vec<_> = f.iter().map(|(_, n)| *n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn duplicates_keep_one_representative() {
        let f = frontier(vec![(cv(1, 1, &[1]), 0), (cv(1, 1, &[1]), 1)]);
        assert_eq!(f.len(), 1);
    }

    fn arb_points() -> impl Strategy<Value = Vec<CriteriaVector>> {
        (0usize..4).prop_flat_map(|len| {
            prop::collection::vec(
                (0u64..5, 0u64..5, prop::collection::vec(0u64..5, len)),
                1..40,
            )
            .prop_map(|items| {
                items
                    .into_iter()
                    .map(|(e, l, r)| cv(e, l, &r))
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn frontier_matches_allpairs_filter(points in arb_points()) {
            let tagged: Vec<_> = points.iter().cloned().enumerate()
                .map(|(i, v)| (v, i)).collect();
            let f = frontier(tagged);
            let mut got: Vec<_> = f.iter().map(|(v, _)| v.clone()).collect();
            got.sort();
            prop_assert_eq!(got, minimal_vectors(&points));
        }

        #[test]
        fn frontier_members_are_mutually_incomparable(points in arb_points()) {
            let tagged: Vec<_> = points.into_iter().enumerate()
                .map(|(i, v)| (v, i)).collect();
            let f = frontier(tagged);
            for (i, (a, _)) in f.iter().enumerate() {
                for (b, _) in f.iter().skip(i + 1) {
                    prop_assert!(!a.dominates(b) && !b.dominates(a));
                }
            }
        }

        #[test]
        fn every_point_is_covered(points in arb_points()) {
            let tagged: Vec<_> = points.iter().cloned().enumerate()
                .map(|(i, v)| (v, i)).collect();
            let f = frontier(tagged);
            for p in &points {
                prop_assert!(f.iter().any(|(k, _)| k.dominates(p)));
            }
        }

        #[test]
        fn positive_combinations_keep_their_minimum(
            points in arb_points(),
            we in 1u64..7, wl in 1u64..7, wr in 1u64..7,
        ) {
            let score = |v: &CriteriaVector| {
                let mut s = rat(we) * &v.energy + rat(wl) * &v.latency;
                for r in &v.reservations {
                    s += rat(wr) * rat(*r);
                }
                s
            };
            let best_all = points.iter().map(&score).min().unwrap();
            let tagged: Vec<_> = points.iter().cloned().enumerate()
                .map(|(i, v)| (v, i)).collect();
            let best_front = frontier(tagged).iter().map(|(v, _)| score(v)).min().unwrap();
            prop_assert_eq!(best_all, best_front);
        }
    }
}
