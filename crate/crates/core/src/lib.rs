//! Fusion-aware optimal mapper for cascades of Einsums on parameterized
//! memory hierarchies.
//!
//! The crate is organized around a loop-tree mapping representation:
//!
//! - [`workload`]: Einsum cascade descriptions (ranks, tensors, Einsums).
//! - [`arch`]: memory hierarchy descriptions (levels, compute parameters).
//! - [`looptree`]: the mapping representation (loop trees, partial mappings,
//!   join/decompose).
//! - [`costmodel`]: analytical access counts, energy, and latency, plus a
//!   datum-level trace simulator used to validate the closed forms.
//! - [`compat`]: compatibility criteria that decide which partial mappings
//!   can be fused together.
//! - [`reservation`]: buffer reservation accounting (peak usage of a full
//!   tree, incremental profiles, consolidation).
//! - [`pareto`]: dominance and Pareto frontiers over criteria vectors.
//! - [`ffm`]: per-Einsum enumeration and the Group/Prune/Join search that
//!   returns a provably optimal mapping.
//! - [`baselines`]: the exhaustive oracle and random/annealing/genetic
//!   searchers used for comparison.

pub mod arch;
pub mod baselines;
pub mod compat;
pub mod costmodel;
pub mod ffm;
pub mod looptree;
pub mod pareto;
pub mod reservation;
pub mod workload;

pub use arch::{ArchSpec, LevelId, MemLevel};
pub use compat::CompatKey;
pub use costmodel::CostBreakdown;
pub use ffm::{MappingResult, Objective, Pmapping, SearchConfig};
pub use looptree::Node;
pub use workload::{Einsum, EinsumId, Rank, RankId, Tensor, TensorId, TensorRole, Workload};

/// Exact rational scalar used for energy, latency, and derived objectives.
///
/// All cost arithmetic is exact so that independently aggregated totals
/// (per-Einsum sums vs. whole-tree evaluation) compare equal with zero
/// tolerance.
pub type Rat = num_rational::BigRational;

/// Builds a `Rat` from an integer.
pub fn rat(n: u64) -> Rat {
    Rat::from_integer(n.into())
}

/// Builds a `Rat` from an `f64` exactly (every finite f64 is a binary
/// rational). Returns `None` for NaN or infinities.
pub fn rat_from_f64(x: f64) -> Option<Rat> {
    Rat::from_float(x)
}

/// Renders a `Rat` as an exact "num/den" string for reports.
pub fn rat_to_string(x: &Rat) -> String {
    if x.denom() == &num_bigint::BigInt::from(1) {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

/// Approximates a `Rat` as f64 for human-oriented report fields.
pub fn rat_to_f64(x: &Rat) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or(f64::NAN)
}
