//! Explicit candidate tables.
//!
//! A table replaces per-Einsum enumeration with hand-written candidates:
//! each entry names an Einsum, gives the mapping a label, picks the memory
//! level through which the Einsum's intermediate tensors are exchanged,
//! and may pin the candidate's latency or energy to an exact value. Tables
//! make tiny worked examples runnable from the command line and let tests
//! pose joint-optimization puzzles with known answers.

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fusemap_core::ffm::Candidate;
use fusemap_core::looptree::{compute, storage};
use fusemap_core::{rat_from_f64, ArchSpec, TensorRole, Workload};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateTable {
    pub entries: Vec<CandidateEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    /// Einsum name from the workload document.
    pub einsum: String,
    /// Label reported for this candidate when it wins.
    pub label: String,
    /// Memory level name through which this Einsum's intermediate tensors
    /// (consumed and produced) are exchanged; other tensors stay at the
    /// backing store.
    pub fuse_level: String,
    /// Optional exact latency override in cycles.
    #[serde(default)]
    pub latency_cycles: Option<f64>,
    /// Optional exact energy override.
    #[serde(default)]
    pub energy: Option<f64>,
}

/// Parses a candidate table and builds one candidate pool per Einsum.
pub fn load_pools(w: &Workload, a: &ArchSpec, text: &str) -> Result<Vec<Vec<Candidate>>> {
    let table: CandidateTable = serde_json::from_str(text).context("parsing")?;
    let mut pools: Vec<Vec<Candidate>> = vec![Vec::new(); w.einsums.len()];
    for (i, entry) in table.entries.iter().enumerate() {
        let e = w.einsum_by_name(&entry.einsum).with_context(|| {
            format!(
                "entry {i}: field `einsum` names `{}`, which is not in the workload",
                entry.einsum
            )
        })?;
        let fuse = a.level_by_name(&entry.fuse_level).with_context(|| {
            format!(
                "entry {i}: field `fuse_level` names `{}`, which is not a memory level",
                entry.fuse_level
            )
        })?;
        let tensors = w.tensors_of(e);
        let out = *tensors.last().expect("einsums access at least one tensor");
        let mut node = compute(e);
        for &t in tensors.iter().rev() {
            let level = if w.tensors[t].role == TensorRole::Intermediate {
                fuse
            } else {
                0
            };
            node = storage(level, t, node);
        }
        let consumed = w.shared_tensor(e);
        let produced = (w.tensors[out].role == TensorRole::Intermediate).then_some(out);
        let mut cand = Candidate::from_tree(w, a, e, node, consumed, produced)
            .with_context(|| format!("entry {i} (`{}`)", entry.label))?;
        if let Some(l) = entry.latency_cycles {
            cand.cost.latency_cycles = rat_from_f64(l).with_context(|| {
                format!("entry {i}: field `latency_cycles` must be finite, got {l}")
            })?;
        }
        if let Some(en) = entry.energy {
            cand.cost.energy = rat_from_f64(en)
                .with_context(|| format!("entry {i}: field `energy` must be finite, got {en}"))?;
        }
        cand.label = entry.label.clone();
        pools[e].push(cand);
    }
    for (e, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            bail!(
                "no candidate entries for einsum `{}`; every einsum needs at least one",
                w.einsums[e].name
            );
        }
    }
    Ok(pools)
}
