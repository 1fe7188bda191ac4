//! Report construction and serialization.
//!
//! A report is self-contained: it embeds the canonical workload and
//! accelerator documents next to the result, so feeding them back to the
//! tool reproduces the run. All maps are ordered and no timestamps or
//! durations are recorded, so identical inputs yield byte-identical
//! reports.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use fusemap_core::baselines::{BaselineResult, Trace};
use fusemap_core::costmodel::CostBreakdown;
use fusemap_core::ffm::{MappingResult, SearchConfig, StepStats};
use fusemap_core::looptree::render;
use fusemap_core::reservation::usage_events;
use fusemap_core::{
    rat_to_f64, rat_to_string, ArchSpec, Node, Rat, TensorRole, Workload,
};

/// An exact rational alongside its nearest double, so reports are both
/// machine-checkable and human-readable.
#[derive(Debug, Clone, Serialize)]
pub struct Scalar {
    pub exact: String,
    pub value: f64,
}

pub fn scalar(x: &Rat) -> Scalar {
    Scalar {
        exact: rat_to_string(x),
        value: rat_to_f64(x),
    }
}

#[derive(Serialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub command: String,
    pub objective: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: ConfigEcho,
    /// Canonical workload document; reparsing it reproduces the run.
    pub workload: Value,
    /// Canonical accelerator document; reparsing it reproduces the run.
    pub arch: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_table: Option<Value>,
    pub workload_summary: WorkloadSummary,
    pub arch_summary: ArchSummary,
    pub best: BestMapping,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<StepReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchReport>,
}

#[derive(Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

/// Echo of the effective search configuration.
#[derive(Serialize)]
pub struct ConfigEcho {
    pub objective: String,
    pub max_loops_per_rank_per_level: usize,
    pub explore_permutations: bool,
    pub max_candidates_per_einsum: Option<usize>,
    pub skip_incompatible_joins: bool,
    pub consolidate_reservations: bool,
    pub verify_incremental_profiles: bool,
}

#[derive(Serialize)]
pub struct WorkloadSummary {
    pub num_einsums: usize,
    pub ranks: Vec<RankSummary>,
    pub tensors: Vec<TensorSummary>,
    pub einsums: Vec<EinsumSummary>,
    /// Total multiply-accumulates; absent if it overflows 64 bits.
    pub total_ops: Option<u64>,
}

#[derive(Serialize)]
pub struct RankSummary {
    pub name: String,
    pub extent: u64,
}

#[derive(Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub role: &'static str,
    pub datums: u64,
    pub bytes: u64,
}

#[derive(Serialize)]
pub struct EinsumSummary {
    pub name: String,
    pub ops: Option<u64>,
}

#[derive(Serialize)]
pub struct ArchSummary {
    pub levels: Vec<LevelSummary>,
    pub mac_energy: Scalar,
    pub parallelism: u64,
    pub frequency_hz: Scalar,
    pub datum_bytes: u64,
}

#[derive(Serialize)]
pub struct LevelSummary {
    pub name: String,
    /// `null` means unbounded backing storage.
    pub capacity_bytes: Option<u64>,
    pub bandwidth_bytes_per_cycle: Scalar,
    pub energy_per_byte: Scalar,
}

#[derive(Serialize)]
pub struct BestMapping {
    pub objective_value: Scalar,
    pub energy: Scalar,
    pub latency_cycles: Scalar,
    pub edp: Scalar,
    pub ops: u64,
    /// One candidate label per Einsum, in join order.
    pub labels: Vec<String>,
    /// Bytes moved through each memory level, outermost first.
    pub per_level_traffic_bytes: Vec<u64>,
    /// Peak buffer bytes per level, outermost first.
    pub per_level_peak_bytes: Vec<u64>,
    pub per_einsum: Vec<EinsumCost>,
    pub rendered: String,
}

#[derive(Serialize)]
pub struct EinsumCost {
    pub einsum: String,
    pub ops: u64,
    pub traffic_bytes: Vec<u64>,
}

/// Per-join search statistics. Wall-clock time is deliberately excluded so
/// reports stay byte-identical; the `scaling` CSV carries measured times.
#[derive(Serialize)]
pub struct StepReport {
    pub einsum: String,
    pub candidates: usize,
    pub groups: usize,
    pub frontier_size: usize,
    pub joins_attempted: usize,
    pub joins_skipped: usize,
}

#[derive(Serialize)]
pub struct OracleReport {
    pub mapspace_bound: String,
    pub complete: usize,
    pub feasible: usize,
}

#[derive(Serialize)]
pub struct SearchReport {
    pub algorithm: String,
    pub budget: usize,
    pub seed: u64,
    /// Candidate index per Einsum into the enumerated pools.
    pub genome: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ga: Option<GaEcho>,
}

#[derive(Serialize)]
pub struct ScheduleEcho {
    /// `null` defers to the seed mapping's objective value.
    pub t0: Option<f64>,
    pub cooling: f64,
}

#[derive(Serialize)]
pub struct GaEcho {
    pub population: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
}

fn role_name(role: TensorRole) -> &'static str {
    match role {
        TensorRole::Input => "input",
        TensorRole::Intermediate => "intermediate",
        TensorRole::Output => "output",
    }
}

fn workload_summary(w: &Workload, a: &ArchSpec) -> WorkloadSummary {
    let mut total: Option<u64> = Some(0);
    let einsums = w
        .einsums
        .iter()
        .enumerate()
        .map(|(e, es)| {
            let ops = w.ops(e);
            total = match (total, ops) {
                (Some(t), Some(o)) => t.checked_add(o),
                _ => None,
            };
            EinsumSummary {
                name: es.name.clone(),
                ops,
            }
        })
        .collect();
    WorkloadSummary {
        num_einsums: w.einsums.len(),
        ranks: w
            .ranks
            .iter()
            .map(|r| RankSummary {
                name: r.name.clone(),
                extent: r.extent,
            })
            .collect(),
        tensors: w
            .tensors
            .iter()
            .enumerate()
            .map(|(t, ten)| TensorSummary {
                name: ten.name.clone(),
                role: role_name(ten.role),
                datums: w.tensor_datums(t),
                bytes: w.tensor_datums(t) * a.datum_bytes,
            })
            .collect(),
        einsums,
        total_ops: total,
    }
}

fn arch_summary(a: &ArchSpec) -> ArchSummary {
    ArchSummary {
        levels: a
            .levels
            .iter()
            .map(|l| LevelSummary {
                name: l.name.clone(),
                capacity_bytes: l.capacity_bytes,
                bandwidth_bytes_per_cycle: scalar(&l.bandwidth_bytes_per_cycle),
                energy_per_byte: scalar(&l.energy_per_byte),
            })
            .collect(),
        mac_energy: scalar(&a.mac_energy),
        parallelism: a.parallelism,
        frequency_hz: scalar(&a.frequency_hz),
        datum_bytes: a.datum_bytes,
    }
}

fn best_mapping(
    w: &Workload,
    a: &ArchSpec,
    cost: &CostBreakdown,
    objective_value: &Rat,
    labels: &[String],
    peak: &[u64],
    rendered: String,
) -> BestMapping {
    let per_einsum = w
        .einsums
        .iter()
        .enumerate()
        .map(|(e, es)| EinsumCost {
            einsum: es.name.clone(),
            ops: cost.per_einsum_ops.get(&e).copied().unwrap_or(0),
            traffic_bytes: cost
                .per_einsum_bytes
                .get(&e)
                .cloned()
                .unwrap_or_else(|| vec![0; a.num_levels()]),
        })
        .collect();
    BestMapping {
        objective_value: scalar(objective_value),
        energy: scalar(&cost.energy),
        latency_cycles: scalar(&cost.latency_cycles),
        edp: scalar(&cost.edp(a)),
        ops: cost.ops,
        labels: labels.to_vec(),
        per_level_traffic_bytes: cost.per_level_bytes.clone(),
        per_level_peak_bytes: peak.to_vec(),
        per_einsum,
        rendered,
    }
}

pub fn best_from_mapping(w: &Workload, a: &ArchSpec, r: &MappingResult) -> BestMapping {
    best_mapping(
        w,
        a,
        &r.cost,
        &r.objective_value,
        &r.labels,
        &r.peak_usage,
        r.render.clone(),
    )
}

pub fn best_from_baseline(w: &Workload, a: &ArchSpec, r: &BaselineResult) -> BestMapping {
    best_mapping(
        w,
        a,
        &r.cost,
        &r.objective_value,
        &r.labels,
        &r.peak_usage,
        render(&r.tree, w, a),
    )
}

pub fn step_reports(w: &Workload, steps: &[StepStats]) -> Vec<StepReport> {
    steps
        .iter()
        .map(|s| StepReport {
            einsum: w.einsums[s.einsum].name.clone(),
            candidates: s.candidates,
            groups: s.groups,
            frontier_size: s.frontier_size,
            joins_attempted: s.joins_attempted,
            joins_skipped: s.joins_skipped,
        })
        .collect()
}

/// Builds a report skeleton with everything except the command-specific
/// sections (`steps`, `oracle`, `search`, `candidate_table`).
pub fn base_report(
    command: &str,
    w: &Workload,
    a: &ArchSpec,
    cfg: &SearchConfig,
    objective_name: &str,
    seed: Option<u64>,
    best: BestMapping,
) -> Report {
    let wdoc: Value =
        serde_json::from_str(&w.to_json()).expect("canonical workload document is valid JSON");
    let adoc: Value =
        serde_json::from_str(&a.to_json()).expect("canonical accelerator document is valid JSON");
    Report {
        tool: ToolInfo {
            name: "fusemap",
            version: env!("CARGO_PKG_VERSION"),
        },
        command: command.to_string(),
        objective: objective_name.to_string(),
        seed,
        config: ConfigEcho {
            objective: objective_name.to_string(),
            max_loops_per_rank_per_level: cfg.max_loops_per_rank_per_level,
            explore_permutations: cfg.explore_permutations,
            max_candidates_per_einsum: cfg.max_candidates_per_einsum,
            skip_incompatible_joins: cfg.skip_incompatible_joins,
            consolidate_reservations: cfg.consolidate_reservations,
            verify_incremental_profiles: cfg.verify_incremental_profiles,
        },
        workload: wdoc,
        arch: adoc,
        candidate_table: None,
        workload_summary: workload_summary(w, a),
        arch_summary: arch_summary(a),
        best,
        steps: None,
        oracle: None,
        search: None,
    }
}

pub fn write_json(path: &Path, report: &Report) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).context("serializing the report")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing report {}", path.display()))?;
    Ok(())
}

/// Best-so-far curve as CSV. `evals_per_point` converts trace points to
/// cumulative evaluation counts (1 for per-trial searches, the population
/// size for generational ones).
pub fn write_trace(path: &Path, trace: &Trace, evals_per_point: usize) -> Result<()> {
    let mut csv = String::from("evaluations,best_objective\n");
    for p in &trace.points {
        csv.push_str(&format!(
            "{},{}\n",
            (p.trial + 1) * evals_per_point,
            p.best_objective
        ));
    }
    fs::write(path, csv).with_context(|| format!("writing trace CSV {}", path.display()))?;
    Ok(())
}

/// Allocation-by-allocation buffer usage of a mapping as CSV, one column
/// of running usage per memory level.
pub fn write_timeline(path: &Path, tree: &Arc<Node>, w: &Workload, a: &ArchSpec) -> Result<()> {
    const EVENT_CAP: usize = 4_000_000;
    let events = usage_events(tree, w, a, EVENT_CAP)
        .context("replaying the mapping's allocation timeline")?;
    let mut csv = String::from("event,action,level,tensor,bytes");
    for l in &a.levels {
        csv.push_str(&format!(",usage_{}", l.name.replace(',', "_")));
    }
    csv.push('\n');
    for (i, ev) in events.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}",
            i,
            if ev.alloc { "alloc" } else { "free" },
            a.levels[ev.level].name,
            w.tensors[ev.tensor].name,
            ev.bytes
        ));
        for u in &ev.usage {
            csv.push_str(&format!(",{u}"));
        }
        csv.push('\n');
    }
    fs::write(path, csv).with_context(|| format!("writing timeline CSV {}", path.display()))?;
    Ok(())
}
