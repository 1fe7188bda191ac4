//! Workload descriptions: ranks, tensors, and Einsum cascades.
//!
//! A workload is a list of Einsums over named tensors. Tensors project
//! directly onto rank variables (each tensor access is indexed by the
//! tensor's own rank list), so an Einsum's iteration space is the union of
//! the ranks of the tensors it touches. Cascades are restricted to chains:
//! every intermediate tensor has exactly one producer and one consumer, and
//! Einsums are listed so that Einsum `i` consumes at most the output of
//! Einsum `i-1`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RankId = usize;
pub type TensorId = usize;
pub type EinsumId = usize;

/// A named iteration dimension with a fixed extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rank {
    pub name: String,
    pub extent: u64,
}

/// Structural role of a tensor within the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// Produced outside the workload; must be read from backing storage.
    Input,
    /// Produced by one Einsum and consumed by exactly one later Einsum.
    Intermediate,
    /// Produced by one Einsum, not consumed; must reach backing storage.
    Output,
}

/// A tensor, identified by the ordered list of ranks that index it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub ranks: Vec<RankId>,
    pub role: TensorRole,
}

/// One Einsum: reads `inputs`, fully computes `output`.
///
/// `rank_vars` is the Einsum's iteration space, always the union of the
/// ranks of the accessed tensors, sorted by rank id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Einsum {
    pub name: String,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    pub rank_vars: Vec<RankId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("duplicate {kind} name `{name}`")]
    DuplicateName { kind: &'static str, name: String },
    #[error("rank `{0}` has extent 0; extents must be at least 1")]
    ZeroExtent(String),
    #[error("tensor `{tensor}` references unknown rank id {rank}")]
    BadRankRef { tensor: String, rank: usize },
    #[error("tensor `{tensor}` lists rank `{rank}` more than once")]
    RepeatedRank { tensor: String, rank: String },
    #[error("einsum `{einsum}` references unknown tensor id {tensor}")]
    BadTensorRef { einsum: String, tensor: usize },
    #[error("einsum `{einsum}` lists tensor `{tensor}` as both input and output")]
    InOutOverlap { einsum: String, tensor: String },
    #[error("einsum `{einsum}` has no inputs")]
    NoInputs { einsum: String },
    #[error("tensor `{tensor}` is produced by more than one einsum")]
    MultipleProducers { tensor: String },
    #[error("tensor `{tensor}` has role {role:?} but {actual}")]
    RoleMismatch {
        tensor: String,
        role: TensorRole,
        actual: String,
    },
    #[error("einsum `{einsum}` consumes intermediates {tensors:?}; an einsum may consume at most one intermediate")]
    TooManyIntermediates { einsum: String, tensors: Vec<String> },
    #[error("einsum `{einsum}` consumes intermediate `{tensor}`, which is not the output of the immediately preceding einsum; list einsums in chain order")]
    NotChainOrdered { einsum: String, tensor: String },
    #[error("einsum `{einsum}` iteration space overflows u64 (product of rank extents)")]
    OpsOverflow { einsum: String },
    #[error("chain pattern mismatch at einsum {index}: contraction extent {k} must equal the previous output-column extent {prev_n}")]
    ChainPatternMismatch { index: usize, k: u64, prev_n: u64 },
    #[error("chain requested with {0} einsums; need at least 1")]
    EmptyChain(usize),
    #[error("chain pattern is empty")]
    EmptyPattern,
    #[error("unknown {kind} name `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

/// A validated Einsum cascade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub ranks: Vec<Rank>,
    pub tensors: Vec<Tensor>,
    pub einsums: Vec<Einsum>,
}

impl Workload {
    /// Builds and validates a workload. `rank_vars` on each einsum is
    /// recomputed from the accessed tensors, so callers may leave it empty.
    pub fn new(
        ranks: Vec<Rank>,
        tensors: Vec<Tensor>,
        mut einsums: Vec<Einsum>,
    ) -> Result<Self, WorkloadError> {
        for e in &mut einsums {
            let mut vars = BTreeSet::new();
            for &t in e.inputs.iter().chain(std::iter::once(&e.output)) {
                if let Some(tensor) = tensors.get(t) {
                    vars.extend(tensor.ranks.iter().copied());
                }
                // out-of-range ids are reported by validate()
            }
            e.rank_vars = vars.into_iter().collect();
        }
        let w = Workload {
            ranks,
            tensors,
            einsums,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let mut seen = BTreeSet::new();
        for r in &self.ranks {
            if !seen.insert(&r.name) {
                return Err(WorkloadError::DuplicateName {
                    kind: "rank",
                    name: r.name.clone(),
                });
            }
            if r.extent == 0 {
                return Err(WorkloadError::ZeroExtent(r.name.clone()));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(&t.name) {
                return Err(WorkloadError::DuplicateName {
                    kind: "tensor",
                    name: t.name.clone(),
                });
            }
            let mut ranks_seen = BTreeSet::new();
            for &r in &t.ranks {
                if r >= self.ranks.len() {
                    return Err(WorkloadError::BadRankRef {
                        tensor: t.name.clone(),
                        rank: r,
                    });
                }
                if !ranks_seen.insert(r) {
                    return Err(WorkloadError::RepeatedRank {
                        tensor: t.name.clone(),
                        rank: self.ranks[r].name.clone(),
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.einsums {
            if !seen.insert(&e.name) {
                return Err(WorkloadError::DuplicateName {
                    kind: "einsum",
                    name: e.name.clone(),
                });
            }
            if e.inputs.is_empty() {
                return Err(WorkloadError::NoInputs {
                    einsum: e.name.clone(),
                });
            }
            for &t in e.inputs.iter().chain(std::iter::once(&e.output)) {
                if t >= self.tensors.len() {
                    return Err(WorkloadError::BadTensorRef {
                        einsum: e.name.clone(),
                        tensor: t,
                    });
                }
            }
            if e.inputs.contains(&e.output) {
                return Err(WorkloadError::InOutOverlap {
                    einsum: e.name.clone(),
                    tensor: self.tensors[e.output].name.clone(),
                });
            }
            self.ops(self.einsums.iter().position(|x| x.name == e.name).unwrap())
                .ok_or_else(|| WorkloadError::OpsOverflow {
                    einsum: e.name.clone(),
                })?;
        }

        // Producer/consumer structure and declared roles must agree.
        let mut producers: BTreeMap<TensorId, Vec<EinsumId>> = BTreeMap::new();
        let mut consumers: BTreeMap<TensorId, Vec<EinsumId>> = BTreeMap::new();
        for (i, e) in self.einsums.iter().enumerate() {
            producers.entry(e.output).or_default().push(i);
            for &t in &e.inputs {
                consumers.entry(t).or_default().push(i);
            }
        }
        for (t, tensor) in self.tensors.iter().enumerate() {
            let np = producers.get(&t).map_or(0, Vec::len);
            let nc = consumers.get(&t).map_or(0, Vec::len);
            if np > 1 {
                return Err(WorkloadError::MultipleProducers {
                    tensor: tensor.name.clone(),
                });
            }
            let expected = match (np, nc) {
                (0, _) => TensorRole::Input,
                (1, 0) => TensorRole::Output,
                (1, _) => TensorRole::Intermediate,
                _ => unreachable!(),
            };
            if expected != tensor.role {
                return Err(WorkloadError::RoleMismatch {
                    tensor: tensor.name.clone(),
                    role: tensor.role,
                    actual: format!("it has {np} producer(s) and {nc} consumer(s)"),
                });
            }
            if tensor.role == TensorRole::Intermediate && nc != 1 {
                return Err(WorkloadError::RoleMismatch {
                    tensor: tensor.name.clone(),
                    role: tensor.role,
                    actual: format!("intermediates must have exactly one consumer, found {nc}"),
                });
            }
        }

        // Chain order: einsum i may consume at most one intermediate, and it
        // must be the output of einsum i-1.
        for (i, e) in self.einsums.iter().enumerate() {
            let inter: Vec<TensorId> = e
                .inputs
                .iter()
                .copied()
                .filter(|&t| self.tensors[t].role == TensorRole::Intermediate)
                .collect();
            if inter.len() > 1 {
                return Err(WorkloadError::TooManyIntermediates {
                    einsum: e.name.clone(),
                    tensors: inter
                        .iter()
                        .map(|&t| self.tensors[t].name.clone())
                        .collect(),
                });
            }
            if let Some(&t) = inter.first() {
                let ok = i > 0 && self.einsums[i - 1].output == t;
                if !ok {
                    return Err(WorkloadError::NotChainOrdered {
                        einsum: e.name.clone(),
                        tensor: self.tensors[t].name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn rank_by_name(&self, name: &str) -> Option<RankId> {
        self.ranks.iter().position(|r| r.name == name)
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn einsum_by_name(&self, name: &str) -> Option<EinsumId> {
        self.einsums.iter().position(|e| e.name == name)
    }

    pub fn producer_of(&self, t: TensorId) -> Option<EinsumId> {
        self.einsums.iter().position(|e| e.output == t)
    }

    pub fn consumers_of(&self, t: TensorId) -> Vec<EinsumId> {
        self.einsums
            .iter()
            .enumerate()
            .filter(|(_, e)| e.inputs.contains(&t))
            .map(|(i, _)| i)
            .collect()
    }

    /// The intermediate that einsum `i` consumes from einsum `i-1`, if any.
    /// `None` means einsum `i` starts an independent component.
    pub fn shared_tensor(&self, i: EinsumId) -> Option<TensorId> {
        self.einsums[i]
            .inputs
            .iter()
            .copied()
            .find(|&t| self.tensors[t].role == TensorRole::Intermediate)
    }

    /// Tensors accessed by einsum `e`, output last.
    pub fn tensors_of(&self, e: EinsumId) -> Vec<TensorId> {
        let es = &self.einsums[e];
        es.inputs
            .iter()
            .copied()
            .chain(std::iter::once(es.output))
            .collect()
    }

    /// Number of compute operations for einsum `e`: the product of the
    /// extents of its rank variables. `None` on u64 overflow.
    pub fn ops(&self, e: EinsumId) -> Option<u64> {
        let mut acc: u128 = 1;
        for &r in &self.einsums[e].rank_vars {
            acc = acc.checked_mul(self.ranks[r].extent as u128)?;
        }
        u64::try_from(acc).ok()
    }

    /// Total datums in tensor `t` (product of its rank extents).
    pub fn tensor_datums(&self, t: TensorId) -> u64 {
        self.tensors[t]
            .ranks
            .iter()
            .map(|&r| self.ranks[r].extent)
            .product()
    }

    /// Extent of rank `r`.
    pub fn extent(&self, r: RankId) -> u64 {
        self.ranks[r].extent
    }

    /// Builds a matmul chain of `num_einsums` stages over a shared row
    /// extent `m`. Stage `i` computes `T_i[m, n_i] = T_{i-1}[m, k_i] * W_i[k_i, n_i]`
    /// with `(k_i, n_i)` drawn cyclically from `nk_pattern`. Consecutive
    /// stages share a dimension, so `k_i` must equal `n_{i-1}` wherever two
    /// stages meet — including the wrap-around when the pattern repeats.
    pub fn make_chain(
        num_einsums: usize,
        m: u64,
        nk_pattern: &[(u64, u64)],
    ) -> Result<Self, WorkloadError> {
        if num_einsums == 0 {
            return Err(WorkloadError::EmptyChain(num_einsums));
        }
        if nk_pattern.is_empty() {
            return Err(WorkloadError::EmptyPattern);
        }
        let kn = |i: usize| nk_pattern[i % nk_pattern.len()];
        for i in 1..num_einsums {
            let (k, _) = kn(i);
            let (_, prev_n) = kn(i - 1);
            if k != prev_n {
                return Err(WorkloadError::ChainPatternMismatch {
                    index: i,
                    k,
                    prev_n,
                });
            }
        }

        let mut ranks = vec![Rank {
            name: "M".into(),
            extent: m,
        }];
        let (k0, _) = kn(0);
        ranks.push(Rank {
            name: "K0".into(),
            extent: k0,
        });
        // N_i becomes the contraction rank of stage i+1, so only one fresh
        // rank is added per stage.
        let mut n_rank: Vec<RankId> = Vec::new();
        for i in 0..num_einsums {
            let (_, n) = kn(i);
            ranks.push(Rank {
                name: format!("N{i}"),
                extent: n,
            });
            n_rank.push(ranks.len() - 1);
        }

        let mut tensors = vec![Tensor {
            name: "T0".into(),
            ranks: vec![0, 1], // [M, K0]
            role: TensorRole::Input,
        }];
        let mut einsums = Vec::new();
        let mut prev_out: TensorId = 0;
        let mut prev_k: RankId = 1;
        for i in 0..num_einsums {
            let n = n_rank[i];
            tensors.push(Tensor {
                name: format!("W{}", i + 1),
                ranks: vec![prev_k, n],
                role: TensorRole::Input,
            });
            let w = tensors.len() - 1;
            tensors.push(Tensor {
                name: format!("T{}", i + 1),
                ranks: vec![0, n],
                role: if i + 1 == num_einsums {
                    TensorRole::Output
                } else {
                    TensorRole::Intermediate
                },
            });
            let out = tensors.len() - 1;
            einsums.push(Einsum {
                name: format!("E{}", i + 1),
                inputs: vec![prev_out, w],
                output: out,
                rank_vars: vec![],
            });
            prev_out = out;
            prev_k = n;
        }
        Workload::new(ranks, tensors, einsums)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let doc: WorkloadDoc = serde_json::from_str(s)?;
        doc.build().map_err(serde::de::Error::custom)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WorkloadDoc::from(self)).expect("workload serializes")
    }
}

/// On-disk workload schema; references are by name.
#[derive(Debug, Serialize, Deserialize)]
struct WorkloadDoc {
    ranks: Vec<Rank>,
    tensors: Vec<TensorDoc>,
    einsums: Vec<EinsumDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    ranks: Vec<String>,
    role: TensorRole,
}

#[derive(Debug, Serialize, Deserialize)]
struct EinsumDoc {
    name: String,
    inputs: Vec<String>,
    output: String,
}

impl WorkloadDoc {
    fn build(self) -> Result<Workload, WorkloadError> {
        let rank_id = |name: &str, ranks: &[Rank]| {
            ranks
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| WorkloadError::UnknownName {
                    kind: "rank",
                    name: name.into(),
                })
        };
        let mut tensors = Vec::new();
        for t in &self.tensors {
            let ranks = t
                .ranks
                .iter()
                .map(|n| rank_id(n, &self.ranks))
                .collect::<Result<Vec<_>, _>>()?;
            tensors.push(Tensor {
                name: t.name.clone(),
                ranks,
                role: t.role,
            });
        }
        let tensor_id = |name: &str| {
            tensors
                .iter()
                .position(|t: &Tensor| t.name == name)
                .ok_or_else(|| WorkloadError::UnknownName {
                    kind: "tensor",
                    name: name.into(),
                })
        };
        let mut einsums = Vec::new();
        for e in &self.einsums {
            einsums.push(Einsum {
                name: e.name.clone(),
                inputs: e
                    .inputs
                    .iter()
                    .map(|n| tensor_id(n))
                    .collect::<Result<Vec<_>, _>>()?,
                output: tensor_id(&e.output)?,
                rank_vars: vec![],
            });
        }
        Workload::new(self.ranks, tensors, einsums)
    }
}

impl From<&Workload> for WorkloadDoc {
    fn from(w: &Workload) -> Self {
        WorkloadDoc {
            ranks: w.ranks.clone(),
            tensors: w
                .tensors
                .iter()
                .map(|t| TensorDoc {
                    name: t.name.clone(),
                    ranks: t.ranks.iter().map(|&r| w.ranks[r].name.clone()).collect(),
                    role: t.role,
                })
                .collect(),
            einsums: w
                .einsums
                .iter()
                .map(|e| EinsumDoc {
                    name: e.name.clone(),
                    inputs: e
                        .inputs
                        .iter()
                        .map(|&t| w.tensors[t].name.clone())
                        .collect(),
                    output: w.tensors[e.output].name.clone(),
                })
                .collect(),
        }
    }
}
