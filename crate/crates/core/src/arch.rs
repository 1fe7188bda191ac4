//! Memory hierarchy descriptions.
//!
//! An architecture is an ordered list of memory levels. Level 0 is the
//! backing store (unbounded capacity, e.g. DRAM); higher indices sit closer
//! to compute and must declare finite capacities. Compute itself is
//! described by a MAC energy, a parallelism degree, and a clock frequency.

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{rat_from_f64, rat_to_f64, Rat};

pub type LevelId = usize;

/// One memory level.
#[derive(Debug, Clone, PartialEq)]
pub struct MemLevel {
    pub name: String,
    /// `None` means unbounded; only the backing store may be unbounded.
    pub capacity_bytes: Option<u64>,
    pub bandwidth_bytes_per_cycle: Rat,
    pub energy_per_byte: Rat,
}

/// A parameterized accelerator: memory levels plus compute parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    /// Outermost (backing store) first.
    pub levels: Vec<MemLevel>,
    /// Energy per multiply-accumulate.
    pub mac_energy: Rat,
    /// Operations retired per cycle.
    pub parallelism: u64,
    pub frequency_hz: Rat,
    /// Bytes per tensor datum.
    pub datum_bytes: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("architecture needs at least two levels (backing store plus one buffer), found {0}")]
    TooFewLevels(usize),
    #[error("level 0 `{0}` must be the unbounded backing store (omit capacity_bytes)")]
    BackingBounded(String),
    #[error("level {index} `{name}` must declare a capacity; only level 0 is unbounded")]
    InnerUnbounded { index: usize, name: String },
    #[error("level {index} `{name}` has zero capacity")]
    ZeroCapacity { index: usize, name: String },
    #[error("level {index} `{name}`: {field} must be positive")]
    NonPositive {
        index: usize,
        name: String,
        field: &'static str,
    },
    #[error("{0} must be positive")]
    BadComputeParam(&'static str),
    #[error("duplicate level name `{0}`")]
    DuplicateLevel(String),
    #[error("field {0} is not a finite number")]
    NotFinite(&'static str),
}

impl ArchSpec {
    pub fn new(
        levels: Vec<MemLevel>,
        mac_energy: Rat,
        parallelism: u64,
        frequency_hz: Rat,
        datum_bytes: u64,
    ) -> Result<Self, ArchError> {
        let a = ArchSpec {
            levels,
            mac_energy,
            parallelism,
            frequency_hz,
            datum_bytes,
        };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<(), ArchError> {
        if self.levels.len() < 2 {
            return Err(ArchError::TooFewLevels(self.levels.len()));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, l) in self.levels.iter().enumerate() {
            if !names.insert(&l.name) {
                return Err(ArchError::DuplicateLevel(l.name.clone()));
            }
            match (i, l.capacity_bytes) {
                (0, Some(_)) => return Err(ArchError::BackingBounded(l.name.clone())),
                (0, None) => {}
                (_, None) => {
                    return Err(ArchError::InnerUnbounded {
                        index: i,
                        name: l.name.clone(),
                    })
                }
                (_, Some(0)) => {
                    return Err(ArchError::ZeroCapacity {
                        index: i,
                        name: l.name.clone(),
                    })
                }
                (_, Some(_)) => {}
            }
            if l.bandwidth_bytes_per_cycle <= Rat::zero() {
                return Err(ArchError::NonPositive {
                    index: i,
                    name: l.name.clone(),
                    field: "bandwidth_bytes_per_cycle",
                });
            }
            if l.energy_per_byte < Rat::zero() {
                return Err(ArchError::NonPositive {
                    index: i,
                    name: l.name.clone(),
                    field: "energy_per_byte",
                });
            }
        }
        if self.mac_energy < Rat::zero() {
            return Err(ArchError::BadComputeParam("mac_energy"));
        }
        if self.parallelism == 0 {
            return Err(ArchError::BadComputeParam("parallelism"));
        }
        if self.frequency_hz <= Rat::zero() {
            return Err(ArchError::BadComputeParam("frequency_hz"));
        }
        if self.datum_bytes == 0 {
            return Err(ArchError::BadComputeParam("datum_bytes"));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Innermost level id (closest to compute).
    pub fn innermost(&self) -> LevelId {
        self.levels.len() - 1
    }

    pub fn level_by_name(&self, name: &str) -> Option<LevelId> {
        self.levels.iter().position(|l| l.name == name)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let doc: ArchDoc = serde_json::from_str(s)?;
        doc.build().map_err(serde::de::Error::custom)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ArchDoc::from(self)).expect("arch serializes")
    }

    /// Two-level fixture (DRAM + one buffer) used widely in tests.
    pub fn two_level(buffer_bytes: u64) -> Self {
        ArchSpec::new(
            vec![
                MemLevel {
                    name: "DRAM".into(),
                    capacity_bytes: None,
                    bandwidth_bytes_per_cycle: crate::rat(8),
                    energy_per_byte: crate::rat(100),
                },
                MemLevel {
                    name: "GLB".into(),
                    capacity_bytes: Some(buffer_bytes),
                    bandwidth_bytes_per_cycle: crate::rat(64),
                    energy_per_byte: crate::rat(2),
                },
            ],
            crate::rat(1),
            1,
            crate::rat(1_000_000),
            1,
        )
        .expect("fixture is valid")
    }

    /// Three-level fixture (DRAM + GLB + PE buffer).
    pub fn three_level(glb_bytes: u64, pe_bytes: u64) -> Self {
        ArchSpec::new(
            vec![
                MemLevel {
                    name: "DRAM".into(),
                    capacity_bytes: None,
                    bandwidth_bytes_per_cycle: crate::rat(8),
                    energy_per_byte: crate::rat(100),
                },
                MemLevel {
                    name: "GLB".into(),
                    capacity_bytes: Some(glb_bytes),
                    bandwidth_bytes_per_cycle: crate::rat(64),
                    energy_per_byte: crate::rat(2),
                },
                MemLevel {
                    name: "PE".into(),
                    capacity_bytes: Some(pe_bytes),
                    bandwidth_bytes_per_cycle: crate::rat(256),
                    energy_per_byte: Rat::new(1.into(), 2.into()),
                },
            ],
            crate::rat(1),
            1,
            crate::rat(1_000_000),
            1,
        )
        .expect("fixture is valid")
    }
}

/// On-disk architecture schema. Scalar rates are JSON numbers; every finite
/// f64 converts exactly to the internal rational representation.
#[derive(Debug, Serialize, Deserialize)]
struct ArchDoc {
    levels: Vec<LevelDoc>,
    mac_energy: f64,
    parallelism: u64,
    frequency_hz: f64,
    datum_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LevelDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity_bytes: Option<u64>,
    bandwidth_bytes_per_cycle: f64,
    energy_per_byte: f64,
}

impl ArchDoc {
    fn build(self) -> Result<ArchSpec, ArchError> {
        let conv = |x: f64, field: &'static str| {
            rat_from_f64(x).ok_or(ArchError::NotFinite(field))
        };
        let mut levels = Vec::new();
        for l in self.levels {
            levels.push(MemLevel {
                name: l.name,
                capacity_bytes: l.capacity_bytes,
                bandwidth_bytes_per_cycle: conv(
                    l.bandwidth_bytes_per_cycle,
                    "bandwidth_bytes_per_cycle",
                )?,
                energy_per_byte: conv(l.energy_per_byte, "energy_per_byte")?,
            });
        }
        ArchSpec::new(
            levels,
            conv(self.mac_energy, "mac_energy")?,
            self.parallelism,
            conv(self.frequency_hz, "frequency_hz")?,
            self.datum_bytes,
        )
    }
}

impl From<&ArchSpec> for ArchDoc {
    fn from(a: &ArchSpec) -> Self {
        ArchDoc {
            levels: a
                .levels
                .iter()
                .map(|l| LevelDoc {
                    name: l.name.clone(),
                    capacity_bytes: l.capacity_bytes,
                    bandwidth_bytes_per_cycle: rat_to_f64(&l.bandwidth_bytes_per_cycle),
                    energy_per_byte: rat_to_f64(&l.energy_per_byte),
                })
                .collect(),
            mac_energy: rat_to_f64(&a.mac_energy),
            parallelism: a.parallelism,
            frequency_hz: rat_to_f64(&a.frequency_hz),
            datum_bytes: a.datum_bytes,
        }
    }
}
