//! Grid case data: buses, branches and generators in per-unit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bus role in the power-flow formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

/// A single bus. Loads and shunts are per-unit on the system base,
/// the initial voltage angle is in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm_init: f64,
    pub va_init: f64,
}

/// A transmission line or transformer between two buses.
///
/// `tap_ratio` of 1.0 means a nominal line; `phase_shift` is in radians.
/// `b_charging` is the total line charging susceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap_ratio: f64,
    pub phase_shift: f64,
}

/// A generating unit attached to a bus (per-unit dispatch, voltage setpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
}

/// A validated power network case. All electrical quantities are per-unit
/// on `base_mva`; bus ids are dense indices `0..n` after construction
/// (external ids are remapped by the parser).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

impl GridCase {
    /// Validates the structural invariants and returns the case.
    pub fn new(
        name: String,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Result<Self> {
        let case = GridCase {
            name,
            base_mva,
            buses,
            branches,
            generators,
        };
        case.validate()?;
        Ok(case)
    }

    fn validate(&self) -> Result<()> {
        if self.base_mva <= 0.0 {
            return Err(Error::Validation("base MVA must be positive".into()));
        }
        if self.buses.is_empty() {
            return Err(Error::Validation("case has no buses".into()));
        }
        let n = self.buses.len();
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.id != i {
                return Err(Error::Validation(format!(
                    "bus ids must be dense 0..n; bus {} has id {}",
                    i, bus.id
                )));
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count();
        if slack_count != 1 {
            return Err(Error::Validation(format!(
                "exactly one slack bus required, found {slack_count}"
            )));
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::Validation(format!(
                    "branch {} references missing bus ({} -> {})",
                    i, br.from, br.to
                )));
            }
            if br.from == br.to {
                return Err(Error::Validation(format!("branch {i} is a self-loop")));
            }
            if br.r < 0.0 {
                return Err(Error::Validation(format!(
                    "branch {i} has negative resistance"
                )));
            }
            if br.x == 0.0 {
                return Err(Error::Validation(format!(
                    "branch {i} has zero reactance"
                )));
            }
            if br.tap_ratio <= 0.0 {
                return Err(Error::Validation(format!(
                    "branch {i} has non-positive tap ratio"
                )));
            }
        }
        for (i, gen) in self.generators.iter().enumerate() {
            if gen.bus >= n {
                return Err(Error::Validation(format!(
                    "generator {} references missing bus {}",
                    i, gen.bus
                )));
            }
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Index of the unique slack bus.
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    /// Net scheduled injection (generation minus load) at every bus, p.u.
    pub fn net_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_buses();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for bus in &self.buses {
            p[bus.id] -= bus.pd;
            q[bus.id] -= bus.qd;
        }
        for gen in &self.generators {
            p[gen.bus] += gen.pg;
            q[gen.bus] += gen.qg;
        }
        (p, q)
    }

    /// Voltage setpoint for a bus: generator setpoint when present,
    /// otherwise the case's initial magnitude.
    pub fn voltage_setpoint(&self, bus: usize) -> f64 {
        self.generators
            .iter()
            .find(|g| g.bus == bus)
            .map(|g| g.vg)
            .unwrap_or(self.buses[bus].vm_init)
    }

    /// Canonical JSON form used for persistence, fixtures and digests.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid case serializes")
    }

    /// Parses the canonical JSON form, re-validating invariants.
    pub fn from_canonical_json(text: &str) -> Result<Self> {
        let case: GridCase = serde_json::from_str(text)?;
        case.validate()?;
        Ok(case)
    }

    /// Hex SHA-256 digest of the canonical JSON, used to tie datasets and
    /// model checkpoints to the exact case they were built from.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_json().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
