//! Network model: case data, admittance matrix, states and the
//! measurement function.

pub mod admittance;
pub mod case;
pub mod measurement;
pub mod parse;
pub mod state;

pub use admittance::{build_admittance, AdmittanceMatrix, BranchAdmittance};
pub use case::{Branch, Bus, BusType, Generator, GridCase};
pub use measurement::{
    default_meter_set, eval_h, eval_h_jacobian, meter_set_for_state, MeasurementModel, Meter,
    MeterKind,
};
pub use parse::{parse_case, to_case_string};
pub use state::StateVector;
