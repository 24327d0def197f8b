//! The measurement model: meter set, the nonlinear map `h(x)` from states
//! to readings, and its analytic Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::case::GridCase;
use crate::grid::state::StateVector;

/// What a meter measures and where.
///
/// Injection and voltage meters reference a bus, flow meters a branch
/// index into the case's branch list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeterKind {
    PInj,
    QInj,
    PFlowFrom,
    QFlowFrom,
    PFlowTo,
    QFlowTo,
    VMag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meter {
    pub kind: MeterKind,
    pub location: usize,
}

impl Meter {
    pub fn label(&self) -> String {
        let tag = match self.kind {
            MeterKind::PInj => "P_inj",
            MeterKind::QInj => "Q_inj",
            MeterKind::PFlowFrom => "P_flow_from",
            MeterKind::QFlowFrom => "Q_flow_from",
            MeterKind::PFlowTo => "P_flow_to",
            MeterKind::QFlowTo => "Q_flow_to",
            MeterKind::VMag => "V_mag",
        };
        format!("{tag}@{}", self.location)
    }

    fn is_branch_meter(&self) -> bool {
        matches!(
            self.kind,
            MeterKind::PFlowFrom | MeterKind::QFlowFrom | MeterKind::PFlowTo | MeterKind::QFlowTo
        )
    }
}

/// An ordered meter set with per-meter noise levels and validity bounds.
///
/// `w[i] = sigma[i]^-2` is the diagonal of the WLS weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub meters: Vec<Meter>,
    pub sigma: Vec<f64>,
    pub w: Vec<f64>,
    pub z_min: Vec<f64>,
    pub z_max: Vec<f64>,
}

impl MeasurementModel {
    pub fn new(
        meters: Vec<Meter>,
        sigma: Vec<f64>,
        z_min: Vec<f64>,
        z_max: Vec<f64>,
    ) -> Result<Self> {
        let m = meters.len();
        if sigma.len() != m || z_min.len() != m || z_max.len() != m {
            return Err(Error::Config(
                "sigma and bound vectors must match the meter count".into(),
            ));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("all noise sigmas must be positive".into()));
        }
        if z_min.iter().zip(&z_max).any(|(lo, hi)| lo >= hi) {
            return Err(Error::Config("z_min must be below z_max elementwise".into()));
        }
        let w = sigma.iter().map(|s| 1.0 / (s * s)).collect();
        Ok(MeasurementModel {
            meters,
            sigma,
            w,
            z_min,
            z_max,
        })
    }

    pub fn n_meters(&self) -> usize {
        self.meters.len()
    }

    /// Checks the over-determination requirement against a case.
    pub fn check_observable(&self, case: &GridCase) -> Result<()> {
        let free = 2 * case.n_buses() - 1;
        if self.n_meters() <= free {
            return Err(Error::Config(format!(
                "meter set has {} meters but the state has {} free dimensions",
                self.n_meters(),
                free
            )));
        }
        for meter in &self.meters {
            let limit = if meter.is_branch_meter() {
                case.n_branches()
            } else {
                case.n_buses()
            };
            if meter.location >= limit {
                return Err(Error::Config(format!(
                    "meter {} references a missing element",
                    meter.label()
                )));
            }
        }
        Ok(())
    }
}

/// Net complex power injection `(P_i, Q_i)` implied by the state at `bus`.
pub(crate) fn injection(adm: &AdmittanceMatrix, state: &StateVector, bus: usize) -> (f64, f64) {
    let vm = &state.vm;
    let va = &state.va;
    let mut p = vm[bus] * vm[bus] * adm.g[(bus, bus)];
    let mut q = -vm[bus] * vm[bus] * adm.b[(bus, bus)];
    for &j in &adm.neighbors[bus] {
        let theta = va[bus] - va[j];
        let (sin, cos) = theta.sin_cos();
        let gij = adm.g[(bus, j)];
        let bij = adm.b[(bus, j)];
        p += vm[bus] * vm[j] * (gij * cos + bij * sin);
        q += vm[bus] * vm[j] * (gij * sin - bij * cos);
    }
    (p, q)
}

/// From-side complex flow of branch `k`; pass `to_side` for the to-side.
fn branch_flow(adm: &AdmittanceMatrix, state: &StateVector, k: usize, to_side: bool) -> (f64, f64) {
    let br = &adm.branches[k];
    let (i, j, yii, yij) = if to_side {
        (br.to, br.from, br.ytt, br.ytf)
    } else {
        (br.from, br.to, br.yff, br.yft)
    };
    let theta = state.va[i] - state.va[j];
    let (sin, cos) = theta.sin_cos();
    let vi = state.vm[i];
    let vj = state.vm[j];
    let p = vi * vi * yii.re + vi * vj * (yij.re * cos + yij.im * sin);
    let q = -vi * vi * yii.im + vi * vj * (yij.re * sin - yij.im * cos);
    (p, q)
}

/// Evaluates the measurement function `h(x)` for every meter, in order.
pub fn eval_h(
    state: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> DVector<f64> {
    let mut out = DVector::zeros(model.n_meters());
    eval_h_into(state, model, adm, &mut out);
    out
}

pub fn eval_h_into(
    state: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
    out: &mut DVector<f64>,
) {
    debug_assert_eq!(out.len(), model.n_meters());
    for (row, meter) in model.meters.iter().enumerate() {
        out[row] = match meter.kind {
            MeterKind::PInj => injection(adm, state, meter.location).0,
            MeterKind::QInj => injection(adm, state, meter.location).1,
            MeterKind::PFlowFrom => branch_flow(adm, state, meter.location, false).0,
            MeterKind::QFlowFrom => branch_flow(adm, state, meter.location, false).1,
            MeterKind::PFlowTo => branch_flow(adm, state, meter.location, true).0,
            MeterKind::QFlowTo => branch_flow(adm, state, meter.location, true).1,
            MeterKind::VMag => state.vm[meter.location],
        };
    }
}

/// Analytic Jacobian of `h` with respect to the free state layout
/// (non-slack angles, then all magnitudes). Shape `N_m x (2n - 1)`.
pub fn eval_h_jacobian(
    state: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> DMatrix<f64> {
    let n = state.n_buses();
    let mut jac = DMatrix::zeros(model.n_meters(), 2 * n - 1);
    eval_h_jacobian_into(state, model, adm, &mut jac);
    jac
}

pub fn eval_h_jacobian_into(
    state: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
    jac: &mut DMatrix<f64>,
) {
    jac.fill(0.0);
    let slack = state.slack;
    let vm = &state.vm;
    let va = &state.va;

    let angle_col = |bus: usize| -> Option<usize> {
        if bus == slack {
            None
        } else if bus < slack {
            Some(bus)
        } else {
            Some(bus - 1)
        }
    };
    let vmag_col = |bus: usize| state.n_buses() - 1 + bus;

    for (row, meter) in model.meters.iter().enumerate() {
        match meter.kind {
            MeterKind::PInj | MeterKind::QInj => {
                let i = meter.location;
                let is_p = meter.kind == MeterKind::PInj;
                let mut d_theta_own = 0.0;
                let mut d_vm_own = if is_p {
                    2.0 * vm[i] * adm.g[(i, i)]
                } else {
                    -2.0 * vm[i] * adm.b[(i, i)]
                };
                for &j in &adm.neighbors[i] {
                    let theta = va[i] - va[j];
                    let (sin, cos) = theta.sin_cos();
                    let gij = adm.g[(i, j)];
                    let bij = adm.b[(i, j)];
                    let (d_theta_j, d_vm_j) = if is_p {
                        (
                            vm[i] * vm[j] * (gij * sin - bij * cos),
                            vm[i] * (gij * cos + bij * sin),
                        )
                    } else {
                        (
                            -vm[i] * vm[j] * (gij * cos + bij * sin),
                            vm[i] * (gij * sin - bij * cos),
                        )
                    };
                    d_theta_own -= d_theta_j;
                    d_vm_own += d_vm_j / vm[i] * vm[j];
                    if let Some(col) = angle_col(j) {
                        jac[(row, col)] = d_theta_j;
                    }
                    jac[(row, vmag_col(j))] = d_vm_j;
                }
                if let Some(col) = angle_col(i) {
                    jac[(row, col)] = d_theta_own;
                }
                jac[(row, vmag_col(i))] = d_vm_own;
            }
            MeterKind::VMag => {
                jac[(row, vmag_col(meter.location))] = 1.0;
            }
            _ => {
                let k = meter.location;
                let br = &adm.branches[k];
                let to_side = matches!(meter.kind, MeterKind::PFlowTo | MeterKind::QFlowTo);
                let is_p = matches!(meter.kind, MeterKind::PFlowFrom | MeterKind::PFlowTo);
                let (i, j, yii, yij) = if to_side {
                    (br.to, br.from, br.ytt, br.ytf)
                } else {
                    (br.from, br.to, br.yff, br.yft)
                };
                let theta = va[i] - va[j];
                let (sin, cos) = theta.sin_cos();
                let (gij, bij) = (yij.re, yij.im);
                let (d_theta_i, d_vm_i, d_vm_j) = if is_p {
                    (
                        vm[i] * vm[j] * (-gij * sin + bij * cos),
                        2.0 * vm[i] * yii.re + vm[j] * (gij * cos + bij * sin),
                        vm[i] * (gij * cos + bij * sin),
                    )
                } else {
                    (
                        vm[i] * vm[j] * (gij * cos + bij * sin),
                        -2.0 * vm[i] * yii.im + vm[j] * (gij * sin - bij * cos),
                        vm[i] * (gij * sin - bij * cos),
                    )
                };
                if let Some(col) = angle_col(i) {
                    jac[(row, col)] = d_theta_i;
                }
                if let Some(col) = angle_col(j) {
                    jac[(row, col)] = -d_theta_i;
                }
                jac[(row, vmag_col(i))] = d_vm_i;
                jac[(row, vmag_col(j))] = d_vm_j;
            }
        }
    }
}

/// Relative noise level of the measurement readings (ANSI metering class).
pub const DEFAULT_SIGMA_REL: f64 = 0.0067;

/// Floor applied to near-zero nominal readings when deriving sigmas and
/// injection bounds, in p.u.
pub const NOMINAL_FLOOR: f64 = 0.01;

/// Half-width of the default measurement validity window around the
/// nominal reading, in p.u.
pub const DEFAULT_VALIDITY_HALF_WIDTH: f64 = 3.0;

/// Load factors spanning the commanded operating envelope; the per-meter
/// noise level is anchored to the largest reading across these, so a
/// meter whose reading grows at off-nominal load is not over-weighted.
pub const SIGMA_ENVELOPE_LOAD_FACTORS: [f64; 3] = [0.8, 1.0, 1.2];

/// Builds the default fully-observable meter set: P/Q injections at every
/// bus, P/Q from-side flows on every branch, and a voltage magnitude meter
/// at every bus.
///
/// Sigmas are relative to the largest reading magnitude over the load
/// envelope (floored at [`NOMINAL_FLOOR`]); validity bounds are the
/// base-load nominal +- [`DEFAULT_VALIDITY_HALF_WIDTH`].
pub fn default_meter_set(case: &GridCase) -> Result<MeasurementModel> {
    let mut states = Vec::new();
    for lf in SIGMA_ENVELOPE_LOAD_FACTORS {
        states.push(crate::powerflow::solve_power_flow(case, lf)?);
    }
    meter_set_for_states(case, &states[1], &states)
}

/// Same policy as [`default_meter_set`], for a caller-provided nominal state.
pub fn meter_set_for_state(case: &GridCase, nominal: &StateVector) -> Result<MeasurementModel> {
    meter_set_for_states(case, nominal, std::slice::from_ref(nominal))
}

/// Meter-set construction from an explicit nominal state (bounds) and a
/// set of envelope states (noise levels).
pub fn meter_set_for_states(
    case: &GridCase,
    nominal: &StateVector,
    envelope: &[StateVector],
) -> Result<MeasurementModel> {
    let n = case.n_buses();
    let b = case.n_branches();
    let mut meters = Vec::with_capacity(3 * n + 2 * b);
    for bus in 0..n {
        meters.push(Meter {
            kind: MeterKind::PInj,
            location: bus,
        });
    }
    for bus in 0..n {
        meters.push(Meter {
            kind: MeterKind::QInj,
            location: bus,
        });
    }
    for branch in 0..b {
        meters.push(Meter {
            kind: MeterKind::PFlowFrom,
            location: branch,
        });
    }
    for branch in 0..b {
        meters.push(Meter {
            kind: MeterKind::QFlowFrom,
            location: branch,
        });
    }
    for bus in 0..n {
        meters.push(Meter {
            kind: MeterKind::VMag,
            location: bus,
        });
    }

    let adm = crate::grid::admittance::build_admittance(case);
    let sigma_model = MeasurementModel {
        meters: meters.clone(),
        sigma: vec![1.0; meters.len()],
        w: vec![1.0; meters.len()],
        z_min: vec![-1.0; meters.len()],
        z_max: vec![1.0; meters.len()],
    };
    let z_nominal = eval_h(nominal, &sigma_model, &adm);
    let mut z_envelope = z_nominal.map(|z| z.abs());
    for state in envelope {
        let z = eval_h(state, &sigma_model, &adm);
        for i in 0..z_envelope.len() {
            z_envelope[i] = z_envelope[i].max(z[i].abs());
        }
    }

    let sigma: Vec<f64> = z_envelope
        .iter()
        .map(|z| DEFAULT_SIGMA_REL * z.max(NOMINAL_FLOOR))
        .collect();
    let z_min: Vec<f64> = z_nominal
        .iter()
        .map(|z| z - DEFAULT_VALIDITY_HALF_WIDTH)
        .collect();
    let z_max: Vec<f64> = z_nominal
        .iter()
        .map(|z| z + DEFAULT_VALIDITY_HALF_WIDTH)
        .collect();

    let model = MeasurementModel::new(meters, sigma, z_min, z_max)?;
    model.check_observable(case)?;
    Ok(model)
}
