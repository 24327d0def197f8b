//! The constrained false-data-injection attack: sparse injection vectors,
//! the stealth (residual) constraint, per-meter bounds and the
//! infinity-norm phase-angle objective shared by both solvers.

pub mod de;
pub mod slsqp;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnModel, ANGLE_GUARD, VA_ACCURACY_THRESHOLD, VM_ACCURACY_THRESHOLD};
use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::measurement::{MeasurementModel, NOMINAL_FLOOR};
use crate::grid::state::StateVector;
use crate::wls::{estimate_wls, residual_j, Detector};

/// Which meters the attacker may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// any `k` meters of the attacker's choosing
    AnyK,
    /// exactly this fixed set of meters
    SpecificK(Vec<usize>),
}

/// Instance-level attack envelope: sparsity budget, per-meter injection
/// bounds derived from the injection level, and the detector threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub k: usize,
    pub scenario: Scenario,
    pub eta: f64,
    pub bound_lo: Vec<f64>,
    pub bound_hi: Vec<f64>,
    pub tau: f64,
}

impl AttackSpec {
    /// Builds the envelope for one measurement instance. The injection
    /// level `eta` bounds each touched meter at `eta * |z_i|` (floored for
    /// near-zero readings), intersected with the meter validity window.
    pub fn new(
        scenario: Scenario,
        k: usize,
        eta: f64,
        z: &DVector<f64>,
        meas: &MeasurementModel,
        tau: f64,
    ) -> Result<Self> {
        let m = meas.n_meters();
        if z.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: z.len(),
            });
        }
        if k == 0 || k > m {
            return Err(Error::Config(format!("k = {k} outside 1..={m}")));
        }
        if eta <= 0.0 {
            return Err(Error::Config("injection level must be positive".into()));
        }
        if let Scenario::SpecificK(indices) = &scenario {
            if indices.len() != k {
                return Err(Error::Config(format!(
                    "specific-k set has {} indices, expected k = {k}",
                    indices.len()
                )));
            }
            let mut seen = indices.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != k || indices.iter().any(|&i| i >= m) {
                return Err(Error::Config(
                    "specific-k indices must be distinct and valid".into(),
                ));
            }
        }
        let mut bound_lo = Vec::with_capacity(m);
        let mut bound_hi = Vec::with_capacity(m);
        for i in 0..m {
            let width = eta * z[i].abs().max(NOMINAL_FLOOR);
            let lo = (-width).max(meas.z_min[i] - z[i]).min(0.0);
            let hi = width.min(meas.z_max[i] - z[i]).max(0.0);
            bound_lo.push(lo);
            bound_hi.push(hi);
        }
        Ok(AttackSpec {
            k,
            scenario,
            eta,
            bound_lo,
            bound_hi,
            tau,
        })
    }

    pub fn n_meters(&self) -> usize {
        self.bound_lo.len()
    }

    /// Clamps an injection amount into the bounds of its meter.
    pub fn clamp_amount(&self, meter: usize, amount: f64) -> f64 {
        amount.clamp(self.bound_lo[meter], self.bound_hi[meter])
    }
}

/// A sparse injection: distinct meter indices with their injected amounts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackVector {
    pub entries: Vec<(usize, f64)>,
}

impl AttackVector {
    pub fn empty() -> Self {
        AttackVector { entries: Vec::new() }
    }

    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        let mut indices: Vec<usize> = entries.iter().map(|(i, _)| *i).collect();
        indices.sort_unstable();
        indices.dedup();
        if indices.len() != entries.len() {
            return Err(Error::Contract(
                "attack vector has duplicate meter indices".into(),
            ));
        }
        Ok(AttackVector { entries })
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }

    /// Dense assembly of the sparse pairs.
    pub fn to_dense(&self, n_meters: usize) -> DVector<f64> {
        let mut a = DVector::zeros(n_meters);
        for &(i, amount) in &self.entries {
            a[i] += amount;
        }
        a
    }
}

/// `z_a = clamp(z + a)` with the dense vector assembled from the sparse
/// pairs and the element-wise clamp to the meter validity window.
pub fn apply_attack(
    z: &DVector<f64>,
    vector: &AttackVector,
    meas: &MeasurementModel,
) -> Result<DVector<f64>> {
    let mut seen = vec![false; meas.n_meters()];
    for &(i, _) in &vector.entries {
        if i >= meas.n_meters() {
            return Err(Error::Contract(format!("meter index {i} out of range")));
        }
        if seen[i] {
            return Err(Error::Contract(
                "attack vector has duplicate meter indices".into(),
            ));
        }
        seen[i] = true;
    }
    let mut z_a = z.clone();
    for &(i, amount) in &vector.entries {
        z_a[i] = (z[i] + amount).clamp(meas.z_min[i], meas.z_max[i]);
    }
    Ok(z_a)
}

/// One candidate's scores under the attack formulation.
#[derive(Debug, Clone, Copy)]
pub struct CandidateEval {
    /// achieved max |Delta theta| between attacked and clean estimates
    pub objective: f64,
    /// `max(J(x_hat_a) - tau, 0)`; zero means stealthy
    pub violation: f64,
    /// the raw residual `J(x_hat_a)`
    pub residual: f64,
    /// whether the estimate shift crosses the success thresholds
    pub success: bool,
}

/// The solver-facing face of an attack instance: candidate vectors in,
/// objective/violation/success out.
pub trait AttackProblem: Sync {
    fn spec(&self) -> &AttackSpec;
    fn evaluate(&self, vector: &AttackVector) -> CandidateEval;
}

/// A concrete attack instance against a trained estimator, with the
/// clean baseline estimate and a warm-start state cached up front.
pub struct AttackContext<'a> {
    pub ann: &'a AnnModel,
    pub meas: &'a MeasurementModel,
    pub adm: &'a AdmittanceMatrix,
    pub detector: &'a Detector,
    pub z: DVector<f64>,
    pub spec: AttackSpec,
    baseline: StateVector,
    warm_start: StateVector,
}

impl<'a> AttackContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ann: &'a AnnModel,
        meas: &'a MeasurementModel,
        adm: &'a AdmittanceMatrix,
        detector: &'a Detector,
        z: DVector<f64>,
        scenario: Scenario,
        k: usize,
        eta: f64,
    ) -> Result<Self> {
        let spec = AttackSpec::new(scenario, k, eta, &z, meas, detector.tau)?;
        let baseline = ann.forward(&z)?;
        let flat = StateVector::flat(ann.n_buses, ann.slack);
        let warm_start = estimate_wls(&z, meas, adm, &flat)?;
        Ok(AttackContext {
            ann,
            meas,
            adm,
            detector,
            z,
            spec,
            baseline,
            warm_start,
        })
    }

    /// The clean estimate `f(z)` the attack is measured against.
    pub fn baseline(&self) -> &StateVector {
        &self.baseline
    }

    /// The WLS solution of the clean instance, used as a warm start.
    pub fn warm_start(&self) -> &StateVector {
        &self.warm_start
    }

    pub fn attacked_measurements(&self, vector: &AttackVector) -> DVector<f64> {
        apply_attack(&self.z, vector, self.meas).expect("vector validated by caller")
    }

    /// `max_i |theta_a_i - theta_i|` between attacked and clean estimates.
    pub fn attack_objective(&self, vector: &AttackVector) -> f64 {
        let z_a = self.attacked_measurements(vector);
        let est = self.ann.forward(&z_a).expect("dimensions fixed by context");
        max_angle_shift(&est, &self.baseline)
    }

    /// Stealth violation `max(J(x_hat_a) - tau, 0)` where the state is
    /// re-estimated by WLS on the attacked measurements. Divergence of
    /// the estimator marks the candidate infeasible with `+inf`.
    pub fn constraint_violation(&self, vector: &AttackVector) -> f64 {
        self.residual(vector)
            .map(|j| (j - self.spec.tau).max(0.0))
            .unwrap_or(f64::INFINITY)
    }

    /// The residual `J(x_hat_a)` at the WLS re-estimate, if it converges.
    pub fn residual(&self, vector: &AttackVector) -> Option<f64> {
        let z_a = self.attacked_measurements(vector);
        estimate_wls(&z_a, self.meas, self.adm, &self.warm_start)
            .ok()
            .map(|x_hat| residual_j(&z_a, &x_hat, self.meas, self.adm))
    }

    /// Success per the evaluation protocol: the attack moves the estimate
    /// by strictly more than 1% (magnitudes) or 5% (angles) MARE relative
    /// to the clean estimate.
    pub fn success_test(&self, vector: &AttackVector) -> bool {
        let z_a = self.attacked_measurements(vector);
        let est = self.ann.forward(&z_a).expect("dimensions fixed");
        estimate_shift_successful(&est, &self.baseline)
    }
}

impl AttackProblem for AttackContext<'_> {
    fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    fn evaluate(&self, vector: &AttackVector) -> CandidateEval {
        let z_a = self.attacked_measurements(vector);
        let est = self.ann.forward(&z_a).expect("dimensions fixed");
        let objective = max_angle_shift(&est, &self.baseline);
        let success = estimate_shift_successful(&est, &self.baseline);
        let (violation, residual) =
            match estimate_wls(&z_a, self.meas, self.adm, &self.warm_start) {
                Ok(x_hat) => {
                    let j = residual_j(&z_a, &x_hat, self.meas, self.adm);
                    ((j - self.spec.tau).max(0.0), j)
                }
                Err(_) => (f64::INFINITY, f64::INFINITY),
            };
        CandidateEval {
            objective,
            violation,
            residual,
            success,
        }
    }
}

/// `max_i |theta_a_i - theta_i|` over all buses (the slack contributes 0).
pub fn max_angle_shift(attacked: &StateVector, clean: &StateVector) -> f64 {
    attacked
        .va
        .iter()
        .zip(&clean.va)
        .map(|(a, c)| (a - c).abs())
        .fold(0.0, f64::max)
}

/// Strictly-greater-than success thresholds on the estimate shift.
pub fn estimate_shift_successful(attacked: &StateVector, clean: &StateVector) -> bool {
    let vm_shift = attacked
        .vm
        .iter()
        .zip(&clean.vm)
        .map(|(a, c)| (a - c).abs() / c.abs().max(ANGLE_GUARD))
        .fold(0.0, f64::max);
    if vm_shift > VM_ACCURACY_THRESHOLD {
        return true;
    }
    let slack = clean.slack;
    let va_shift = attacked
        .va
        .iter()
        .zip(&clean.va)
        .enumerate()
        .filter(|(bus, _)| *bus != slack)
        .map(|(_, (a, c))| (a - c).abs() / c.abs().max(ANGLE_GUARD))
        .fold(0.0, f64::max);
    va_shift > VA_ACCURACY_THRESHOLD
}

/// The attack outcome a solver reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub vector: AttackVector,
    pub objective: f64,
    pub residual: f64,
    pub feasible: bool,
    pub success: bool,
    /// total objective-function evaluations
    pub nfe: usize,
    /// evaluations consumed when a feasible successful candidate first
    /// appeared, if one ever did
    pub nfe_to_success: Option<usize>,
    pub iterations: usize,
    pub wall_time_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::admittance::build_admittance;
    use crate::grid::measurement::{default_meter_set, eval_h};
    use crate::powerflow::solve_power_flow;

    fn context_fixture() -> (
        AnnModel,
        MeasurementModel,
        AdmittanceMatrix,
        Detector,
        DVector<f64>,
    ) {
        let case = cases::ieee14();
        let adm = build_admittance(&case);
        let meas = default_meter_set(&case).unwrap();
        let truth = solve_power_flow(&case, 1.0).unwrap();
        let z = eval_h(&truth, &meas, &adm);
        let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), 0.01).unwrap();
        let mut ann = AnnModel::with_default_architecture(
            meas.n_meters(),
            case.n_buses(),
            case.slack(),
            5,
        )
        .unwrap();
        // untrained but well-defined: center the normalization on this instance
        ann.input_mean = z.clone();
        ann.output_mean = truth.to_free();
        (ann, meas, adm, detector, z)
    }

    #[test]
    fn empty_attack_is_identity_and_unsuccessful() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 3, 0.1)
                .unwrap();
        let empty = AttackVector::empty();
        assert_eq!(ctx.attacked_measurements(&empty), z);
        assert_eq!(ctx.attack_objective(&empty), 0.0);
        assert!(!ctx.success_test(&empty));
        // clean measurements stay under the detector threshold
        assert_eq!(ctx.constraint_violation(&empty), 0.0);
    }

    #[test]
    fn clamp_respects_validity_window() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 1, 0.1)
                .unwrap();
        let vector = AttackVector::new(vec![(0, 50.0)]).unwrap();
        let z_a = ctx.attacked_measurements(&vector);
        assert_eq!(z_a[0], meas.z_max[0]);
        for i in 1..meas.n_meters() {
            assert_eq!(z_a[i], z[i]);
        }
    }

    #[test]
    fn duplicate_indices_rejected() {
        assert!(AttackVector::new(vec![(3, 0.1), (3, -0.1)]).is_err());
        let (_, meas, _, _, z) = context_fixture();
        let bad = AttackVector {
            entries: vec![(3, 0.1), (3, -0.1)],
        };
        assert!(apply_attack(&z, &bad, &meas).is_err());
    }

    #[test]
    fn sparsity_is_preserved() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 5, 0.1)
                .unwrap();
        let vector = AttackVector::new(vec![(2, 0.01), (7, -0.02), (11, 0.005)]).unwrap();
        let z_a = ctx.attacked_measurements(&vector);
        let changed = (0..meas.n_meters()).filter(|&i| z_a[i] != z[i]).count();
        assert!(changed <= 5);
    }

    #[test]
    fn large_single_injection_violates_stealth() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 1, 10.0)
                .unwrap();
        // 50 sigma on one meter cannot be absorbed by re-estimation
        let vector = AttackVector::new(vec![(0, 50.0 * meas.sigma[0])]).unwrap();
        assert!(ctx.constraint_violation(&vector) > 0.0);
    }

    #[test]
    fn violation_monotone_in_single_injection() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 1, 100.0)
                .unwrap();
        let mut last = 0.0;
        for scale in [5.0, 20.0, 80.0, 300.0] {
            let vector = AttackVector::new(vec![(4, scale * meas.sigma[4])]).unwrap();
            let violation = ctx.constraint_violation(&vector);
            assert!(
                violation >= last - 1e-9,
                "violation fell from {last} to {violation} at scale {scale}"
            );
            last = violation;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn objective_matches_bruteforce_recomputation() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 3, 0.1)
                .unwrap();
        let vector = AttackVector::new(vec![(1, 0.02), (8, -0.01), (20, 0.015)]).unwrap();
        let objective = ctx.attack_objective(&vector);

        // recompute from scratch with no caching
        let z_a = apply_attack(&z, &vector, &meas).unwrap();
        let attacked = ann.forward(&z_a).unwrap();
        let clean = ann.forward(&z).unwrap();
        let direct = attacked
            .va
            .iter()
            .zip(&clean.va)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        assert!((objective - direct).abs() < 1e-15);
    }

    #[test]
    fn success_thresholds_are_strict() {
        // clean angle -1.25 and shift 0.0625 are exactly representable,
        // so the ratio is exactly 0.05: the strict ">" must say no
        let clean = StateVector {
            vm: vec![1.0, 1.0],
            va: vec![0.0, -1.25],
            slack: 0,
        };
        let mut attacked = clean.clone();
        attacked.va[1] = -1.25 - 0.0625;
        assert!(!estimate_shift_successful(&attacked, &clean));
        // 6% angle shift: success
        attacked.va[1] = -1.25 * 1.06;
        assert!(estimate_shift_successful(&attacked, &clean));
        // below threshold: no success
        attacked.va[1] = -1.25 * 1.04;
        assert!(!estimate_shift_successful(&attacked, &clean));
    }

    #[test]
    fn clamp_is_idempotent_for_inbound_injections() {
        let (ann, meas, adm, detector, z) = context_fixture();
        let ctx =
            AttackContext::new(&ann, &meas, &adm, &detector, z.clone(), Scenario::AnyK, 2, 0.1)
                .unwrap();
        let vector = AttackVector::new(vec![
            (3, ctx.spec.bound_hi[3] * 0.5),
            (9, ctx.spec.bound_lo[9] * 0.5),
        ])
        .unwrap();
        let once = ctx.attacked_measurements(&vector);
        let empty = AttackVector::empty();
        let twice = apply_attack(&once, &empty, &meas).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn specific_k_validation() {
        let (ann, meas, adm, detector, z) = context_fixture();
        assert!(AttackContext::new(
            &ann,
            &meas,
            &adm,
            &detector,
            z.clone(),
            Scenario::SpecificK(vec![1, 1]),
            2,
            0.1
        )
        .is_err());
        assert!(AttackContext::new(
            &ann,
            &meas,
            &adm,
            &detector,
            z,
            Scenario::SpecificK(vec![1, 2, 3]),
            2,
            0.1
        )
        .is_err());
    }
}
