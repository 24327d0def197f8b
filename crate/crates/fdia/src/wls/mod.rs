//! Classical weighted-least-squares state estimation and chi-square
//! bad-data detection.
//!
//! The detector is the attacker's stealth constraint: an attack vector
//! is undetectable exactly when the WLS residual of the falsified
//! measurements stays below the chi-square threshold.

mod chi2;

pub use chi2::{chi_square_cdf, chi_square_threshold};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::measurement::{eval_h_into, eval_h_jacobian_into, MeasurementModel};
use crate::grid::state::StateVector;

pub const WLS_TOLERANCE: f64 = 1e-8;
pub const WLS_MAX_ITERATIONS: usize = 50;

/// Chi-square bad-data detector with threshold `tau` at significance
/// `alpha` and `K = N_m - N_n` degrees of freedom.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Detector {
    pub tau: f64,
    pub alpha: f64,
    pub dof: usize,
}

impl Detector {
    /// Builds the detector for a meter set on an `n`-bus network.
    pub fn from_alpha(n_meters: usize, n_buses: usize, alpha: f64) -> Result<Self> {
        let free = 2 * n_buses - 1;
        if n_meters <= free {
            return Err(Error::Config(
                "detector needs an over-determined measurement set".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        let dof = n_meters - free;
        Ok(Detector {
            tau: chi_square_threshold(dof, alpha),
            alpha,
            dof,
        })
    }
}

/// The WLS residual `J(x) = (z - h(x))^T W (z - h(x))`.
pub fn residual_j(
    z: &DVector<f64>,
    x_hat: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> f64 {
    let mut h = DVector::zeros(model.n_meters());
    eval_h_into(x_hat, model, adm, &mut h);
    let mut j = 0.0;
    for i in 0..model.n_meters() {
        let r = z[i] - h[i];
        j += model.w[i] * r * r;
    }
    j
}

/// `true` when the residual exceeds the detector threshold.
pub fn detect_bad_data(
    z: &DVector<f64>,
    x_hat: &StateVector,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
    detector: &Detector,
) -> bool {
    residual_j(z, x_hat, model, adm) > detector.tau
}

/// Gauss-Newton minimizer of `J`. A halving line search engages only if
/// a full step would increase the residual.
pub fn estimate_wls(
    z: &DVector<f64>,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
    x_init: &StateVector,
) -> Result<StateVector> {
    let m = model.n_meters();
    if z.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: z.len(),
        });
    }
    let n = x_init.n_buses();
    let slack = x_init.slack;
    let dim = 2 * n - 1;

    let mut state = x_init.clone();
    let mut h = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, dim);

    eval_h_into(&state, model, adm, &mut h);
    let mut j_current = weighted_sq(z, &h, &model.w);

    for _iter in 0..WLS_MAX_ITERATIONS {
        eval_h_jacobian_into(&state, model, adm, &mut jac);

        // gain matrix H^T W H and right-hand side H^T W (z - h)
        let mut gain = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for row in 0..m {
            let w = model.w[row];
            let r = z[row] - h[row];
            for a in 0..dim {
                let ha = jac[(row, a)];
                if ha == 0.0 {
                    continue;
                }
                let wha = w * ha;
                rhs[a] += wha * r;
                for b in a..dim {
                    gain[(a, b)] += wha * jac[(row, b)];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                gain[(a, b)] = gain[(b, a)];
            }
        }

        let step = gain
            .cholesky()
            .ok_or_else(|| Error::Estimation("singular gain matrix (unobservable)".into()))?
            .solve(&rhs);

        let max_step = step.amax();
        let free = state.to_free();

        // halve the step until J does not increase
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = StateVector::from_free(&(&free + alpha * &step), n, slack);
            if candidate.vm.iter().any(|&v| v <= 0.0) {
                alpha *= 0.5;
                continue;
            }
            eval_h_into(&candidate, model, adm, &mut h);
            let j_new = weighted_sq(z, &h, &model.w);
            if j_new <= j_current + 1e-12 {
                state = candidate;
                j_current = j_new;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::Estimation(
                "line search failed to reduce the residual".into(),
            ));
        }
        if alpha * max_step <= WLS_TOLERANCE {
            return Ok(state);
        }
    }
    Err(Error::Estimation(format!(
        "did not converge in {WLS_MAX_ITERATIONS} Gauss-Newton iterations"
    )))
}

fn weighted_sq(z: &DVector<f64>, h: &DVector<f64>, w: &[f64]) -> f64 {
    let mut j = 0.0;
    for i in 0..z.len() {
        let r = z[i] - h[i];
        j += w[i] * r * r;
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::admittance::build_admittance;
    use crate::grid::measurement::{default_meter_set, eval_h};
    use crate::powerflow::{apply_noise, solve_power_flow, NoiseModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (
        crate::grid::GridCase,
        AdmittanceMatrix,
        MeasurementModel,
        StateVector,
    ) {
        let case = cases::ieee14();
        let adm = build_admittance(&case);
        let model = default_meter_set(&case).unwrap();
        let truth = solve_power_flow(&case, 1.0).unwrap();
        (case, adm, model, truth)
    }

    #[test]
    fn residual_zero_for_consistent_measurements() {
        let (_case, adm, model, truth) = setup();
        let z = eval_h(&truth, &model, &adm);
        assert!(residual_j(&z, &truth, &model, &adm).abs() < 1e-20);
    }

    #[test]
    fn single_meter_offset_gives_weighted_square() {
        let (_case, adm, model, truth) = setup();
        let mut z = eval_h(&truth, &model, &adm);
        let delta = 0.05;
        z[3] += delta;
        let expected = delta * delta / (model.sigma[3] * model.sigma[3]);
        assert!((residual_j(&z, &truth, &model, &adm) - expected).abs() < 1e-9);
    }

    #[test]
    fn noiseless_estimation_recovers_truth() {
        let (case, adm, model, truth) = setup();
        let z = eval_h(&truth, &model, &adm);
        let flat = StateVector::flat(case.n_buses(), case.slack());
        let est = estimate_wls(&z, &model, &adm, &flat).unwrap();
        for bus in 0..case.n_buses() {
            assert!((est.vm[bus] - truth.vm[bus]).abs() < 1e-6);
            assert!((est.va[bus] - truth.va[bus]).abs() < 1e-6);
        }
    }

    #[test]
    fn estimate_is_a_minimizer() {
        let (case, adm, model, truth) = setup();
        let noise = NoiseModel::new(0.0067, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = apply_noise(&eval_h(&truth, &model, &adm), &noise, &mut rng);
        let flat = StateVector::flat(case.n_buses(), case.slack());
        let est = estimate_wls(&z, &model, &adm, &flat).unwrap();
        let j_sol = residual_j(&z, &est, &model, &adm);
        let j_truth = residual_j(&z, &truth, &model, &adm);
        assert!(j_sol <= j_truth + 1e-9, "J(sol) = {j_sol}, J(truth) = {j_truth}");
    }

    #[test]
    fn gross_corruption_trips_the_detector() {
        let (case, adm, model, truth) = setup();
        let noise = NoiseModel::new(0.0067, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = apply_noise(&eval_h(&truth, &model, &adm), &noise, &mut rng);
        z[10] *= 10.0;
        let detector =
            Detector::from_alpha(model.n_meters(), case.n_buses(), 0.01).unwrap();
        let flat = StateVector::flat(case.n_buses(), case.slack());
        let est = estimate_wls(&z, &model, &adm, &flat).unwrap();
        assert!(detect_bad_data(&z, &est, &model, &adm, &detector));
    }

    #[test]
    fn consistent_measurements_not_flagged() {
        let (case, adm, model, truth) = setup();
        let z = eval_h(&truth, &model, &adm);
        let detector =
            Detector::from_alpha(model.n_meters(), case.n_buses(), 0.01).unwrap();
        assert!(!detect_bad_data(&z, &truth, &model, &adm, &detector));
    }

    #[test]
    fn sigma_scaling_leaves_minimizer_unchanged() {
        let (case, adm, model, truth) = setup();
        let noise = NoiseModel::new(0.0067, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = apply_noise(&eval_h(&truth, &model, &adm), &noise, &mut rng);
        let flat = StateVector::flat(case.n_buses(), case.slack());
        let est = estimate_wls(&z, &model, &adm, &flat).unwrap();

        let scaled = MeasurementModel::new(
            model.meters.clone(),
            model.sigma.iter().map(|s| 3.0 * s).collect(),
            model.z_min.clone(),
            model.z_max.clone(),
        )
        .unwrap();
        let est_scaled = estimate_wls(&z, &scaled, &adm, &flat).unwrap();
        for bus in 0..case.n_buses() {
            assert!((est.vm[bus] - est_scaled.vm[bus]).abs() < 1e-7);
            assert!((est.va[bus] - est_scaled.va[bus]).abs() < 1e-7);
        }
    }

    #[test]
    fn detector_dof_matches_meter_surplus() {
        let detector = Detector::from_alpha(82, 14, 0.01).unwrap();
        assert_eq!(detector.dof, 82 - 27);
        assert!(detector.tau > 0.0);
    }
}
