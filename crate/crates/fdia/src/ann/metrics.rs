//! Estimation-quality metrics: maximum absolute relative errors and the
//! accuracy/bad-data summary used to qualify a trained estimator.

use serde::{Deserialize, Serialize};

use crate::ann::model::AnnModel;
use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::measurement::MeasurementModel;
use crate::grid::state::StateVector;
use crate::powerflow::{Dataset, Split};
use crate::wls::{residual_j, Detector};

/// Denominator floor for angle relative errors, in radians. The relative
/// error is undefined at zero angles; anything below this is measured
/// against the floor instead.
pub const ANGLE_GUARD: f64 = 1e-3;

/// Maximum relative magnitude error over buses, guarded denominator.
pub fn mare_vm(est: &StateVector, truth: &StateVector) -> f64 {
    est.vm
        .iter()
        .zip(&truth.vm)
        .map(|(e, t)| (e - t).abs() / t.abs().max(ANGLE_GUARD))
        .fold(0.0, f64::max)
}

/// Maximum relative angle error over non-slack buses, guarded denominator.
pub fn mare_va(est: &StateVector, truth: &StateVector) -> f64 {
    let slack = truth.slack;
    est.va
        .iter()
        .zip(&truth.va)
        .enumerate()
        .filter(|(bus, _)| *bus != slack)
        .map(|(_, (e, t))| (e - t).abs() / t.abs().max(ANGLE_GUARD))
        .fold(0.0, f64::max)
}

/// Aggregate estimator quality over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeMetrics {
    /// mean per-sample MARE of voltage magnitudes
    pub mare_vm: f64,
    /// fraction of samples with magnitude MARE <= 1%
    pub accuracy_vm: f64,
    /// mean per-sample MARE of voltage angles
    pub mare_va: f64,
    /// fraction of samples with angle MARE <= 5%
    pub accuracy_va: f64,
    /// fraction of samples the chi-square detector flags
    pub bad_data_rate: f64,
    pub samples: usize,
}

pub const VM_ACCURACY_THRESHOLD: f64 = 0.01;
pub const VA_ACCURACY_THRESHOLD: f64 = 0.05;

/// Metrics from explicit (estimate, truth, flagged) triples. Split out of
/// [`evaluate_model`] so the aggregation is testable against oracle
/// predictions.
pub fn se_metrics_from_predictions(
    predictions: &[(StateVector, StateVector, bool)],
) -> Result<SeMetrics> {
    if predictions.is_empty() {
        return Err(Error::Config("metrics over an empty set".into()));
    }
    let n = predictions.len() as f64;
    let mut sum_vm = 0.0;
    let mut sum_va = 0.0;
    let mut acc_vm = 0usize;
    let mut acc_va = 0usize;
    let mut flagged = 0usize;
    for (est, truth, bad) in predictions {
        let mv = mare_vm(est, truth);
        let ma = mare_va(est, truth);
        sum_vm += mv;
        sum_va += ma;
        if mv <= VM_ACCURACY_THRESHOLD {
            acc_vm += 1;
        }
        if ma <= VA_ACCURACY_THRESHOLD {
            acc_va += 1;
        }
        if *bad {
            flagged += 1;
        }
    }
    Ok(SeMetrics {
        mare_vm: sum_vm / n,
        accuracy_vm: acc_vm as f64 / n,
        mare_va: sum_va / n,
        accuracy_va: acc_va as f64 / n,
        bad_data_rate: flagged as f64 / n,
        samples: predictions.len(),
    })
}

/// Runs the estimator over a test split and scores it against the true
/// states; the detector sees the residual of the network's own estimate.
pub fn evaluate_model(
    ann: &AnnModel,
    data: &Dataset,
    detector: &Detector,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> Result<SeMetrics> {
    if data.split != Split::Test {
        return Err(Error::Config("evaluation requires the test split".into()));
    }
    let mut predictions = Vec::with_capacity(data.len());
    for record in &data.records {
        let est = ann.forward(&record.z_noisy)?;
        let bad = residual_j(&record.z_noisy, &est, meas, adm) > detector.tau;
        predictions.push((est, record.x_true.clone(), bad));
    }
    se_metrics_from_predictions(&predictions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(vm: Vec<f64>, va: Vec<f64>) -> StateVector {
        StateVector { vm, va, slack: 0 }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let truth = state(vec![1.0, 1.02], vec![0.0, -0.1]);
        let preds = vec![(truth.clone(), truth.clone(), false)];
        let metrics = se_metrics_from_predictions(&preds).unwrap();
        assert_eq!(metrics.accuracy_vm, 1.0);
        assert_eq!(metrics.accuracy_va, 1.0);
        assert_eq!(metrics.mare_vm, 0.0);
        assert_eq!(metrics.mare_va, 0.0);
        assert_eq!(metrics.bad_data_rate, 0.0);
    }

    #[test]
    fn mare_uses_max_component() {
        let truth = state(vec![1.0, 1.0, 1.0], vec![0.0, -0.1, 0.2]);
        let mut est = truth.clone();
        est.vm[1] = 1.02; // 2% error
        est.va[2] = 0.21; // 5% error
        assert!((mare_vm(&est, &truth) - 0.02).abs() < 1e-12);
        assert!((mare_va(&est, &truth) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn angle_guard_caps_small_denominators() {
        let truth = state(vec![1.0, 1.0], vec![0.0, 1e-6]);
        let mut est = truth.clone();
        est.va[1] = 1e-6 + 5e-5;
        // denominator is the guard, not 1e-6
        assert!((mare_va(&est, &truth) - 5e-5 / ANGLE_GUARD).abs() < 1e-9);
    }

    #[test]
    fn accuracy_counts_thresholds_inclusively() {
        let truth = state(vec![1.0, 1.0], vec![0.0, -0.2]);
        // 1/128 = 0.78% error, exactly representable
        let mut below = truth.clone();
        below.vm[1] = 1.0 + 1.0 / 128.0;
        let mut above = truth.clone();
        above.vm[1] = 1.011;
        let preds = vec![
            (below, truth.clone(), false),
            (above, truth.clone(), true),
        ];
        let metrics = se_metrics_from_predictions(&preds).unwrap();
        assert_eq!(metrics.accuracy_vm, 0.5);
        assert_eq!(metrics.bad_data_rate, 0.5);
    }
}
