//! Experiment orchestration: scenario grids over systems, compromise
//! ratios and injection levels, with per-instance records, aggregate
//! metrics, meter-frequency analysis and solver comparisons.

pub mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnModel, ANGLE_GUARD};
use crate::attack::de::{run_de, DeConfig};
use crate::attack::slsqp::{run_slsqp, SqpConfig};
use crate::attack::{apply_attack, AttackContext, AttackVector, Scenario};
use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::case::GridCase;
use crate::grid::measurement::MeasurementModel;
use crate::grid::state::StateVector;
use crate::powerflow::{Dataset, Split};
use crate::rng::derive_seed;
use crate::wls::{estimate_wls, residual_j, Detector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    AnyK,
    SpecificK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    De(DeConfig),
    Slsqp(SqpConfig),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::De(_) => "de",
            Algorithm::Slsqp(_) => "slsqp",
        }
    }
}

/// One cell of the evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub system: String,
    pub scenario: ScenarioKind,
    /// meter-compromise ratio R; the budget is `k = round(R * N_m)`
    pub ratio: f64,
    /// injection level
    pub level: f64,
    pub instances: usize,
    pub repeats: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// pins the specific-k meter set instead of drawing one per repeat
    #[serde(default)]
    pub fixed_meters: Option<Vec<usize>>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.repeats == 0 {
            return Err(Error::Config("instances and repeats must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) || self.ratio == 0.0 {
            return Err(Error::Config("ratio must lie in (0, 1]".into()));
        }
        if self.level <= 0.0 {
            return Err(Error::Config("injection level must be positive".into()));
        }
        if self.fixed_meters.is_some() && self.scenario != ScenarioKind::SpecificK {
            return Err(Error::Config(
                "fixed meter sets require the specific-k scenario".into(),
            ));
        }
        Ok(())
    }

    pub fn budget(&self, n_meters: usize) -> usize {
        ((self.ratio * n_meters as f64).round() as usize).clamp(1, n_meters)
    }
}

/// Everything a scenario needs: the trained estimator and the grid and
/// detector it was trained against, plus the test measurements.
pub struct Artifacts<'a> {
    pub case: &'a GridCase,
    pub meas: &'a MeasurementModel,
    pub adm: &'a AdmittanceMatrix,
    pub detector: &'a Detector,
    pub ann: &'a AnnModel,
    pub test: &'a Dataset,
}

/// Outcome of one solved instance, as persisted to the records file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub repeat: usize,
    pub instance: usize,
    pub meters: Vec<(usize, f64)>,
    pub objective: f64,
    pub residual: f64,
    pub feasible: bool,
    /// stealth re-verified from scratch (fresh estimator start, bounds
    /// and sparsity checks)
    pub verified: bool,
    /// shift crossed the success thresholds AND the attack re-verified
    pub success: bool,
    pub mae_theta: f64,
    pub mare_theta: f64,
    pub nfe: usize,
    pub nfe_to_success: Option<usize>,
    pub time_s: f64,
}

/// Aggregates over a scenario cell; dispersion is across repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub success_probability: f64,
    pub success_probability_std: f64,
    /// mean absolute injected angle error over delivered attacks, radians
    pub mae_theta: f64,
    /// mean of per-instance maximum relative angle shifts
    pub mare_theta: f64,
    /// mean evaluations until the first feasible successful candidate
    /// (total evaluations when an instance never succeeded)
    pub mean_nfe: f64,
    pub max_nfe: usize,
    pub mean_time_s: f64,
    pub instances: usize,
    pub repeats: usize,
}

impl AttackMetrics {
    /// Recomputes the summary from raw records; `run_scenario` uses this
    /// same path, so a summary always matches its records file.
    pub fn from_records(records: &[InstanceRecord], repeats: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("no records to aggregate".into()));
        }
        let per_repeat_success: Vec<f64> = (0..repeats)
            .map(|r| {
                let of_repeat: Vec<&InstanceRecord> =
                    records.iter().filter(|rec| rec.repeat == r).collect();
                if of_repeat.is_empty() {
                    0.0
                } else {
                    of_repeat.iter().filter(|rec| rec.success).count() as f64
                        / of_repeat.len() as f64
                }
            })
            .collect();
        let mean_success =
            per_repeat_success.iter().sum::<f64>() / per_repeat_success.len() as f64;
        let var_success = per_repeat_success
            .iter()
            .map(|p| (p - mean_success) * (p - mean_success))
            .sum::<f64>()
            / per_repeat_success.len() as f64;

        let delivered: Vec<&InstanceRecord> =
            records.iter().filter(|rec| rec.verified).collect();
        let (mae, mare) = if delivered.is_empty() {
            (0.0, 0.0)
        } else {
            (
                delivered.iter().map(|r| r.mae_theta).sum::<f64>() / delivered.len() as f64,
                delivered.iter().map(|r| r.mare_theta).sum::<f64>() / delivered.len() as f64,
            )
        };
        let mean_nfe = records
            .iter()
            .map(|r| r.nfe_to_success.unwrap_or(r.nfe) as f64)
            .sum::<f64>()
            / records.len() as f64;
        let max_nfe = records.iter().map(|r| r.nfe).max().unwrap_or(0);
        let mean_time = records.iter().map(|r| r.time_s).sum::<f64>() / records.len() as f64;

        let instances = records
            .iter()
            .map(|r| r.instance)
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        Ok(AttackMetrics {
            success_probability: mean_success,
            success_probability_std: var_success.sqrt(),
            mae_theta: mae,
            mare_theta: mare,
            mean_nfe,
            max_nfe,
            mean_time_s: mean_time,
            instances,
            repeats,
        })
    }
}

fn draw_meter_set<R: Rng>(k: usize, n_meters: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_meters).collect();
    for j in 0..k {
        let pick = rng.gen_range(j..n_meters);
        pool.swap(j, pick);
    }
    pool.truncate(k);
    pool
}

/// Independent re-verification of a solver's claim: bounds, sparsity and
/// the stealth constraint recomputed from a fresh flat start.
fn verify_attack(
    vector: &AttackVector,
    z: &nalgebra::DVector<f64>,
    k: usize,
    slack: usize,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
    detector: &Detector,
) -> bool {
    if vector.entries.len() > k {
        return false;
    }
    let mut seen = vec![false; meas.n_meters()];
    for &(meter, _) in &vector.entries {
        if meter >= meas.n_meters() || seen[meter] {
            return false;
        }
        seen[meter] = true;
    }
    let z_a = match apply_attack(z, vector, meas) {
        Ok(z_a) => z_a,
        Err(_) => return false,
    };
    let flat = StateVector::flat(adm.n_buses(), slack);
    match estimate_wls(&z_a, meas, adm, &flat) {
        Ok(x_hat) => residual_j(&z_a, &x_hat, meas, adm) <= detector.tau,
        Err(_) => false,
    }
}

/// Mean absolute angle shift between attacked and clean estimates over
/// non-slack buses, in radians.
fn mae_theta(attacked: &StateVector, clean: &StateVector) -> f64 {
    let slack = clean.slack;
    let n = clean.n_buses();
    let sum: f64 = (0..n)
        .filter(|&bus| bus != slack)
        .map(|bus| (attacked.va[bus] - clean.va[bus]).abs())
        .sum();
    sum / (n - 1) as f64
}

fn mare_theta(attacked: &StateVector, clean: &StateVector) -> f64 {
    let slack = clean.slack;
    (0..clean.n_buses())
        .filter(|&bus| bus != slack)
        .map(|bus| {
            (attacked.va[bus] - clean.va[bus]).abs() / clean.va[bus].abs().max(ANGLE_GUARD)
        })
        .fold(0.0, f64::max)
}

/// Runs one scenario cell: every repeat solves the same test instances
/// with repeat-specific solver seeds (and, for specific-k, a
/// repeat-specific meter set). Success is counted only for attacks that
/// re-verify from scratch.
pub fn run_scenario(
    config: &ScenarioConfig,
    artifacts: &Artifacts<'_>,
) -> Result<(AttackMetrics, Vec<InstanceRecord>)> {
    config.validate()?;
    if artifacts.test.split != Split::Test {
        return Err(Error::Config("scenario needs the test split".into()));
    }
    if artifacts.ann.input_dim() != artifacts.meas.n_meters() {
        return Err(Error::Config(
            "model and measurement set disagree on the meter count".into(),
        ));
    }
    if artifacts.ann.n_buses != artifacts.case.n_buses() {
        return Err(Error::Config("model and case disagree on the bus count".into()));
    }
    if config.instances > artifacts.test.len() {
        return Err(Error::Config(format!(
            "requested {} instances but the test set has {}",
            config.instances,
            artifacts.test.len()
        )));
    }
    let k = match &config.fixed_meters {
        Some(set) => set.len(),
        None => config.budget(artifacts.meas.n_meters()),
    };
    if matches!(
        (&config.algorithm, config.scenario),
        (Algorithm::Slsqp(_), ScenarioKind::AnyK)
    ) {
        return Err(Error::Config(
            "the SQP solver only supports the specific-k scenario".into(),
        ));
    }

    let mut records = Vec::with_capacity(config.instances * config.repeats);
    for repeat in 0..config.repeats {
        let repeat_seed = derive_seed(config.seed, repeat as u64);
        let scenario = match (config.scenario, &config.fixed_meters) {
            (ScenarioKind::AnyK, _) => Scenario::AnyK,
            (ScenarioKind::SpecificK, Some(set)) => Scenario::SpecificK(set.clone()),
            (ScenarioKind::SpecificK, None) => {
                let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed);
                Scenario::SpecificK(draw_meter_set(k, artifacts.meas.n_meters(), &mut rng))
            }
        };

        let repeat_records: Vec<Result<InstanceRecord>> = (0..config.instances)
            .into_par_iter()
            .map(|instance| {
                let record = &artifacts.test.records[instance];
                let ctx = AttackContext::new(
                    artifacts.ann,
                    artifacts.meas,
                    artifacts.adm,
                    artifacts.detector,
                    record.z_noisy.clone(),
                    scenario.clone(),
                    k,
                    config.level,
                )?;
                let solver_seed = derive_seed(repeat_seed, instance as u64);
                let result = match &config.algorithm {
                    Algorithm::De(de) => {
                        let cfg = DeConfig { seed: solver_seed, ..de.clone() };
                        run_de(&ctx, &cfg)?
                    }
                    Algorithm::Slsqp(sqp) => {
                        let cfg = SqpConfig { seed: solver_seed, ..sqp.clone() };
                        run_slsqp(&ctx, &cfg)?
                    }
                };

                let verified = result.feasible
                    && verify_attack(
                        &result.vector,
                        &ctx.z,
                        k,
                        artifacts.ann.slack,
                        artifacts.meas,
                        artifacts.adm,
                        artifacts.detector,
                    );
                let z_a = ctx.attacked_measurements(&result.vector);
                let attacked = artifacts.ann.forward(&z_a)?;
                let clean = ctx.baseline();
                Ok(InstanceRecord {
                    repeat,
                    instance,
                    meters: result.vector.entries.clone(),
                    objective: result.objective,
                    residual: result.residual,
                    feasible: result.feasible,
                    verified,
                    success: verified && result.success,
                    mae_theta: mae_theta(&attacked, clean),
                    mare_theta: mare_theta(&attacked, clean),
                    nfe: result.nfe,
                    nfe_to_success: result.nfe_to_success,
                    time_s: result.wall_time_s,
                })
            })
            .collect();
        for record in repeat_records {
            records.push(record?);
        }
    }

    let metrics = AttackMetrics::from_records(&records, config.repeats)?;
    Ok((metrics, records))
}

/// Ranked meter-occurrence table over delivered (verified) attacks:
/// `(meter, count, cumulative share)` sorted by descending count.
pub fn meter_frequency(records: &[InstanceRecord]) -> Vec<(usize, usize, f64)> {
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut total = 0usize;
    for record in records.iter().filter(|r| r.verified) {
        for (meter, _) in &record.meters {
            *counts.entry(*meter).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cumulative = 0usize;
    ranked
        .into_iter()
        .map(|(meter, count)| {
            cumulative += count;
            (meter, count, cumulative as f64 / total.max(1) as f64)
        })
        .collect()
}

/// Paired per-instance solver comparison on identical instance sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pairs: usize,
    /// fraction of instances where the first solver's objective is higher
    pub first_win_rate: f64,
    pub mean_objective_delta: f64,
    pub mean_mare_first: f64,
    pub mean_mare_second: f64,
    pub mean_time_first: f64,
    pub mean_time_second: f64,
}

pub fn compare_algorithms(
    first: &[InstanceRecord],
    second: &[InstanceRecord],
) -> Result<ComparisonReport> {
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::Contract(
            "comparison requires equal, non-empty instance sets".into(),
        ));
    }
    for (a, b) in first.iter().zip(second) {
        if a.instance != b.instance || a.repeat != b.repeat {
            return Err(Error::Contract(
                "comparison requires identical instance ordering".into(),
            ));
        }
    }
    let n = first.len() as f64;
    let wins = first
        .iter()
        .zip(second)
        .filter(|(a, b)| a.objective > b.objective)
        .count() as f64;
    let delta = first
        .iter()
        .zip(second)
        .map(|(a, b)| a.objective - b.objective)
        .sum::<f64>()
        / n;
    Ok(ComparisonReport {
        pairs: first.len(),
        first_win_rate: wins / n,
        mean_objective_delta: delta,
        mean_mare_first: first.iter().map(|r| r.mare_theta).sum::<f64>() / n,
        mean_mare_second: second.iter().map(|r| r.mare_theta).sum::<f64>() / n,
        mean_time_first: first.iter().map(|r| r.time_s).sum::<f64>() / n,
        mean_time_second: second.iter().map(|r| r.time_s).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::admittance::build_admittance;
    use crate::grid::measurement::default_meter_set;
    use crate::powerflow::{generate_dataset, NoiseModel};

    fn tiny_artifacts() -> (
        GridCase,
        MeasurementModel,
        AdmittanceMatrix,
        Detector,
        AnnModel,
        Dataset,
    ) {
        let case = cases::ieee9();
        let adm = build_admittance(&case);
        let meas = default_meter_set(&case).unwrap();
        let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), 0.01).unwrap();
        let noise = NoiseModel::new(0.0067, 5).unwrap();
        let test = generate_dataset(&case, &meas, 6, (0.9, 1.1), &noise, Split::Test).unwrap();
        let mut ann = AnnModel::with_default_architecture(
            meas.n_meters(),
            case.n_buses(),
            case.slack(),
            5,
        )
        .unwrap();
        ann.fit_normalization(&Dataset {
            split: Split::Train,
            records: test.records.clone(),
        })
        .unwrap();
        (case, meas, adm, detector, ann, test)
    }

    fn tiny_de() -> Algorithm {
        Algorithm::De(DeConfig {
            pop_size: 8,
            max_generations: 5,
            early_stop: None,
            ..DeConfig::default()
        })
    }

    #[test]
    fn single_instance_metrics_equal_the_record() {
        let (case, meas, adm, detector, ann, test) = tiny_artifacts();
        let artifacts = Artifacts {
            case: &case,
            meas: &meas,
            adm: &adm,
            detector: &detector,
            ann: &ann,
            test: &test,
        };
        let config = ScenarioConfig {
            system: "ieee9".into(),
            scenario: ScenarioKind::AnyK,
            ratio: 0.1,
            level: 0.1,
            instances: 1,
            repeats: 1,
            algorithm: tiny_de(),
            seed: 3,
            fixed_meters: None,
        };
        let (metrics, records) = run_scenario(&config, &artifacts).unwrap();
        assert_eq!(records.len(), 1);
        let record = &records[0];
        assert_eq!(metrics.max_nfe, record.nfe);
        assert_eq!(
            metrics.success_probability,
            if record.success { 1.0 } else { 0.0 }
        );
        if record.verified {
            assert_eq!(metrics.mae_theta, record.mae_theta);
            assert_eq!(metrics.mare_theta, record.mare_theta);
        }
    }

    #[test]
    fn scenario_is_deterministic_and_repeat_seeds_differ() {
        let (case, meas, adm, detector, ann, test) = tiny_artifacts();
        let artifacts = Artifacts {
            case: &case,
            meas: &meas,
            adm: &adm,
            detector: &detector,
            ann: &ann,
            test: &test,
        };
        let config = ScenarioConfig {
            system: "ieee9".into(),
            scenario: ScenarioKind::AnyK,
            ratio: 0.1,
            level: 0.1,
            instances: 3,
            repeats: 2,
            algorithm: tiny_de(),
            seed: 11,
            fixed_meters: None,
        };
        let (_, mut a) = run_scenario(&config, &artifacts).unwrap();
        let (_, mut b) = run_scenario(&config, &artifacts).unwrap();
        // wall time is the only legitimately nondeterministic field
        for record in a.iter_mut().chain(b.iter_mut()) {
            record.time_s = 0.0;
        }
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // same instance, different repeat: the solver seed changed, the
        // measurement did not (the record indices must line up)
        assert_eq!(a[0].instance, a[3].instance);
        assert_eq!(a[0].repeat, 0);
        assert_eq!(a[3].repeat, 1);
    }

    #[test]
    fn specific_k_uses_one_set_per_repeat() {
        let (case, meas, adm, detector, ann, test) = tiny_artifacts();
        let artifacts = Artifacts {
            case: &case,
            meas: &meas,
            adm: &adm,
            detector: &detector,
            ann: &ann,
            test: &test,
        };
        let config = ScenarioConfig {
            system: "ieee9".into(),
            scenario: ScenarioKind::SpecificK,
            ratio: 0.1,
            level: 0.1,
            instances: 3,
            repeats: 2,
            algorithm: tiny_de(),
            seed: 4,
            fixed_meters: None,
        };
        let (_, records) = run_scenario(&config, &artifacts).unwrap();
        let set_of = |r: &InstanceRecord| {
            let mut meters: Vec<usize> = r.meters.iter().map(|(m, _)| *m).collect();
            meters.sort_unstable();
            meters
        };
        // within one repeat every instance touches the same meter set
        assert_eq!(set_of(&records[0]), set_of(&records[1]));
        assert_eq!(set_of(&records[0]), set_of(&records[2]));
        // across repeats the drawn set differs (overwhelmingly likely)
        assert_ne!(set_of(&records[0]), set_of(&records[3]));
    }

    #[test]
    fn slsqp_rejects_any_k_scenario() {
        let (case, meas, adm, detector, ann, test) = tiny_artifacts();
        let artifacts = Artifacts {
            case: &case,
            meas: &meas,
            adm: &adm,
            detector: &detector,
            ann: &ann,
            test: &test,
        };
        let config = ScenarioConfig {
            system: "ieee9".into(),
            scenario: ScenarioKind::AnyK,
            ratio: 0.1,
            level: 0.1,
            instances: 1,
            repeats: 1,
            algorithm: Algorithm::Slsqp(SqpConfig::default()),
            seed: 1,
            fixed_meters: None,
        };
        assert!(run_scenario(&config, &artifacts).is_err());
    }

    #[test]
    fn meter_frequency_single_meter() {
        let record = InstanceRecord {
            repeat: 0,
            instance: 0,
            meters: vec![(7, 0.1)],
            objective: 1.0,
            residual: 0.0,
            feasible: true,
            verified: true,
            success: true,
            mae_theta: 0.0,
            mare_theta: 0.0,
            nfe: 10,
            nfe_to_success: Some(5),
            time_s: 0.0,
        };
        let table = meter_frequency(&[record]);
        assert_eq!(table, vec![(7, 1, 1.0)]);
    }

    #[test]
    fn meter_frequency_uniform_baseline() {
        // synthetic records with uniformly random meters: the top share
        // approaches 1/N_m
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_meters = 40;
        let records: Vec<InstanceRecord> = (0..4000)
            .map(|i| InstanceRecord {
                repeat: 0,
                instance: i,
                meters: vec![(rng.gen_range(0..n_meters), 0.1)],
                objective: 0.0,
                residual: 0.0,
                feasible: true,
                verified: true,
                success: false,
                mae_theta: 0.0,
                mare_theta: 0.0,
                nfe: 1,
                nfe_to_success: None,
                time_s: 0.0,
            })
            .collect();
        let table = meter_frequency(&records);
        let top_share = table[0].1 as f64 / 4000.0;
        assert!(
            (top_share - 1.0 / n_meters as f64).abs() < 0.02,
            "top share {top_share}"
        );
    }

    #[test]
    fn self_comparison_has_zero_delta() {
        let records: Vec<InstanceRecord> = (0..5)
            .map(|i| InstanceRecord {
                repeat: 0,
                instance: i,
                meters: vec![(i, 0.1)],
                objective: i as f64,
                residual: 0.0,
                feasible: true,
                verified: true,
                success: true,
                mae_theta: 0.1,
                mare_theta: 0.2,
                nfe: 10,
                nfe_to_success: None,
                time_s: 0.5,
            })
            .collect();
        let report = compare_algorithms(&records, &records).unwrap();
        assert_eq!(report.mean_objective_delta, 0.0);
        assert_eq!(report.first_win_rate, 0.0);
        assert_eq!(report.mean_mare_first, report.mean_mare_second);
    }

    #[test]
    fn comparison_rejects_mismatched_sets() {
        let record = InstanceRecord {
            repeat: 0,
            instance: 0,
            meters: vec![],
            objective: 0.0,
            residual: 0.0,
            feasible: false,
            verified: false,
            success: false,
            mae_theta: 0.0,
            mare_theta: 0.0,
            nfe: 0,
            nfe_to_success: None,
            time_s: 0.0,
        };
        let mut other = record.clone();
        other.instance = 1;
        assert!(compare_algorithms(std::slice::from_ref(&record), &[record.clone(), other.clone()]).is_err());
        assert!(compare_algorithms(&[record], &[other]).is_err());
    }
}
