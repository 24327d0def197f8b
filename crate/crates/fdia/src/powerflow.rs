//! Newton-Raphson AC power flow and synthetic dataset generation.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::admittance::{build_admittance, AdmittanceMatrix};
use crate::grid::case::{BusType, GridCase};
use crate::grid::measurement::{eval_h, injection, MeasurementModel};

/// Net complex injection `(P, Q)` implied by a state at one bus.
pub fn bus_injection(adm: &AdmittanceMatrix, state: &StateVector, bus: usize) -> (f64, f64) {
    injection(adm, state, bus)
}
use crate::grid::state::StateVector;
use crate::rng::{derive_seed, standard_normal};

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITERATIONS: usize = 20;

/// Scales all loads by `factor` and generation dispatch proportionally;
/// the slack bus absorbs whatever imbalance remains after the solve.
pub fn scale_loads(case: &GridCase, factor: f64) -> GridCase {
    let mut scaled = case.clone();
    for bus in &mut scaled.buses {
        bus.pd *= factor;
        bus.qd *= factor;
    }
    for gen in &mut scaled.generators {
        gen.pg *= factor;
        gen.qg *= factor;
    }
    scaled
}

/// Solves the AC power flow for the case at the given load factor,
/// starting flat. The returned state has every P/Q mismatch below
/// [`PF_TOLERANCE`] p.u.
pub fn solve_power_flow(case: &GridCase, load_factor: f64) -> Result<StateVector> {
    if load_factor <= 0.0 {
        return Err(Error::Config("load factor must be positive".into()));
    }
    let scaled = scale_loads(case, load_factor);
    let adm = build_admittance(&scaled);
    newton_raphson(&scaled, &adm)
}

/// Newton-Raphson on the polar mismatch equations with a prebuilt
/// admittance matrix (load scaling does not change the network, so the
/// matrix can be shared across load levels).
pub fn newton_raphson(case: &GridCase, adm: &AdmittanceMatrix) -> Result<StateVector> {
    let n = case.n_buses();
    let slack = case.slack();

    // unknown layout: angles at non-slack buses, magnitudes at PQ buses
    let mut angle_buses = Vec::new();
    let mut pq_buses = Vec::new();
    for bus in &case.buses {
        match bus.bus_type {
            BusType::Slack => {}
            BusType::Pv => angle_buses.push(bus.id),
            BusType::Pq => {
                angle_buses.push(bus.id);
                pq_buses.push(bus.id);
            }
        }
    }
    angle_buses.sort_unstable();

    let (p_spec, q_spec) = case.net_injections();

    let mut state = StateVector::flat(n, slack);
    for bus in &case.buses {
        if bus.bus_type != BusType::Pq {
            state.vm[bus.id] = case.voltage_setpoint(bus.id);
        }
    }

    let n_ang = angle_buses.len();
    let n_pq = pq_buses.len();
    let dim = n_ang + n_pq;
    let mut mismatch = DVector::zeros(dim);
    let mut jac = DMatrix::zeros(dim, dim);

    let angle_pos: Vec<Option<usize>> = {
        let mut pos = vec![None; n];
        for (k, &bus) in angle_buses.iter().enumerate() {
            pos[bus] = Some(k);
        }
        pos
    };
    let vm_pos: Vec<Option<usize>> = {
        let mut pos = vec![None; n];
        for (k, &bus) in pq_buses.iter().enumerate() {
            pos[bus] = Some(n_ang + k);
        }
        pos
    };

    let mut max_mismatch = f64::INFINITY;
    for _iter in 0..=PF_MAX_ITERATIONS {
        max_mismatch = 0.0;
        for (k, &bus) in angle_buses.iter().enumerate() {
            let (p, q) = injection(adm, &state, bus);
            mismatch[k] = p_spec[bus] - p;
            max_mismatch = max_mismatch.max(mismatch[k].abs());
            if let Some(row) = vm_pos[bus] {
                mismatch[row] = q_spec[bus] - q;
                max_mismatch = max_mismatch.max(mismatch[row].abs());
            }
        }
        if max_mismatch <= PF_TOLERANCE {
            return Ok(state);
        }

        fill_pf_jacobian(adm, &state, &angle_buses, &angle_pos, &vm_pos, &mut jac);
        let step = jac
            .clone()
            .lu()
            .solve(&mismatch)
            .ok_or_else(|| Error::Estimation("singular power-flow Jacobian".into()))?;

        for (k, &bus) in angle_buses.iter().enumerate() {
            state.va[bus] += step[k];
        }
        for (k, &bus) in pq_buses.iter().enumerate() {
            state.vm[bus] += step[n_ang + k];
        }
    }

    Err(Error::PowerFlowDiverged {
        iterations: PF_MAX_ITERATIONS,
        mismatch: max_mismatch,
    })
}

/// Jacobian of the calculated injections: rows follow the mismatch layout
/// (P at angle buses, then Q at PQ buses), columns the unknown layout.
/// Newton solves `J * step = spec - calc` and applies `x += step`.
fn fill_pf_jacobian(
    adm: &AdmittanceMatrix,
    state: &StateVector,
    angle_buses: &[usize],
    angle_pos: &[Option<usize>],
    vm_pos: &[Option<usize>],
    jac: &mut DMatrix<f64>,
) {
    jac.fill(0.0);
    let vm = &state.vm;
    let va = &state.va;
    for (k, &i) in angle_buses.iter().enumerate() {
        let q_row = vm_pos[i];
        let mut dp_dti = 0.0;
        let mut dq_dti = 0.0;
        let mut dp_dvi = 2.0 * vm[i] * adm.g[(i, i)];
        let mut dq_dvi = -2.0 * vm[i] * adm.b[(i, i)];
        for &j in &adm.neighbors[i] {
            let theta = va[i] - va[j];
            let (sin, cos) = theta.sin_cos();
            let gij = adm.g[(i, j)];
            let bij = adm.b[(i, j)];
            let dp_dtj = vm[i] * vm[j] * (gij * sin - bij * cos);
            let dq_dtj = -vm[i] * vm[j] * (gij * cos + bij * sin);
            let dp_dvj = vm[i] * (gij * cos + bij * sin);
            let dq_dvj = vm[i] * (gij * sin - bij * cos);
            dp_dti -= dp_dtj;
            dq_dti -= dq_dtj;
            dp_dvi += dp_dvj * vm[j] / vm[i];
            dq_dvi += dq_dvj * vm[j] / vm[i];
            if let Some(col) = angle_pos[j] {
                jac[(k, col)] = dp_dtj;
                if let Some(row) = q_row {
                    jac[(row, col)] = dq_dtj;
                }
            }
            if let Some(col) = vm_pos[j] {
                jac[(k, col)] = dp_dvj;
                if let Some(row) = q_row {
                    jac[(row, col)] = dq_dvj;
                }
            }
        }
        let own_angle = angle_pos[i].expect("angle bus has a column");
        jac[(k, own_angle)] = dp_dti;
        if let Some(row) = q_row {
            jac[(row, own_angle)] = dq_dti;
        }
        if let Some(col) = vm_pos[i] {
            jac[(k, col)] = dp_dvi;
            if let Some(row) = q_row {
                jac[(row, col)] = dq_dvi;
            }
        }
    }
}

/// Multiplicative Gaussian reading noise: each reading becomes
/// `(1 + eps) * z` with `eps ~ N(0, sigma_rel^2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_rel: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn new(sigma_rel: f64, rng_seed: u64) -> Result<Self> {
        if sigma_rel < 0.0 {
            return Err(Error::Config("sigma_rel must be non-negative".into()));
        }
        Ok(NoiseModel { sigma_rel, rng_seed })
    }
}

/// Applies reading noise to a clean measurement vector. Deterministic
/// given the rng state.
pub fn apply_noise<R: Rng + ?Sized>(
    z_clean: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut R,
) -> DVector<f64> {
    let mut out = z_clean.clone();
    for v in out.iter_mut() {
        let eps = noise.sigma_rel * standard_normal(rng);
        *v *= 1.0 + eps;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One state-measurement pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub index: usize,
    pub load_factor: f64,
    pub x_true: StateVector,
    pub z_clean: DVector<f64>,
    pub z_noisy: DVector<f64>,
}

/// A set of records sharing one case and meter model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Digest over the serialized records, for reproducibility checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for record in &self.records {
            hasher.update(serde_json::to_string(record).expect("record serializes"));
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Ties a dataset directory to the exact case, meter set and noise
/// parameters it was generated from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub case_name: String,
    pub case_digest: String,
    pub measurement: MeasurementModel,
    pub seed: u64,
    pub sigma_rel: f64,
    pub load_range: (f64, f64),
    pub n_train: usize,
    pub n_test: usize,
}

/// Generates `n_samples` records: a uniform load factor is drawn, the
/// power flow solved, the clean readings evaluated and noise applied.
/// Non-convergent draws are resampled; more than 10% resamples is an
/// error since it means the case and load range are incompatible.
pub fn generate_dataset(
    case: &GridCase,
    model: &MeasurementModel,
    n_samples: usize,
    load_range: (f64, f64),
    noise: &NoiseModel,
    split: Split,
) -> Result<Dataset> {
    let (lo, hi) = load_range;
    if !(lo <= hi && lo > 0.0) {
        return Err(Error::Config("load range must satisfy 0 < lo <= hi".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }

    let adm = build_admittance(case);
    let split_stream = match split {
        Split::Train => 0x7261_u64,
        Split::Test => 0x7465_u64,
    };

    let results: Vec<Result<(Record, usize)>> = (0..n_samples)
        .into_par_iter()
        .map(|index| {
            let seed = derive_seed(noise.rng_seed, split_stream ^ (index as u64) << 16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut resamples = 0usize;
            loop {
                let load_factor = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                let scaled = scale_loads(case, load_factor);
                match newton_raphson(&scaled, &adm) {
                    Ok(x_true) => {
                        let z_clean = eval_h(&x_true, model, &adm);
                        let z_noisy = apply_noise(&z_clean, noise, &mut rng);
                        return Ok((
                            Record {
                                index,
                                load_factor,
                                x_true,
                                z_clean,
                                z_noisy,
                            },
                            resamples,
                        ));
                    }
                    Err(_) => {
                        resamples += 1;
                        if resamples > 100 {
                            return Err(Error::Generation(format!(
                                "sample {index} failed to converge after {resamples} resamples"
                            )));
                        }
                    }
                }
            }
        })
        .collect();

    let mut records = Vec::with_capacity(n_samples);
    let mut total_resamples = 0usize;
    for result in results {
        let (record, resamples) = result?;
        total_resamples += resamples;
        records.push(record);
    }
    if total_resamples * 10 > n_samples {
        return Err(Error::Generation(format!(
            "resample rate too high: {total_resamples} resamples for {n_samples} samples"
        )));
    }
    records.sort_by_key(|r| r.index);
    Ok(Dataset { split, records })
}

/// Writes case, manifest and JSONL record files into a directory.
pub fn save_dataset_dir(
    dir: &Path,
    case: &GridCase,
    manifest: &DatasetManifest,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("case.json"), case.to_canonical_json())?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    for (name, dataset) in [("train.jsonl", train), ("test.jsonl", test)] {
        let file = std::fs::File::create(dir.join(name))?;
        let mut writer = std::io::BufWriter::new(file);
        for record in &dataset.records {
            serde_json::to_writer(&mut writer, record)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Loads a directory written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<(GridCase, DatasetManifest, Dataset, Dataset)> {
    let case = GridCase::from_canonical_json(&std::fs::read_to_string(dir.join("case.json"))?)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.case_digest != case.digest() {
        return Err(Error::Config(
            "manifest case digest does not match case.json".into(),
        ));
    }
    let read_split = |name: &str, split: Split| -> Result<Dataset> {
        let file = std::fs::File::open(dir.join(name))?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Record>(&line)?);
        }
        Ok(Dataset { split, records })
    };
    let train = read_split("train.jsonl", Split::Train)?;
    let test = read_split("test.jsonl", Split::Test)?;
    Ok((case, manifest, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::measurement::default_meter_set;

    #[test]
    fn two_bus_pv_angle_matches_closed_form() {
        // slack + PV bus joined by a lossless x = 0.1 line, Pd = 0.5 at the
        // PV bus: the received power fixes sin(delta) = Pd * x.
        let text = "function mpc = t\nmpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;\n2 2 50 0 0 0 1 1 0 345 1 1.1 0.9;\n];\nmpc.gen = [\n1 0 0 0 0 1 100 1 0 0;\n2 0 0 0 0 1 100 1 0 0;\n];\nmpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1 -360 360;\n];\n";
        let case = crate::grid::parse_case(text).unwrap();
        let state = solve_power_flow(&case, 1.0).unwrap();
        let expected = -(0.05f64).asin();
        assert!(
            (state.va[1] - expected).abs() < 1e-10,
            "va = {}, expected {}",
            state.va[1],
            expected
        );
        assert_eq!(state.va[0], 0.0);
    }

    #[test]
    fn zero_load_lossless_case_is_flat() {
        let mut case = cases::ieee9();
        for bus in &mut case.buses {
            bus.pd = 0.0;
            bus.qd = 0.0;
        }
        for gen in &mut case.generators {
            gen.pg = 0.0;
            gen.qg = 0.0;
            gen.vg = 1.0;
        }
        for br in &mut case.branches {
            br.r = 0.0;
            br.b_charging = 0.0;
        }
        let state = solve_power_flow(&case, 1.0).unwrap();
        for bus in 0..9 {
            assert!((state.vm[bus] - 1.0).abs() < 1e-10);
            assert!(state.va[bus].abs() < 1e-10);
        }
    }

    #[test]
    fn ieee_cases_converge_quickly() {
        for case in [cases::ieee9(), cases::ieee14(), cases::ieee30()] {
            let state = solve_power_flow(&case, 1.0).unwrap();
            // re-check mismatches at the returned state
            let adm = build_admittance(&case);
            let (p_spec, q_spec) = case.net_injections();
            for bus in &case.buses {
                let (p, q) = injection(&adm, &state, bus.id);
                match bus.bus_type {
                    BusType::Slack => {}
                    BusType::Pv => {
                        assert!((p_spec[bus.id] - p).abs() <= PF_TOLERANCE);
                    }
                    BusType::Pq => {
                        assert!((p_spec[bus.id] - p).abs() <= PF_TOLERANCE);
                        assert!((q_spec[bus.id] - q).abs() <= PF_TOLERANCE);
                    }
                }
            }
        }
    }

    #[test]
    fn ieee9_reproduces_loads_at_pq_buses() {
        let case = cases::ieee9();
        let adm = build_admittance(&case);
        let state = solve_power_flow(&case, 1.0).unwrap();
        for bus in &case.buses {
            if bus.bus_type == BusType::Pq {
                let (p, q) = injection(&adm, &state, bus.id);
                assert!((p + bus.pd).abs() <= 1e-8, "bus {}: {}", bus.id, p);
                assert!((q + bus.qd).abs() <= 1e-8, "bus {}: {}", bus.id, q);
            }
        }
    }

    #[test]
    fn scale_loads_identity_and_linearity() {
        let case = cases::ieee14();
        let same = scale_loads(&case, 1.0);
        assert_eq!(case, same);
        let scaled = scale_loads(&case, 0.8);
        let total: f64 = case.buses.iter().map(|b| b.pd).sum();
        let scaled_total: f64 = scaled.buses.iter().map(|b| b.pd).sum();
        assert!((scaled_total - 0.8 * total).abs() < 1e-12);
    }

    #[test]
    fn heavy_load_still_converges_on_30_bus() {
        let case = cases::ieee30();
        assert!(solve_power_flow(&case, 1.2).is_ok());
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let noise = NoiseModel::new(0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(&z, &noise, &mut rng), z);
    }

    #[test]
    fn noise_sample_std_matches_sigma() {
        let z = DVector::from_element(100_000, 1.0);
        let noise = NoiseModel::new(0.0067, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = apply_noise(&z, &noise, &mut rng);
        let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        let std = (noisy.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / noisy.len() as f64)
            .sqrt();
        assert!((0.0064..=0.0070).contains(&std), "std = {std}");
    }

    #[test]
    fn noise_is_deterministic_under_seed() {
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let noise = NoiseModel::new(0.0067, 5).unwrap();
        let a = apply_noise(&z, &noise, &mut ChaCha8Rng::seed_from_u64(5));
        let b = apply_noise(&z, &noise, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn single_noiseless_record_has_equal_vectors() {
        let case = cases::ieee9();
        let model = default_meter_set(&case).unwrap();
        let noise = NoiseModel::new(0.0, 1).unwrap();
        let data = generate_dataset(&case, &model, 1, (1.0, 1.0), &noise, Split::Test).unwrap();
        let record = &data.records[0];
        assert_eq!(record.z_noisy, record.z_clean);
        assert_eq!(record.load_factor, 1.0);
    }

    #[test]
    fn load_factors_span_the_range() {
        let case = cases::ieee9();
        let model = default_meter_set(&case).unwrap();
        let noise = NoiseModel::new(0.0067, 11).unwrap();
        let data =
            generate_dataset(&case, &model, 1000, (0.8, 1.2), &noise, Split::Train).unwrap();
        let min = data
            .records
            .iter()
            .map(|r| r.load_factor)
            .fold(f64::INFINITY, f64::min);
        let max = data
            .records
            .iter()
            .map(|r| r.load_factor)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min <= 0.82, "min = {min}");
        assert!(max >= 1.18, "max = {max}");
    }

    #[test]
    fn records_are_consistent_and_reproducible() {
        let case = cases::ieee9();
        let adm = build_admittance(&case);
        let model = default_meter_set(&case).unwrap();
        let noise = NoiseModel::new(0.0067, 21).unwrap();
        let a = generate_dataset(&case, &model, 50, (0.8, 1.2), &noise, Split::Train).unwrap();
        let b = generate_dataset(&case, &model, 50, (0.8, 1.2), &noise, Split::Train).unwrap();
        assert_eq!(a.digest(), b.digest());
        for record in &a.records {
            let z = eval_h(&record.x_true, &model, &adm);
            for (lhs, rhs) in z.iter().zip(record.z_clean.iter()) {
                assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let case = cases::ieee9();
        let model = default_meter_set(&case).unwrap();
        let noise = NoiseModel::new(0.0067, 3).unwrap();
        let train = generate_dataset(&case, &model, 5, (0.9, 1.1), &noise, Split::Train).unwrap();
        let test = generate_dataset(&case, &model, 3, (0.9, 1.1), &noise, Split::Test).unwrap();
        let manifest = DatasetManifest {
            case_name: case.name.clone(),
            case_digest: case.digest(),
            measurement: model.clone(),
            seed: 3,
            sigma_rel: 0.0067,
            load_range: (0.9, 1.1),
            n_train: 5,
            n_test: 3,
        };
        save_dataset_dir(dir.path(), &case, &manifest, &train, &test).unwrap();
        let (case2, manifest2, train2, test2) = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(case, case2);
        assert_eq!(manifest2.seed, 3);
        assert_eq!(train.digest(), train2.digest());
        assert_eq!(test.digest(), test2.digest());
    }
}
