use fdia::ann::{mare_va, mare_vm};
use fdia::grid::{build_admittance, default_meter_set, StateVector};
use fdia::powerflow::{generate_dataset, NoiseModel, Split};
use fdia::wls::{estimate_wls, residual_j, Detector};

fn main() {
    for sys in ["ieee9", "ieee14", "ieee30"] {
        let case = fdia::cases::by_name(sys).unwrap();
        let adm = build_admittance(&case);
        let meas = default_meter_set(&case).unwrap();
        let noise = NoiseModel::new(0.0067, 42).unwrap();
        let test = generate_dataset(&case, &meas, 1000, (0.8, 1.2), &noise, Split::Test).unwrap();
        let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), 0.01).unwrap();
        let flat = StateVector::flat(case.n_buses(), case.slack());
        let mut j_sum = 0.0;
        let mut flags = 0;
        let mut acc_v = 0;
        let mut acc_t = 0;
        let mut mare_v_sum = 0.0;
        let mut mare_t_sum = 0.0;
        for r in &test.records {
            let est = estimate_wls(&r.z_noisy, &meas, &adm, &flat).unwrap();
            let j = residual_j(&r.z_noisy, &est, &meas, &adm);
            j_sum += j;
            if j > detector.tau { flags += 1; }
            let mv = mare_vm(&est, &r.x_true);
            let mt = mare_va(&est, &r.x_true);
            mare_v_sum += mv;
            mare_t_sum += mt;
            if mv <= 0.01 { acc_v += 1; }
            if mt <= 0.05 { acc_t += 1; }
        }
        println!(
            "{sys}: meanJ={:.1} flag={:.1}% | WLS-estimator MARE(V)={:.2e} acc(V)={:.1}% MARE(th)={:.2e} acc(th)={:.1}%",
            j_sum / 1000.0, flags as f64 / 10.0,
            mare_v_sum / 1000.0, acc_v as f64 / 10.0,
            mare_t_sum / 1000.0, acc_t as f64 / 10.0,
        );
    }
}
