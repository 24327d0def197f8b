use fdia::ann::{evaluate_model, train, AnnModel, LossKind, TrainingConfig};
use fdia::attack::de::DeConfig;
use fdia::attack::slsqp::SqpConfig;
use fdia::grid::{build_admittance, default_meter_set};
use fdia::harness::{compare_algorithms, run_scenario, Algorithm, Artifacts, ScenarioConfig, ScenarioKind};
use fdia::powerflow::{generate_dataset, NoiseModel, Split};
use fdia::wls::Detector;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sys = args.get(1).map(|s| s.as_str()).unwrap_or("ieee9");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10000);
    let loss = match args.get(5).map(|s| s.as_str()) {
        Some("mse") => LossKind::WlsPlusMse,
        _ => LossKind::Wls,
    };
    let do_attack = args.get(6).map(|s| s == "attack").unwrap_or(false);

    let case = fdia::cases::by_name(sys).unwrap();
    let adm = build_admittance(&case);
    let meas = default_meter_set(&case).unwrap();
    let noise = NoiseModel::new(0.0067, 42).unwrap();
    let data_train = generate_dataset(&case, &meas, n_train, (0.8, 1.2), &noise, Split::Train).unwrap();
    let data_test = generate_dataset(&case, &meas, 1000, (0.8, 1.2), &noise, Split::Test).unwrap();
    let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), 0.01).unwrap();

    let free = 2 * case.n_buses() - 1;
    let mut ann = AnnModel::new(
        vec![meas.n_meters(), 4 * free, 4 * free, free],
        case.n_buses(), case.slack(), 7).unwrap();
    let config = TrainingConfig { loss_kind: loss, c: 100.0, epochs, batch_size: 64, learning_rate: lr, seed: 7 };
    let t1 = Instant::now();
    let hist = train(&mut ann, &data_train, &config, &meas, &adm).unwrap();
    let train_time = t1.elapsed().as_secs_f64();
    let metrics = evaluate_model(&ann, &data_test, &detector, &meas, &adm).unwrap();
    println!(
        "{sys} ep={epochs} {loss:?}: {:.0}s | lossN {:.2} | MARE(V) {:.2e} acc(V) {:.1}% MARE(th) {:.2e} acc(th) {:.1}% bad {:.1}%",
        train_time, hist.epoch_loss.last().unwrap(),
        metrics.mare_vm, 100.0 * metrics.accuracy_vm,
        metrics.mare_va, 100.0 * metrics.accuracy_va, 100.0 * metrics.bad_data_rate
    );

    if do_attack {
        let artifacts = Artifacts { case: &case, meas: &meas, adm: &adm, detector: &detector, ann: &ann, test: &data_test };
        // criterion-6 style: any-k R=10% eta=10%, N=400 G=400
        let t = Instant::now();
        let cfg = ScenarioConfig {
            system: sys.into(), scenario: ScenarioKind::AnyK, ratio: 0.10, level: 0.10,
            instances: 100, repeats: 1,
            algorithm: Algorithm::De(DeConfig { pop_size: 400, max_generations: 400, ..DeConfig::default() }),
            seed: 6, fixed_meters: None,
        };
        let (m, recs) = run_scenario(&cfg, &artifacts).unwrap();
        let slowest = recs.iter().map(|r| r.time_s).fold(0.0, f64::max);
        println!("anyk R10 e10: success {:.0}% mean_nfe {:.0} max_nfe {} slowest {:.2}s total {:.0}s",
            100.0 * m.success_probability, m.mean_nfe, m.max_nfe, slowest, t.elapsed().as_secs_f64());

        // criterion-8 style with R=20%
        let cfg8 = ScenarioConfig { ratio: 0.20, seed: 8, ..cfg.clone() };
        let t = Instant::now();
        let (m8, recs8) = run_scenario(&cfg8, &artifacts).unwrap();
        let slowest8 = recs8.iter().map(|r| r.time_s).fold(0.0, f64::max);
        println!("anyk R20 e10: success {:.0}% mean_nfe {:.0} slowest {:.2}s total {:.0}s",
            100.0 * m8.success_probability, m8.mean_nfe, slowest8, t.elapsed().as_secs_f64());

        // criterion-7 style: paired specific-k
        let de_cfg = ScenarioConfig {
            scenario: ScenarioKind::SpecificK, ratio: 0.10, seed: 7,
            algorithm: Algorithm::De(DeConfig { pop_size: 60, max_generations: 150, early_stop: Some(40), ..DeConfig::default() }),
            ..cfg.clone()
        };
        let t = Instant::now();
        let (_, de_recs) = run_scenario(&de_cfg, &artifacts).unwrap();
        let de_t = t.elapsed().as_secs_f64();
        let sqp_cfg = ScenarioConfig {
            algorithm: Algorithm::Slsqp(SqpConfig { max_iterations: 60, restarts: 3, ..SqpConfig::default() }),
            ..de_cfg.clone()
        };
        let t = Instant::now();
        let (_, sqp_recs) = run_scenario(&sqp_cfg, &artifacts).unwrap();
        let sqp_t = t.elapsed().as_secs_f64();
        let report = compare_algorithms(&de_recs, &sqp_recs).unwrap();
        println!("specific-k paired: DE mare {:.3e} ({:.0}s) vs SQP mare {:.3e} ({:.0}s), DE wins {:.0}%",
            report.mean_mare_first, de_t, report.mean_mare_second, sqp_t, 100.0 * report.first_win_rate);
    }
}
