//! Command-line driver for the false-data-injection testbed: dataset
//! generation, estimator training and evaluation, attack runs and report
//! aggregation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fdia::ann::{
    evaluate_model, load_checkpoint, save_checkpoint, train, AnnModel, CheckpointMeta, LossKind,
    TrainingConfig,
};
use fdia::attack::de::DeConfig;
use fdia::attack::slsqp::SqpConfig;
use fdia::grid::{build_admittance, default_meter_set, parse_case, GridCase};
use fdia::harness::report::{
    read_records, read_summary_csv, write_error_cdf_csv, write_meter_frequency_csv, write_records,
    write_summary_csv, SummaryRow,
};
use fdia::harness::{run_scenario, Algorithm, Artifacts, ScenarioConfig, ScenarioKind};
use fdia::powerflow::{
    generate_dataset, load_dataset_dir, save_dataset_dir, DatasetManifest, NoiseModel, Split,
};
use fdia::wls::Detector;

#[derive(Parser)]
#[command(name = "fdia", version, about = "False data injection testbed for neural AC state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test state-measurement datasets for a grid case
    GenData(GenDataArgs),
    /// Train the neural state estimator on a generated dataset
    Train(TrainArgs),
    /// Evaluate a trained estimator on the test split
    EvalSe(EvalArgs),
    /// Run an attack scenario against a trained estimator
    Attack(AttackArgs),
    /// Aggregate attack runs into summary and plot-ready files
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// case file path, or a bundled system (ieee9, ieee14, ieee30)
    #[arg(long)]
    case: String,
    /// number of training samples
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    /// number of test samples
    #[arg(long, default_value_t = 1_000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// relative reading-noise standard deviation
    #[arg(long, default_value_t = 0.0067)]
    sigma: f64,
    /// load-factor range, e.g. 0.8:1.2
    #[arg(long, default_value = "0.8:1.2")]
    load_range: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// training loss: wls or wls+mse
    #[arg(long, default_value = "wls")]
    loss: String,
    /// penalty balance constant for wls+mse
    #[arg(long, default_value_t = 100.0)]
    c: f64,
    #[arg(long, default_value_t = 1500)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// detector significance level
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    De,
    Slsqp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "any-k")]
    AnyK,
    #[value(name = "specific-k")]
    SpecificK,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    algorithm: AlgorithmArg,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// meter-compromise ratio R (fraction of meters)
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    /// injection level (relative bound on each touched meter)
    #[arg(long, default_value_t = 0.1)]
    level: f64,
    /// specific meter set: comma list like 3,7,12 or `random:<ratio>`
    #[arg(long)]
    meters: Option<String>,
    /// DE population size
    #[arg(long, default_value_t = 400)]
    pop: usize,
    /// DE generation cap
    #[arg(long, default_value_t = 400)]
    gens: usize,
    /// SQP iteration cap
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// SQP restarts
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// detector significance level
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// run directory for records and summary
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// directory containing one or more attack run directories
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::EvalSe(args) => eval_se(args),
        Command::Attack(args) => attack_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn load_case(spec: &str) -> Result<GridCase> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading case file {}", path.display()))?;
        if spec.ends_with(".json") {
            Ok(GridCase::from_canonical_json(&text)?)
        } else {
            Ok(parse_case(&text)?)
        }
    } else {
        Ok(fdia::cases::by_name(spec)?)
    }
}

fn parse_load_range(text: &str) -> Result<(f64, f64)> {
    let (lo, hi) = text
        .split_once(':')
        .context("load range must look like 0.8:1.2")?;
    Ok((lo.parse()?, hi.parse()?))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let case = load_case(&args.case)?;
    let load_range = parse_load_range(&args.load_range)?;
    let meas = default_meter_set(&case)?;
    let noise = NoiseModel::new(args.sigma, args.seed)?;
    let train_set = generate_dataset(&case, &meas, args.train, load_range, &noise, Split::Train)?;
    let test_noise = NoiseModel::new(args.sigma, args.seed.wrapping_add(1))?;
    let test_set =
        generate_dataset(&case, &meas, args.test, load_range, &test_noise, Split::Test)?;
    let manifest = DatasetManifest {
        case_name: case.name.clone(),
        case_digest: case.digest(),
        measurement: meas.clone(),
        seed: args.seed,
        sigma_rel: args.sigma,
        load_range,
        n_train: args.train,
        n_test: args.test,
    };
    save_dataset_dir(&args.out, &case, &manifest, &train_set, &test_set)?;
    println!(
        "wrote {} train + {} test records for {} ({} meters) to {}",
        train_set.len(),
        test_set.len(),
        case.name,
        meas.n_meters(),
        args.out.display()
    );
    Ok(())
}

fn parse_loss(text: &str) -> Result<LossKind> {
    match text {
        "wls" => Ok(LossKind::Wls),
        "wls+mse" | "wls_plus_mse" => Ok(LossKind::WlsPlusMse),
        other => bail!("unknown loss `{other}` (expected wls or wls+mse)"),
    }
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let (case, manifest, train_set, _test) = load_dataset_dir(&args.data)?;
    let adm = build_admittance(&case);
    let meas = &manifest.measurement;
    let mut ann = AnnModel::with_default_architecture(
        meas.n_meters(),
        case.n_buses(),
        case.slack(),
        args.seed,
    )?;
    let config = TrainingConfig {
        loss_kind: parse_loss(&args.loss)?,
        c: args.c,
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
    };
    let start = std::time::Instant::now();
    let history = train(&mut ann, &train_set, &config, meas, &adm)?;
    let elapsed = start.elapsed().as_secs_f64();
    let final_loss = *history.epoch_loss.last().expect("at least one epoch");
    let meta = CheckpointMeta::from_config(&config, &case.name, &case.digest(), final_loss);
    save_checkpoint(&args.out, &ann, &meta)?;
    println!(
        "trained {} epochs in {:.0}s: loss {:.3} -> {:.3}; checkpoint at {}",
        config.epochs,
        elapsed,
        history.epoch_loss[0],
        final_loss,
        args.out.display()
    );
    Ok(())
}

fn eval_se(args: EvalArgs) -> Result<()> {
    let (case, manifest, _train, test) = load_dataset_dir(&args.data)?;
    let checkpoint = load_checkpoint(&args.model)?;
    if checkpoint.meta.case_digest != case.digest() {
        bail!("checkpoint was trained on a different case than this dataset");
    }
    let adm = build_admittance(&case);
    let meas = &manifest.measurement;
    let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), args.alpha)?;
    let metrics = evaluate_model(&checkpoint.model, &test, &detector, meas, &adm)?;
    println!("system          : {}", case.name);
    println!("test samples    : {}", metrics.samples);
    println!("MARE |V|        : {:.3e}", metrics.mare_vm);
    println!("accuracy |V|    : {:.1}%", 100.0 * metrics.accuracy_vm);
    println!("MARE theta      : {:.3e}", metrics.mare_va);
    println!("accuracy theta  : {:.1}%", 100.0 * metrics.accuracy_va);
    println!("bad-data rate   : {:.1}%", 100.0 * metrics.bad_data_rate);
    println!("detector        : tau = {:.2} (K = {}, alpha = {})", detector.tau, detector.dof, detector.alpha);
    Ok(())
}

fn parse_meters(text: &str, n_meters: usize) -> Result<(Option<Vec<usize>>, Option<f64>)> {
    if let Some(ratio) = text.strip_prefix("random:") {
        return Ok((None, Some(ratio.parse()?)));
    }
    let meters: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|tok| tok.trim().parse()).collect();
    let meters = meters.context("meter list must be comma-separated indices")?;
    if meters.iter().any(|&m| m >= n_meters) {
        bail!("meter index out of range (the set has {n_meters} meters)");
    }
    Ok((Some(meters), None))
}

fn attack_cmd(args: AttackArgs) -> Result<()> {
    let (case, manifest, _train, test) = load_dataset_dir(&args.data)?;
    let checkpoint = load_checkpoint(&args.model)?;
    if checkpoint.meta.case_digest != case.digest() {
        bail!("checkpoint was trained on a different case than this dataset");
    }
    let adm = build_admittance(&case);
    let meas = &manifest.measurement;
    let detector = Detector::from_alpha(meas.n_meters(), case.n_buses(), args.alpha)?;

    let algorithm = match args.algorithm {
        AlgorithmArg::De => Algorithm::De(DeConfig {
            pop_size: args.pop,
            max_generations: args.gens,
            ..DeConfig::default()
        }),
        AlgorithmArg::Slsqp => Algorithm::Slsqp(SqpConfig {
            max_iterations: args.iters,
            restarts: args.restarts,
            ..SqpConfig::default()
        }),
    };
    let scenario = match args.scenario {
        ScenarioArg::AnyK => ScenarioKind::AnyK,
        ScenarioArg::SpecificK => ScenarioKind::SpecificK,
    };
    let (fixed_meters, ratio_override) = match &args.meters {
        Some(text) => parse_meters(text, meas.n_meters())?,
        None => (None, None),
    };
    let ratio = match (&fixed_meters, ratio_override) {
        (Some(set), _) => set.len() as f64 / meas.n_meters() as f64,
        (None, Some(r)) => r,
        (None, None) => args.ratio,
    };

    let config = ScenarioConfig {
        system: case.name.clone(),
        scenario,
        ratio,
        level: args.level,
        instances: args.instances,
        repeats: args.repeats,
        algorithm,
        seed: args.seed,
        fixed_meters,
    };
    let artifacts = Artifacts {
        case: &case,
        meas,
        adm: &adm,
        detector: &detector,
        ann: &checkpoint.model,
        test: &test,
    };
    let (metrics, records) = run_scenario(&config, &artifacts)?;

    std::fs::create_dir_all(&args.out)?;
    write_records(&args.out.join("records.jsonl"), &records)?;
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    println!(
        "{} {} R={:.2} eta={:.2}: success {:.1}% (std {:.1}%), MARE(theta) {:.3e}, mean NFE {:.0}, mean time {:.2}s",
        config.system,
        config.algorithm.name(),
        config.ratio,
        config.level,
        100.0 * metrics.success_probability,
        100.0 * metrics.success_probability_std,
        metrics.mare_theta,
        metrics.mean_nfe,
        metrics.mean_time_s
    );
    println!("records written to {}", args.out.display());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    // a run directory holds config.json + records.jsonl; accept either a
    // single run or a directory of runs
    let mut run_dirs = Vec::new();
    if args.runs.join("records.jsonl").exists() {
        run_dirs.push(args.runs.clone());
    } else {
        for entry in std::fs::read_dir(&args.runs)? {
            let path = entry?.path();
            if path.join("records.jsonl").exists() {
                run_dirs.push(path);
            }
        }
    }
    if run_dirs.is_empty() {
        bail!("no run directories with records.jsonl under {}", args.runs.display());
    }
    run_dirs.sort();

    let mut rows = Vec::new();
    for dir in &run_dirs {
        let config: ScenarioConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let records = read_records(&dir.join("records.jsonl"))?;
        let metrics = fdia::harness::AttackMetrics::from_records(&records, config.repeats)?;
        rows.push(SummaryRow::new(&config, &metrics));

        let label = format!(
            "{}-{}-r{}-l{}",
            config.system,
            config.algorithm.name(),
            config.ratio,
            config.level
        );
        write_error_cdf_csv(&dir.join("error_cdf.csv"), &label, &records)?;
        write_meter_frequency_csv(&dir.join("meter_frequency.csv"), &records)?;
    }

    match args.format {
        ReportFormat::Csv => {
            let path = args.runs.join("summary.csv");
            write_summary_csv(&path, &rows)?;
            // sanity: the file must read back to the same aggregates
            let back = read_summary_csv(&path)?;
            if back.len() != rows.len() {
                bail!("summary round-trip length mismatch");
            }
            println!("wrote {} with {} rows", path.display(), rows.len());
        }
        ReportFormat::Json => {
            let path = args.runs.join("summary.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
            println!("wrote {} with {} rows", path.display(), rows.len());
        }
    }
    Ok(())
}
