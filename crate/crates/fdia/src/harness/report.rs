//! Machine-readable experiment outputs: per-instance JSON-lines files,
//! a summary CSV over grid cells, and plot-ready CSVs for error CDFs and
//! meter-frequency curves.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{meter_frequency, AttackMetrics, InstanceRecord, ScenarioConfig};

/// One summary row per grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub scenario: String,
    pub ratio: f64,
    pub level: f64,
    pub algorithm: String,
    pub success: f64,
    pub success_std: f64,
    pub mare_theta: f64,
    pub mae_theta: f64,
    pub mean_nfe: f64,
    pub max_nfe: usize,
    pub mean_time_s: f64,
}

impl SummaryRow {
    pub fn new(config: &ScenarioConfig, metrics: &AttackMetrics) -> Self {
        SummaryRow {
            system: config.system.clone(),
            scenario: match config.scenario {
                crate::harness::ScenarioKind::AnyK => "any_k".into(),
                crate::harness::ScenarioKind::SpecificK => "specific_k".into(),
            },
            ratio: config.ratio,
            level: config.level,
            algorithm: config.algorithm.name().into(),
            success: metrics.success_probability,
            success_std: metrics.success_probability_std,
            mare_theta: metrics.mare_theta,
            mae_theta: metrics.mae_theta,
            mean_nfe: metrics.mean_nfe,
            max_nfe: metrics.max_nfe,
            mean_time_s: metrics.mean_time_s,
        }
    }
}

pub fn write_records(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

const SUMMARY_HEADER: &str =
    "system,scenario,ratio,level,algorithm,success,success_std,mare_theta,mae_theta,mean_nfe,max_nfe,mean_time_s";

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.system,
            row.scenario,
            row.ratio,
            row.level,
            row.algorithm,
            row.success,
            row.success_std,
            row.mare_theta,
            row.mae_theta,
            row.mean_nfe,
            row.max_nfe,
            row.mean_time_s,
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty summary file".into()))?;
    if header != SUMMARY_HEADER {
        return Err(Error::Config("unexpected summary header".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Config(format!(
                "summary row has {} fields, expected 12",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad number `{s}` in summary")))
        };
        rows.push(SummaryRow {
            system: fields[0].to_string(),
            scenario: fields[1].to_string(),
            ratio: parse(fields[2])?,
            level: parse(fields[3])?,
            algorithm: fields[4].to_string(),
            success: parse(fields[5])?,
            success_std: parse(fields[6])?,
            mare_theta: parse(fields[7])?,
            mae_theta: parse(fields[8])?,
            mean_nfe: parse(fields[9])?,
            max_nfe: parse(fields[10])? as usize,
            mean_time_s: parse(fields[11])?,
        });
    }
    Ok(rows)
}

/// Per-cell CDF of the achieved angle shifts over delivered attacks:
/// sorted values with cumulative probabilities, ready to plot.
pub fn write_error_cdf_csv(path: &Path, label: &str, records: &[InstanceRecord]) -> Result<()> {
    let mut values: Vec<f64> = records
        .iter()
        .filter(|r| r.verified)
        .map(|r| r.objective)
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("objectives are finite"));
    let mut out = String::from("label,objective,cum_prob\n");
    let n = values.len();
    for (i, value) in values.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", label, value, (i + 1) as f64 / n as f64));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Ranked meter-frequency table (Fig. 3-style plot data).
pub fn write_meter_frequency_csv(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    let table = meter_frequency(records);
    let mut out = String::from("rank,meter,count,cumulative_share\n");
    for (rank, (meter, count, share)) in table.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", rank + 1, meter, count, share));
    }
    std::fs::write(path, out)?;
    Ok(())
}
