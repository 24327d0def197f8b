//! Parser for a strict subset of the MATPOWER case format.
//!
//! Only `baseMVA` and the `bus`, `gen` and `branch` matrices are accepted.
//! Comments and arithmetic expressions are rejected rather than skipped, so
//! a file that parses is exactly reproducible from the parsed data.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::case::{Branch, Bus, BusType, Generator, GridCase};

const DEG: f64 = std::f64::consts::PI / 180.0;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| {
        parse_err(
            line,
            format!("`{tok}` is not a number (arithmetic expressions are not supported)"),
        )
    })
}

#[derive(Default)]
struct RawCase {
    name: String,
    base_mva: Option<f64>,
    bus: Option<Vec<Vec<f64>>>,
    gen: Option<Vec<Vec<f64>>>,
    branch: Option<Vec<Vec<f64>>>,
}

/// Parses MATPOWER-style case text into a validated [`GridCase`].
///
/// External bus numbers are remapped to dense indices in file order; all
/// quantities are converted to per-unit on the case base and radians.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let mut raw = RawCase::default();
    let mut lines = text.lines().enumerate().peekable();

    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        if line.contains('%') {
            return Err(parse_err(lineno, "comments are not supported"));
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            let rest = rest.trim();
            let name = rest
                .strip_prefix("mpc")
                .map(str::trim)
                .and_then(|s| s.strip_prefix('='))
                .map(str::trim)
                .ok_or_else(|| parse_err(lineno, "malformed function header"))?;
            raw.name = name.trim_end_matches(';').trim().to_string();
        } else if line.starts_with("mpc.version") {
            // accepted and ignored; the subset has a single layout
        } else if let Some(rest) = line.strip_prefix("mpc.baseMVA") {
            let value = rest
                .trim()
                .strip_prefix('=')
                .map(str::trim)
                .ok_or_else(|| parse_err(lineno, "expected `= <number>;`"))?;
            let value = value.trim_end_matches(';').trim();
            raw.base_mva = Some(parse_number(value, lineno)?);
        } else if let Some(rest) = line.strip_prefix("mpc.") {
            let (field, after) = rest
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, "expected `mpc.<field> = [`"))?;
            let field = field.trim();
            if !matches!(field, "bus" | "gen" | "branch") {
                return Err(parse_err(
                    lineno,
                    format!("unsupported field `{field}` (only bus, gen, branch, baseMVA)"),
                ));
            }
            let after = after.trim();
            if !after.starts_with('[') {
                return Err(parse_err(lineno, "expected `[` to open a matrix"));
            }
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut body = after[1..].to_string();
            let mut body_line = lineno;
            loop {
                let (chunk, done) = match body.find(']') {
                    Some(pos) => (body[..pos].to_string(), true),
                    None => (body.clone(), false),
                };
                for row_text in chunk.split(';') {
                    let toks: Vec<&str> = row_text.split_whitespace().collect();
                    if toks.is_empty() {
                        continue;
                    }
                    let mut row = Vec::with_capacity(toks.len());
                    for tok in toks {
                        row.push(parse_number(tok, body_line)?);
                    }
                    rows.push(row);
                }
                if done {
                    break;
                }
                match lines.next() {
                    Some((idx2, next)) => {
                        if next.contains('%') {
                            return Err(parse_err(idx2 + 1, "comments are not supported"));
                        }
                        body = next.to_string();
                        body_line = idx2 + 1;
                    }
                    None => return Err(parse_err(body_line, "unterminated matrix")),
                }
            }
            let slot = match field {
                "bus" => &mut raw.bus,
                "gen" => &mut raw.gen,
                "branch" => &mut raw.branch,
                _ => unreachable!(),
            };
            if slot.is_some() {
                return Err(parse_err(lineno, format!("duplicate matrix `{field}`")));
            }
            *slot = Some(rows);
        } else {
            return Err(parse_err(lineno, format!("unrecognized statement `{line}`")));
        }
    }

    build_case(raw)
}

fn build_case(raw: RawCase) -> Result<GridCase> {
    let base_mva = raw
        .base_mva
        .ok_or_else(|| parse_err(0, "missing mpc.baseMVA"))?;
    let bus_rows = raw.bus.ok_or_else(|| parse_err(0, "missing mpc.bus matrix"))?;
    let gen_rows = raw.gen.ok_or_else(|| parse_err(0, "missing mpc.gen matrix"))?;
    let branch_rows = raw
        .branch
        .ok_or_else(|| parse_err(0, "missing mpc.branch matrix"))?;

    let mut id_map: HashMap<usize, usize> = HashMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, row) in bus_rows.iter().enumerate() {
        if row.len() < 13 {
            return Err(parse_err(0, format!("bus row {} has {} columns, need 13", i + 1, row.len())));
        }
        let ext_id = row[0] as usize;
        if id_map.insert(ext_id, i).is_some() {
            return Err(Error::Validation(format!("duplicate bus id {ext_id}")));
        }
        let bus_type = match row[1] as usize {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Slack,
            other => {
                return Err(Error::Validation(format!(
                    "bus {ext_id} has unsupported type code {other}"
                )))
            }
        };
        buses.push(Bus {
            id: i,
            bus_type,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vm_init: row[7],
            va_init: row[8] * DEG,
        });
    }

    let lookup = |ext: f64, what: &str| -> Result<usize> {
        id_map
            .get(&(ext as usize))
            .copied()
            .ok_or_else(|| Error::Validation(format!("{what} references unknown bus {ext}")))
    };

    let mut generators = Vec::with_capacity(gen_rows.len());
    for (i, row) in gen_rows.iter().enumerate() {
        if row.len() < 10 {
            return Err(parse_err(0, format!("gen row {} has {} columns, need 10", i + 1, row.len())));
        }
        if row[7] == 0.0 {
            return Err(Error::Validation(format!(
                "gen row {} is out of service (unsupported)",
                i + 1
            )));
        }
        generators.push(Generator {
            bus: lookup(row[0], "generator")?,
            pg: row[1] / base_mva,
            qg: row[2] / base_mva,
            vg: row[5],
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (i, row) in branch_rows.iter().enumerate() {
        if row.len() < 11 {
            return Err(parse_err(0, format!("branch row {} has {} columns, need 11", i + 1, row.len())));
        }
        if row[10] == 0.0 {
            return Err(Error::Validation(format!(
                "branch row {} is out of service (unsupported)",
                i + 1
            )));
        }
        let ratio = if row[8] == 0.0 { 1.0 } else { row[8] };
        branches.push(Branch {
            from: lookup(row[0], "branch")?,
            to: lookup(row[1], "branch")?,
            r: row[2],
            x: row[3],
            b_charging: row[4],
            tap_ratio: ratio,
            phase_shift: row[9] * DEG,
        });
    }

    GridCase::new(raw.name, base_mva, buses, branches, generators)
}

/// Writes a [`GridCase`] back to the case-text subset (MW and degrees),
/// suitable as a fixture for [`parse_case`].
pub fn to_case_string(case: &GridCase) -> String {
    let mut out = String::new();
    out.push_str(&format!("function mpc = {}\n", case.name));
    out.push_str("mpc.version = '2';\n");
    out.push_str(&format!("mpc.baseMVA = {};\n", case.base_mva));

    out.push_str("mpc.bus = [\n");
    for bus in &case.buses {
        let code = match bus.bus_type {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        };
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t0\t1\t1.1\t0.9;\n",
            bus.id + 1,
            code,
            bus.pd * case.base_mva,
            bus.qd * case.base_mva,
            bus.gs * case.base_mva,
            bus.bs * case.base_mva,
            bus.vm_init,
            bus.va_init / DEG,
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.gen = [\n");
    for gen in &case.generators {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t1\t0\t0;\n",
            gen.bus + 1,
            gen.pg * case.base_mva,
            gen.qg * case.base_mva,
            gen.vg,
            case.base_mva,
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.branch = [\n");
    for br in &case.branches {
        let ratio = if br.tap_ratio == 1.0 { 0.0 } else { br.tap_ratio };
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t1\t-360\t360;\n",
            br.from + 1,
            br.to + 1,
            br.r,
            br.x,
            br.b_charging,
            ratio,
            br.phase_shift / DEG,
        ));
    }
    out.push_str("];\n");
    out
}
