//! Bundled IEEE test systems in the case-text subset.
//!
//! The 9-, 14- and 30-bus systems are the standard public test networks;
//! they are embedded so experiments and tests need no external files.

use crate::error::Result;
use crate::grid::{parse_case, GridCase};

pub const IEEE9: &str = include_str!("../cases/case9.m");
pub const IEEE14: &str = include_str!("../cases/case14.m");
pub const IEEE30: &str = include_str!("../cases/case30.m");

pub fn ieee9() -> GridCase {
    parse_case(IEEE9).expect("bundled 9-bus case parses")
}

pub fn ieee14() -> GridCase {
    parse_case(IEEE14).expect("bundled 14-bus case parses")
}

pub fn ieee30() -> GridCase {
    parse_case(IEEE30).expect("bundled 30-bus case parses")
}

/// Looks a bundled system up by name (`ieee9`, `ieee14`, `ieee30`).
pub fn by_name(name: &str) -> Result<GridCase> {
    match name {
        "ieee9" | "case9" | "9" => Ok(ieee9()),
        "ieee14" | "case14" | "14" => Ok(ieee14()),
        "ieee30" | "case30" | "30" => Ok(ieee30()),
        other => Err(crate::error::Error::Config(format!(
            "unknown bundled case `{other}` (expected ieee9, ieee14 or ieee30)"
        ))),
    }
}
