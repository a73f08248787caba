//! Report emission: `results.json` for machines, `table.txt` for eyes,
//! `km.csv` for survival-curve plotting. The JSON carries the config hash
//! and seed needed to reproduce a run exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::cv::EvalResult;
use crate::error::{Error, Result};
use crate::metrics::km_curve;

pub const RESULTS_FILE: &str = "results.json";
pub const TABLE_FILE: &str = "table.txt";
pub const KM_FILE: &str = "km.csv";
const TABLE_HEADER: &str = "variant | cohort | mean±SD | (*)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub results: Vec<EvalResult>,
}

/// Hex SHA-256 of the canonical TOML form of the config.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let toml = config.to_toml()?;
    Ok(format!("{:x}", Sha256::digest(toml.as_bytes())))
}

pub fn build_report(config: &RunConfig, results: Vec<EvalResult>) -> Result<RunReport> {
    if results.is_empty() {
        return Err(Error::Domain("report needs at least one result".to_string()));
    }
    Ok(RunReport {
        config_hash: config_hash(config)?,
        seed: config.seed,
        results,
    })
}

/// Significance marker: strictly below 0.05.
fn star(p: Option<f64>) -> &'static str {
    match p {
        Some(p) if p < 0.05 => "(*)",
        _ => "",
    }
}

pub fn format_table(report: &RunReport) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in &report.results {
        out.push_str(&format!(
            "{} | {} | {:.4} ± {:.4} | {}\n",
            r.variant,
            r.cohort_id,
            r.c_mean,
            r.c_sd,
            star(r.logrank_p)
        ));
    }
    out
}

pub fn format_km_csv(report: &RunReport) -> Result<String> {
    let mut out = String::from("variant,group,time,survival\n");
    for r in &report.results {
        for (group, records) in [("high", &r.high_group), ("low", &r.low_group)] {
            if records.is_empty() {
                continue;
            }
            for (time, survival) in km_curve(records)? {
                out.push_str(&format!("{},{group},{time},{survival}\n", r.variant));
            }
        }
    }
    Ok(out)
}

/// Write `results.json`, `table.txt`, and `km.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))?;
    std::fs::write(dir.join(RESULTS_FILE), json)?;
    std::fs::write(dir.join(TABLE_FILE), format_table(report))?;
    std::fs::write(dir.join(KM_FILE), format_km_csv(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("report {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub variant: String,
    pub cohort: String,
    pub mean: f64,
    pub sd: f64,
    pub starred: bool,
}

/// Parse `table.txt` back into rows; inverse of `format_table` up to the
/// printed precision.
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == TABLE_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "unexpected table header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(" | ").collect();
        if cells.len() != 4 {
            return Err(Error::Parse(format!("malformed table row '{line}'")));
        }
        let (mean_text, sd_text) = cells[2]
            .split_once(" ± ")
            .ok_or_else(|| Error::Parse(format!("malformed mean±SD cell '{}'", cells[2])))?;
        let mean = mean_text
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad mean '{mean_text}'")))?;
        let sd = sd_text
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad SD '{sd_text}'")))?;
        let starred = match cells[3].trim_end() {
            "(*)" => true,
            "" => false,
            other => return Err(Error::Parse(format!("bad marker '{other}'"))),
        };
        rows.push(TableRow {
            variant: cells[0].to_string(),
            cohort: cells[1].to_string(),
            mean,
            sd,
            starred,
        });
    }
    Ok(rows)
}
