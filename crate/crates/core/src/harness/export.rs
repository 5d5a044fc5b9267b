use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BenchResult, HarnessError, Row};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Guesses from the file extension; anything but `.json` is CSV.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

pub fn to_csv(results: &[BenchResult]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in results.iter().flat_map(|r| &r.rows) {
        w.serialize(row)
            .map_err(|e| HarnessError::Parse(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Parse(e.to_string()))
}

/// Regroups CSV rows into results. The config hash is not part of the CSV
/// and comes back empty.
pub fn from_csv(text: &str) -> Result<Vec<BenchResult>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out: Vec<BenchResult> = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| HarnessError::Parse(e.to_string()))?;
        let same = out.last().is_some_and(|r| {
            r.scenario == row.scenario && r.scheme == row.scheme && r.seed == row.seed
        });
        if !same {
            out.push(BenchResult {
                scenario: row.scenario.clone(),
                scheme: row.scheme.clone(),
                seed: row.seed,
                config_hash: String::new(),
                repeats: 0,
                rows: Vec::new(),
            });
        }
        out.last_mut().expect("pushed above").rows.push(row);
    }
    for r in &mut out {
        r.repeats = r.raw().filter_map(|x| x.run).collect::<BTreeSet<_>>().len() as u32;
    }
    Ok(out)
}

pub fn write_results(
    results: &[BenchResult],
    format: Format,
    path: &Path,
) -> Result<(), HarnessError> {
    if results.is_empty() || results.iter().all(|r| r.rows.is_empty()) {
        return Err(HarnessError::Empty);
    }
    let text = match format {
        Format::Csv => to_csv(results)?,
        Format::Json => {
            let mut s = serde_json::to_string_pretty(results)
                .map_err(|e| HarnessError::Parse(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    std::fs::write(path, text).map_err(|source| HarnessError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Reads results written by [`write_results`] in either format.
pub fn read_results(path: &Path) -> Result<Vec<BenchResult>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        if trimmed.starts_with('{') {
            let one: BenchResult =
                serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?;
            return Ok(vec![one]);
        }
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))
    } else {
        from_csv(&text)
    }
}
