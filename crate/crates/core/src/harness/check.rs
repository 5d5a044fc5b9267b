use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::orchestrator::StartKind;

use super::{aggregate, BenchResult, HarnessError, Row};

/// Visible control plane must stay below this share of end-to-end time for
/// cold and warm starts.
pub const OVERHEAD_LIMIT: f64 = 0.05;

/// Visible control plane of a fork start must stay below this, in µs.
pub const FORK_LIMIT_US: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub scheme: String,
    pub start: StartKind,
    /// Share of end-to-end time for cold and warm, µs for fork.
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl fmt::Display for RuleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        match self.start {
            StartKind::Fork => write!(
                f,
                "{verdict} {} fork: visible control plane {:.2}us (limit {:.0}us)",
                self.scheme, self.value, self.limit
            ),
            kind => write!(
                f,
                "{verdict} {} {kind}: visible control plane {:.2}% of end-to-end (limit {:.0}%)",
                self.scheme,
                self.value * 100.0,
                self.limit * 100.0
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub rules: Vec<RuleOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rules.iter().all(|r| r.pass)
    }

    pub fn scheme_passed(&self, scheme: &str) -> bool {
        self.rules
            .iter()
            .filter(|r| r.scheme == scheme)
            .all(|r| r.pass)
    }

    pub fn rule(&self, scheme: &str, start: StartKind) -> Option<&RuleOutcome> {
        self.rules
            .iter()
            .find(|r| r.scheme == scheme && r.start == start)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Applies the overhead rules to every scheme that has control-plane
/// results. Each such scheme needs all three start kinds.
pub fn requirement_check(results: &[BenchResult]) -> Result<CheckReport, HarnessError> {
    let mut by_scheme: BTreeMap<&str, BTreeMap<&str, Vec<Row>>> = BTreeMap::new();
    for r in results {
        if !r.scenario.starts_with("control-plane/") {
            continue;
        }
        by_scheme
            .entry(r.scheme.as_str())
            .or_default()
            .entry(r.scenario.as_str())
            .or_default()
            .extend(r.rows.iter().cloned());
    }
    if by_scheme.is_empty() {
        return Err(HarnessError::MissingScenario(
            "control-plane results".into(),
        ));
    }
    let mut report = CheckReport::default();
    for (scheme, scenarios) in by_scheme {
        for start in StartKind::ALL {
            let key = format!("control-plane/{start}");
            let agg = scenarios
                .get(key.as_str())
                .and_then(|rows| aggregate(rows))
                .ok_or_else(|| HarnessError::MissingScenario(format!("{scheme} {key}")))?;
            let visible = agg.visible_control_plane_us.unwrap_or(0.0);
            let e2e = agg.end_to_end_us.unwrap_or(0.0);
            let (value, limit) = match start {
                StartKind::Fork => (visible, FORK_LIMIT_US),
                _ => (if e2e > 0.0 { visible / e2e } else { 0.0 }, OVERHEAD_LIMIT),
            };
            report.rules.push(RuleOutcome {
                scheme: scheme.to_owned(),
                start,
                value,
                limit,
                pass: value < limit,
            });
        }
    }
    Ok(report)
}
