use std::time::Duration;

use crate::orchestrator::{
    LatencyClass, Orchestrator, RequestSpec, ScenarioConfig, Scheme, StartKind,
};

use super::{aggregate, config_hash, BenchResult, HarnessError, Row, RowKind};

/// Idle time between the warm-up request and the measured one.
const SETTLE: Duration = Duration::from_secs(1);

const FUNCTION: &str = "noop";

/// Drives `repeats` requests of the given start kind, each on a fresh
/// orchestrator seeded with `seed + run`. Warm and fork runs are preceded by
/// an unmeasured cold start that creates the container.
pub fn bench_control_plane(
    config: &ScenarioConfig,
    start: StartKind,
    scheme: Scheme,
    repeats: u32,
    seed: u64,
) -> Result<BenchResult, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::ZeroRepeats);
    }
    if !config.handlers.iter().any(|h| h.function == FUNCTION) {
        return Err(HarnessError::Scenario(format!(
            "config binds no `{FUNCTION}` handler"
        )));
    }
    let scenario = format!("control-plane/{start}");
    let mut rows = Vec::with_capacity(repeats as usize + 1);
    for run in 0..repeats {
        let mut orch = Orchestrator::new(config.clone(), scheme, seed.wrapping_add(run as u64))?;
        let class = match start {
            StartKind::Fork => LatencyClass::Fast,
            _ => LatencyClass::Normal,
        };
        if start != StartKind::Cold {
            orch.handle_request(&RequestSpec::new("bench", FUNCTION, LatencyClass::Normal))?;
            orch.clock().advance(SETTLE);
        }
        let out = orch.handle_request(&RequestSpec::new("bench", FUNCTION, class))?;
        if out.start != start {
            return Err(HarnessError::Scenario(format!(
                "expected a {start} start, got {}",
                out.start
            )));
        }
        if let Err(e) = out.result {
            return Err(HarnessError::Scenario(format!("handler failed: {e}")));
        }
        let t = out.timing;
        rows.push(Row {
            run: Some(run),
            task_launch_us: Some(t.task_launch),
            visible_control_plane_us: Some(t.visible_control_plane),
            data_exchange_us: Some(t.data_exchange),
            end_to_end_us: Some(t.end_to_end),
            ..Row::empty(&scenario, scheme.name(), seed, RowKind::Raw)
        });
    }
    rows.extend(aggregate(&rows));
    Ok(BenchResult {
        scenario,
        scheme: scheme.name().to_owned(),
        seed,
        config_hash: config_hash(config),
        repeats,
        rows,
    })
}
