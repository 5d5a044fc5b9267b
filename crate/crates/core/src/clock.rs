//! Virtual time.
//!
//! Every simulated cost is charged to a [`Timeline`], a logical thread of
//! execution that starts at some absolute virtual instant. Sequential work on
//! one timeline sums; parallel work is expressed by branching timelines and
//! joining them, which advances the parent to the latest branch.
//!
//! Time is kept as integer nanoseconds ([`Duration`]) so that sums of
//! microsecond costs with two decimals are exact.

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Converts fractional microseconds to a [`Duration`], rounded to the
/// nearest nanosecond. Negative and non-finite inputs clamp to zero.
pub fn micros(us: f64) -> Duration {
    if !us.is_finite() || us <= 0.0 {
        return Duration::ZERO;
    }
    Duration::from_nanos((us * 1_000.0).round() as u64)
}

/// Fractional microseconds of a duration.
pub fn as_micros(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Costs advance a counter; nothing sleeps.
    #[default]
    Virtual,
    /// Costs are slept for real and the measured time is recorded.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeKind {
    /// Work performed on this timeline.
    Cost,
    /// Idle time waiting for an event at a later instant.
    Wait,
    /// Advance caused by joining parallel branches.
    Join,
}

/// One ledger entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charge {
    pub label: String,
    pub kind: ChargeKind,
    /// Absolute instant at which the charge began.
    pub at: Duration,
    pub cost: Duration,
}

#[derive(Debug)]
struct TrackState {
    elapsed: Duration,
    ledger: Option<Vec<Charge>>,
}

#[derive(Debug)]
struct TimelineInner {
    origin: Duration,
    mode: ClockMode,
    state: Mutex<TrackState>,
}

/// A logical thread of execution on the virtual clock.
///
/// Cloning yields another handle to the same track.
#[derive(Debug, Clone)]
pub struct Timeline {
    inner: Arc<TimelineInner>,
}

impl Timeline {
    /// A non-recording virtual timeline starting at `origin`.
    pub fn starting_at(origin: Duration) -> Self {
        Self::build(origin, ClockMode::Virtual, false)
    }

    /// A virtual timeline that keeps a ledger of every charge.
    pub fn recording(origin: Duration) -> Self {
        Self::build(origin, ClockMode::Virtual, true)
    }

    pub fn with_mode(origin: Duration, mode: ClockMode, record: bool) -> Self {
        Self::build(origin, mode, record)
    }

    fn build(origin: Duration, mode: ClockMode, record: bool) -> Self {
        Self {
            inner: Arc::new(TimelineInner {
                origin,
                mode,
                state: Mutex::new(TrackState {
                    elapsed: Duration::ZERO,
                    ledger: record.then(Vec::new),
                }),
            }),
        }
    }

    pub fn origin(&self) -> Duration {
        self.inner.origin
    }

    pub fn mode(&self) -> ClockMode {
        self.inner.mode
    }

    pub fn is_recording(&self) -> bool {
        self.inner.state.lock().ledger.is_some()
    }

    /// Absolute virtual instant of this track.
    pub fn now(&self) -> Duration {
        self.inner.origin + self.inner.state.lock().elapsed
    }

    pub fn elapsed(&self) -> Duration {
        self.inner.state.lock().elapsed
    }

    /// Charges `cost` of work labelled `label`.
    pub fn charge(&self, label: &str, cost: Duration) {
        self.push(label, ChargeKind::Cost, cost);
    }

    /// Waits until the absolute instant `at`. No-op if already past it.
    pub fn advance_to(&self, at: Duration) {
        let now = self.now();
        if at > now {
            self.push("wait", ChargeKind::Wait, at - now);
        }
    }

    fn push(&self, label: &str, kind: ChargeKind, cost: Duration) {
        let cost = match self.inner.mode {
            ClockMode::Virtual => cost,
            ClockMode::Wall => {
                let start = Instant::now();
                std::thread::sleep(cost);
                start.elapsed()
            }
        };
        let mut st = self.inner.state.lock();
        let at = self.inner.origin + st.elapsed;
        st.elapsed += cost;
        if let Some(ledger) = st.ledger.as_mut() {
            ledger.push(Charge {
                label: label.to_owned(),
                kind,
                at,
                cost,
            });
        }
    }

    /// A new track starting at this track's current instant, inheriting
    /// its mode and recording flag.
    pub fn branch(&self) -> Timeline {
        Self::build(self.now(), self.inner.mode, self.is_recording())
    }

    /// Advances this track to the latest of `branches`.
    pub fn join(&self, branches: &[&Timeline]) {
        let latest = branches.iter().map(|b| b.now()).max();
        if let Some(latest) = latest {
            let now = self.now();
            if latest > now {
                // Joining never sleeps: the branches already spent the time.
                let mut st = self.inner.state.lock();
                let at = self.inner.origin + st.elapsed;
                st.elapsed += latest - now;
                if let Some(ledger) = st.ledger.as_mut() {
                    ledger.push(Charge {
                        label: "join".to_owned(),
                        kind: ChargeKind::Join,
                        at,
                        cost: latest - now,
                    });
                }
            }
        }
    }

    /// Snapshot of the ledger; empty when not recording.
    pub fn ledger(&self) -> Vec<Charge> {
        self.inner.state.lock().ledger.clone().unwrap_or_default()
    }

    /// Sum of [`ChargeKind::Cost`] entries.
    pub fn charged(&self) -> Duration {
        self.ledger()
            .iter()
            .filter(|c| c.kind == ChargeKind::Cost)
            .map(|c| c.cost)
            .sum()
    }

    /// Sum of cost entries whose label satisfies `pred`.
    pub fn charged_where(&self, pred: impl Fn(&str) -> bool) -> Duration {
        self.ledger()
            .iter()
            .filter(|c| c.kind == ChargeKind::Cost && pred(&c.label))
            .map(|c| c.cost)
            .sum()
    }
}

/// The global clock of a simulation. Hands out timelines and tracks the
/// latest instant anyone has reported.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<Mutex<Duration>>,
    mode: ClockMode,
    record: bool,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: ClockMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Timelines handed out by this clock keep ledgers.
    pub fn recording(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Duration {
        *self.now.lock()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock() += d;
    }

    /// Moves the clock forward to `t`; earlier instants are ignored.
    pub fn advance_to(&self, t: Duration) {
        let mut now = self.now.lock();
        if t > *now {
            *now = t;
        }
    }

    /// A new track starting now.
    pub fn timeline(&self) -> Timeline {
        Timeline::with_mode(self.now(), self.mode, self.record)
    }
}
