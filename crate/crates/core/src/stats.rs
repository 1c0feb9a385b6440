//! Residency ledgers, exact energy accounting, latency percentiles and the
//! CSV emitters for run summaries and time series.
//!
//! Power is carried as integer microwatts and time as integer microseconds,
//! so energy is an exact integer count of picojoules. Sums never depend on
//! evaluation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use thiserror::Error;

use crate::engine::{SimDuration, SimTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("ledger time regression: last stamp {last}, transition at {now}")]
    TimeRegression { last: SimTime, now: SimTime },
    #[error("percentile of an empty recorder")]
    Empty,
    #[error("percentile fraction {0} outside (0, 1]")]
    BadFraction(f64),
}

/// Power in integer microwatts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Power(pub u64);

impl Power {
    pub const ZERO: Power = Power(0);

    /// Rounds watts to the nearest microwatt; negative input clamps to zero.
    pub fn from_watts(w: f64) -> Power {
        if w.is_nan() || w <= 0.0 {
            Power(0)
        } else {
            Power((w * 1e6).round() as u64)
        }
    }

    pub fn watts(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn max(self, other: Power) -> Power {
        Power(self.0.max(other.0))
    }
}

impl std::ops::Add for Power {
    type Output = Power;
    fn add(self, rhs: Power) -> Power {
        Power(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Power {
    fn sum<I: Iterator<Item = Power>>(iter: I) -> Power {
        iter.fold(Power::ZERO, |a, b| a + b)
    }
}

/// Energy in integer picojoules (microwatt x microsecond).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Energy(pub u128);

impl Energy {
    pub const ZERO: Energy = Energy(0);

    pub fn of(power: Power, dur: SimDuration) -> Energy {
        Energy(power.0 as u128 * dur.0 as u128)
    }

    pub fn joules(self) -> f64 {
        self.0 as f64 / 1e12
    }
}

impl std::ops::Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Energy {
    fn add_assign(&mut self, rhs: Energy) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Energy {
    fn sum<I: Iterator<Item = Energy>>(iter: I) -> Energy {
        iter.fold(Energy::ZERO, |a, b| a + b)
    }
}

/// Accumulated time-in-state for one component.
#[derive(Clone, Debug)]
pub struct ResidencyLedger<K: Ord + Copy> {
    current: K,
    start: SimTime,
    stamp: SimTime,
    acc: BTreeMap<K, u64>,
}

impl<K: Ord + Copy> ResidencyLedger<K> {
    pub fn new(initial: K, now: SimTime) -> Self {
        ResidencyLedger { current: initial, start: now, stamp: now, acc: BTreeMap::new() }
    }

    pub fn current(&self) -> K {
        self.current
    }

    pub fn last_stamp(&self) -> SimTime {
        self.stamp
    }

    /// Credits the open interval to the current state and switches to `to`.
    pub fn on_transition(&mut self, to: K, now: SimTime) -> Result<(), StatsError> {
        self.credit(now)?;
        self.current = to;
        Ok(())
    }

    /// Credits the open interval without changing state (end-of-run flush).
    pub fn flush(&mut self, now: SimTime) -> Result<(), StatsError> {
        self.credit(now)
    }

    fn credit(&mut self, now: SimTime) -> Result<(), StatsError> {
        if now < self.stamp {
            return Err(StatsError::TimeRegression { last: self.stamp, now });
        }
        *self.acc.entry(self.current).or_insert(0) += now.0 - self.stamp.0;
        self.stamp = now;
        Ok(())
    }

    pub fn residency(&self, state: K) -> SimDuration {
        SimDuration(self.acc.get(&state).copied().unwrap_or(0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (K, SimDuration)> + '_ {
        self.acc.iter().map(|(k, v)| (*k, SimDuration(*v)))
    }

    /// Sum of all credited durations.
    pub fn total(&self) -> SimDuration {
        SimDuration(self.acc.values().sum())
    }

    /// Time covered by this ledger, from creation to the last stamp.
    pub fn elapsed(&self) -> SimDuration {
        self.stamp - self.start
    }

    /// Integrates `power(state) x residency(state)` over credited intervals.
    pub fn energy(&self, mut power: impl FnMut(K) -> Power) -> Energy {
        self.acc.iter().map(|(k, v)| Energy::of(power(*k), SimDuration(*v))).sum()
    }
}

/// A steady state, or a transition in flight. Transitions draw the higher of
/// the two endpoint powers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PowerMode<S> {
    Steady(S),
    Transition { from: S, to: S },
}

impl<S: Copy + PartialEq> PowerMode<S> {
    pub fn is_steady(self, s: S) -> bool {
        self == PowerMode::Steady(s)
    }

    pub fn steady(self) -> Option<S> {
        match self {
            PowerMode::Steady(s) => Some(s),
            PowerMode::Transition { .. } => None,
        }
    }

    pub fn target(self) -> S {
        match self {
            PowerMode::Steady(s) => s,
            PowerMode::Transition { to, .. } => to,
        }
    }

    pub fn power(self, table: impl Fn(S) -> Power) -> Power {
        match self {
            PowerMode::Steady(s) => table(s),
            PowerMode::Transition { from, to } => table(from).max(table(to)),
        }
    }
}

/// A component's current mode, the end of any transition in flight, and its
/// residency ledger.
#[derive(Clone, Debug)]
pub struct TrackedState<S: Ord + Copy> {
    pub(crate) mode: PowerMode<S>,
    pub(crate) until: Option<SimTime>,
    pub(crate) ledger: ResidencyLedger<PowerMode<S>>,
}

impl<S: Ord + Copy> TrackedState<S> {
    pub fn new(s: S, now: SimTime) -> Self {
        TrackedState { mode: PowerMode::Steady(s), until: None, ledger: ResidencyLedger::new(PowerMode::Steady(s), now) }
    }

    pub fn mode(&self) -> PowerMode<S> {
        self.mode
    }

    pub fn until(&self) -> Option<SimTime> {
        self.until
    }

    pub fn ledger(&self) -> &ResidencyLedger<PowerMode<S>> {
        &self.ledger
    }

    pub fn set(&mut self, mode: PowerMode<S>, until: Option<SimTime>, now: SimTime) {
        self.mode = mode;
        self.until = until;
        // Component time only moves forward through the event loop.
        self.ledger.on_transition(mode, now).expect("component ledger time regression");
    }

    pub fn steady(&mut self, s: S, now: SimTime) {
        self.set(PowerMode::Steady(s), None, now);
    }

    pub fn begin(&mut self, from: S, to: S, until: SimTime, now: SimTime) {
        self.set(PowerMode::Transition { from, to }, Some(until), now);
    }

    pub fn flush(&mut self, now: SimTime) {
        self.ledger.flush(now).expect("component ledger time regression");
    }

    pub fn energy(&self, table: impl Fn(S) -> Power) -> Energy {
        self.ledger.energy(|m| m.power(&table))
    }
}

/// Append-only record of job sojourn times.
#[derive(Clone, Debug, Default)]
pub struct LatencyRecorder {
    values: Vec<u64>,
    sorted: bool,
}

impl LatencyRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, sojourn: SimDuration) {
        self.values.push(sojourn.0);
        self.sorted = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let sum: u128 = self.values.iter().map(|&v| v as u128).sum();
        Some(sum as f64 / self.values.len() as f64)
    }

    /// Nearest-rank percentile: the value at 1-based rank `ceil(p * n)`.
    pub fn percentile(&mut self, p: f64) -> Result<SimDuration, StatsError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(StatsError::BadFraction(p));
        }
        if self.values.is_empty() {
            return Err(StatsError::Empty);
        }
        if !self.sorted {
            self.values.sort_unstable();
            self.sorted = true;
        }
        let n = self.values.len();
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        Ok(SimDuration(self.values[rank - 1]))
    }
}

/// Per-run energy split. `total()` is defined as the sum of the subtotals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnergyAccount {
    pub servers: Vec<Energy>,
    pub switches: Vec<Energy>,
}

impl EnergyAccount {
    pub fn server_total(&self) -> Energy {
        self.servers.iter().copied().sum()
    }

    pub fn network_total(&self) -> Energy {
        self.switches.iter().copied().sum()
    }

    pub fn total(&self) -> Energy {
        self.server_total() + self.network_total()
    }
}

/// One time-series row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub time: SimTime,
    pub active_servers: u32,
    pub pending_jobs: u64,
    pub fleet_power: Power,
    pub awake_switches: u32,
}

#[derive(Clone, Debug)]
pub struct TimeSeries {
    pub interval: SimDuration,
    pub samples: Vec<Sample>,
}

pub const TIMESERIES_HEADER: &str = "time_s,active_servers,pending_jobs,fleet_power_w,awake_switches";

impl TimeSeries {
    pub fn new(interval: SimDuration) -> Self {
        TimeSeries { interval, samples: Vec::new() }
    }

    /// Appends a sample; samples must be strictly increasing in time.
    pub fn push(&mut self, s: Sample) {
        debug_assert!(self.samples.last().is_none_or(|l| l.time < s.time));
        self.samples.push(s);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TIMESERIES_HEADER}")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:.6},{},{},{:.6},{}",
                s.time.as_secs_f64(),
                s.active_servers,
                s.pending_jobs,
                s.fleet_power.watts(),
                s.awake_switches
            )?;
        }
        Ok(())
    }
}

/// A summary value: integers print verbatim, reals with six decimals.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    Int(u64),
    Real(f64),
    Text(String),
}

impl Metric {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Metric::Int(v) => Some(*v as f64),
            Metric::Real(v) => Some(*v),
            Metric::Text(_) => None,
        }
    }
}

/// Ordered key/value run summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    rows: Vec<(String, Metric)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: Metric) {
        self.rows.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&Metric> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn real(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Metric::as_f64)
    }

    pub fn rows(&self) -> &[(String, Metric)] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in &self.rows {
            match v {
                Metric::Int(i) => writeln!(out, "{k},{i}"),
                Metric::Real(r) => writeln!(out, "{k},{r:.6}"),
                Metric::Text(t) => writeln!(out, "{k},{t}"),
            }
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
    enum S {
        C0,
        C6,
    }

    #[test]
    fn credits_from_state() {
        let mut l = ResidencyLedger::new(S::C0, SimTime(0));
        l.on_transition(S::C6, SimTime(100)).unwrap();
        assert_eq!(l.residency(S::C0), SimDuration(100));
        assert_eq!(l.residency(S::C6), SimDuration(0));
    }

    #[test]
    fn same_instant_transitions_credit_zero() {
        let mut l = ResidencyLedger::new(S::C0, SimTime(0));
        l.on_transition(S::C6, SimTime(50)).unwrap();
        l.on_transition(S::C0, SimTime(50)).unwrap();
        l.flush(SimTime(80)).unwrap();
        assert_eq!(l.total(), l.elapsed());
        assert_eq!(l.residency(S::C6), SimDuration(0));
        assert_eq!(l.residency(S::C0), SimDuration(80));
    }

    #[test]
    fn time_regression_is_an_error() {
        let mut l = ResidencyLedger::new(S::C0, SimTime(10));
        l.on_transition(S::C6, SimTime(20)).unwrap();
        assert!(matches!(l.on_transition(S::C0, SimTime(15)), Err(StatsError::TimeRegression { .. })));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let mut r = LatencyRecorder::new();
        for v in 1..=100 {
            r.record(SimDuration(v));
        }
        assert_eq!(r.percentile(0.95).unwrap(), SimDuration(95));

        let mut one = LatencyRecorder::new();
        one.record(SimDuration(7));
        assert_eq!(one.percentile(0.01).unwrap(), SimDuration(7));
        assert_eq!(one.percentile(1.0).unwrap(), SimDuration(7));

        let mut four = LatencyRecorder::new();
        for v in [4, 2, 3, 1] {
            four.record(SimDuration(v));
        }
        assert_eq!(four.percentile(0.5).unwrap(), SimDuration(2));
    }

    #[test]
    fn percentile_errors() {
        let mut r = LatencyRecorder::new();
        assert_eq!(r.percentile(0.5), Err(StatsError::Empty));
        r.record(SimDuration(1));
        assert!(matches!(r.percentile(0.0), Err(StatsError::BadFraction(_))));
        assert!(matches!(r.percentile(1.5), Err(StatsError::BadFraction(_))));
    }

    #[test]
    fn energy_arithmetic() {
        // 20.22 W for two hours.
        let e = Energy::of(Power::from_watts(20.22), SimDuration::from_secs(7_200));
        assert_eq!(e, Energy(145_584 * 1_000_000_000_000));
        // Half of 100 s at 72 W, half at 34 W.
        let half = SimDuration::from_secs(50);
        let e = Energy::of(Power::from_watts(72.0), half) + Energy::of(Power::from_watts(34.0), half);
        assert_eq!(e.joules(), 5_300.0);
        assert_eq!(Energy::of(Power::from_watts(99.0), SimDuration::ZERO), Energy::ZERO);
    }

    #[test]
    fn summary_csv_is_fixed_precision() {
        let mut s = Summary::new();
        s.push("jobs", Metric::Int(3));
        s.push("mean_latency_s", Metric::Real(0.1));
        assert_eq!(s.to_csv(), "key,value\njobs,3\nmean_latency_s,0.100000\n");
    }

    #[test]
    fn timeseries_header_then_rows() {
        let mut ts = TimeSeries::new(SimDuration::from_secs(1));
        ts.push(Sample {
            time: SimTime(0),
            active_servers: 2,
            pending_jobs: 0,
            fleet_power: Power::from_watts(1.5),
            awake_switches: 1,
        });
        let mut buf = Vec::new();
        ts.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{TIMESERIES_HEADER}\n0.000000,2,0,1.500000,1\n"));
    }

    proptest! {
        #[test]
        fn ledger_conserves_time(steps in proptest::collection::vec((0u64..1_000, any::<bool>()), 0..50)) {
            let mut l = ResidencyLedger::new(S::C0, SimTime(5));
            let mut t = 5;
            for (dt, deep) in steps {
                t += dt;
                l.on_transition(if deep { S::C6 } else { S::C0 }, SimTime(t)).unwrap();
            }
            l.flush(SimTime(t + 3)).unwrap();
            prop_assert_eq!(l.total(), SimDuration(t + 3 - 5));
        }

        #[test]
        fn percentile_is_monotone(mut vals in proptest::collection::vec(0u64..10_000, 1..200), p1 in 0.001f64..1.0, p2 in 0.001f64..1.0) {
            let mut r = LatencyRecorder::new();
            for v in vals.drain(..) {
                r.record(SimDuration(v));
            }
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(r.percentile(lo).unwrap() <= r.percentile(hi).unwrap());
        }
    }
}
