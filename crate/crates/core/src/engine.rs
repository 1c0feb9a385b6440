//! Discrete-event core: integer microsecond clock, a cancellable priority
//! queue ordered by `(fire_at, seq)`, and seeded random streams.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Instant on the simulated time axis, in whole microseconds since start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

/// Non-negative span of simulated time in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimDuration(pub u64);

pub const MICROS_PER_SEC: u64 = 1_000_000;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    /// Rounds to the nearest microsecond. Negative or NaN inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> SimTime {
        SimTime(secs_to_micros(secs))
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimDuration(ms * 1_000)
    }

    pub fn from_secs(s: u64) -> Self {
        SimDuration(s * MICROS_PER_SEC)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimDuration(secs_to_micros(secs))
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }
}

fn secs_to_micros(secs: f64) -> u64 {
    if secs.is_nan() || secs <= 0.0 {
        0
    } else {
        (secs * MICROS_PER_SEC as f64).round() as u64
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("causality violation: event at {fire_at} scheduled when clock is {now}")]
    Causality { fire_at: SimTime, now: SimTime },
    #[error("run_until({target}) is earlier than the current clock {now}")]
    ClockRegression { target: SimTime, now: SimTime },
}

/// Identifies a scheduled event for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

/// An event popped from the queue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: E,
}

struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    kind: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; reverse so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Virtual clock plus pending-event set.
///
/// Cancellation is lazy: cancelled entries stay in the heap and are skipped
/// when they surface. `live` holds the sequence numbers still eligible to fire.
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<E>>,
    live: HashSet<u64>,
    dispatched: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events that are scheduled and not cancelled.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    /// Total events handed out by `pop_until` / `run_until` so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, fire_at: SimTime, kind: E) -> Result<EventHandle, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::Causality { fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { fire_at, seq, kind });
        self.live.insert(seq);
        Ok(EventHandle(seq))
    }

    /// Schedules relative to the current clock; cannot violate causality.
    pub fn schedule_in(&mut self, delay: SimDuration, kind: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, kind).expect("relative schedule is never in the past")
    }

    /// Returns true if the event was pending and is now removed.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.live.contains(&handle.0)
    }

    /// Fire time of the next live event.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_dead();
        self.heap.peek().map(|e| e.fire_at)
    }

    fn discard_dead(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.live.contains(&top.seq) {
                break;
            }
            self.heap.pop();
        }
    }

    /// Pops the next live event with `fire_at <= t_end` and advances the clock to it.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<E>> {
        self.discard_dead();
        let top = self.heap.peek()?;
        if top.fire_at > t_end {
            return None;
        }
        let entry = self.heap.pop().expect("peeked");
        self.live.remove(&entry.seq);
        self.now = entry.fire_at;
        self.dispatched += 1;
        Some(Event { fire_at: entry.fire_at, seq: entry.seq, kind: entry.kind })
    }

    /// Moves the clock forward without dispatching. Fails if it would move backwards.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), EngineError> {
        if t < self.now {
            return Err(EngineError::ClockRegression { target: t, now: self.now });
        }
        self.now = t;
        Ok(())
    }

    /// Dispatches every event with `fire_at <= t_end` in `(fire_at, seq)` order,
    /// then sets the clock to `t_end`. Returns the number of events dispatched.
    pub fn run_until<F, Err>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, Err>
    where
        F: FnMut(&mut Self, Event<E>) -> Result<(), Err>,
        Err: From<EngineError>,
    {
        if t_end < self.now {
            return Err(EngineError::ClockRegression { target: t_end, now: self.now }.into());
        }
        let mut count = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev)?;
            count += 1;
        }
        self.now = t_end;
        Ok(count)
    }
}

/// Purpose label for an independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamId {
    Arrivals,
    ServiceTimes,
    DagShapes,
    ArrivalModulation,
    Custom(u32),
}

impl StreamId {
    fn number(self) -> u64 {
        match self {
            StreamId::Arrivals => 1,
            StreamId::ServiceTimes => 2,
            StreamId::DagShapes => 3,
            StreamId::ArrivalModulation => 4,
            StreamId::Custom(n) => 1_000 + n as u64,
        }
    }
}

/// Seeded random stream. Each `(seed, stream)` pair selects a distinct ChaCha8
/// stream over the same key, so streams never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream.number());
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `(0, 1]`, safe to pass to `ln`.
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.rng.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dequeues_at_fire_time() {
        let mut s: Scheduler<&str> = Scheduler::new();
        s.schedule(SimTime(100), "a").unwrap();
        let ev = s.pop_until(SimTime(1_000)).unwrap();
        assert_eq!(ev.fire_at, SimTime(100));
        assert_eq!(s.now(), SimTime(100));
    }

    #[test]
    fn ties_dispatch_in_sequence_order() {
        let mut s: Scheduler<u32> = Scheduler::new();
        for i in 0..7 {
            s.schedule(SimTime(1), i).unwrap();
        }
        let h7 = s.schedule(SimTime(100), 7).unwrap();
        let h8 = s.schedule(SimTime(100), 8).unwrap();
        assert_eq!((h7.seq(), h8.seq()), (7, 8));
        let order: Vec<u32> = std::iter::from_fn(|| s.pop_until(SimTime(100)).map(|e| e.kind)).collect();
        assert_eq!(&order[7..], &[7, 8]);
    }

    #[test]
    fn rejects_past_schedule() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.advance_to(SimTime(60)).unwrap();
        assert_eq!(
            s.schedule(SimTime(50), ()),
            Err(EngineError::Causality { fire_at: SimTime(50), now: SimTime(60) })
        );
    }

    #[test]
    fn cancel_semantics() {
        let mut s: Scheduler<u8> = Scheduler::new();
        let timer = s.schedule(SimTime(10), 1).unwrap();
        let other = s.schedule(SimTime(10), 2).unwrap();
        assert!(s.cancel(timer));
        assert!(!s.cancel(timer), "double cancel");
        let fired: Vec<u8> = std::iter::from_fn(|| s.pop_until(SimTime(20)).map(|e| e.kind)).collect();
        assert_eq!(fired, vec![2]);
        assert!(!s.cancel(other), "cancel after fire");
    }

    #[test]
    fn run_until_empty_queue() {
        let mut s: Scheduler<()> = Scheduler::new();
        let n = s.run_until(SimTime(1_000), |_, _| Ok::<_, EngineError>(())).unwrap();
        assert_eq!(n, 0);
        assert_eq!(s.now(), SimTime(1_000));
    }

    #[test]
    fn run_until_boundary() {
        let mut s: Scheduler<()> = Scheduler::new();
        for t in [10, 20, 20] {
            s.schedule(SimTime(t), ()).unwrap();
        }
        let n = s.run_until(SimTime(15), |_, _| Ok::<_, EngineError>(())).unwrap();
        assert_eq!(n, 1);
        assert_eq!(s.pending(), 2);
    }

    #[test]
    fn self_rescheduling_tick() {
        // Ticks at 0, 10, ..., 100 inclusive: eleven dispatches.
        let mut s: Scheduler<()> = Scheduler::new();
        s.schedule(SimTime(0), ()).unwrap();
        let n = s
            .run_until(SimTime(100), |sch, _| {
                sch.schedule_in(SimDuration(10), ());
                Ok::<_, EngineError>(())
            })
            .unwrap();
        assert_eq!(n, 11);
    }

    #[test]
    fn handler_causality_error_aborts_run() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.schedule(SimTime(50), ()).unwrap();
        let err = s
            .run_until(SimTime(100), |sch, _| sch.schedule(SimTime(10), ()).map(|_| ()))
            .unwrap_err();
        assert!(matches!(err, EngineError::Causality { .. }));
    }

    #[test]
    fn zero_delay_self_events_follow_seq() {
        let mut s: Scheduler<u32> = Scheduler::new();
        s.schedule(SimTime(5), 0).unwrap();
        let mut seen = Vec::new();
        s.run_until(SimTime(5), |sch, ev| {
            seen.push(ev.kind);
            if ev.kind < 3 {
                sch.schedule(sch.now(), ev.kind + 1)?;
            }
            Ok::<_, EngineError>(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, StreamId::Arrivals);
        let mut b = RngStream::new(42, StreamId::Arrivals);
        let mut c = RngStream::new(42, StreamId::ServiceTimes);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn time_conversions_round_to_micros() {
        assert_eq!(SimTime::from_secs_f64(0.0125).0, 12_500);
        assert_eq!(SimDuration::from_secs_f64(-1.0).0, 0);
        assert_eq!(SimDuration::from_millis(5).as_secs_f64(), 0.005);
    }
}
