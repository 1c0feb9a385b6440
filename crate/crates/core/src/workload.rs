//! Job arrivals (Poisson, two-state MMPP, trace replay) and DAG job templates.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimDuration, SimTime, MICROS_PER_SEC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("{name} must be positive (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("MMPP requires lambda_high >= lambda_low > 0 and positive switching rates")]
    BadMmpp,
    #[error("trace line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error("trace read failed: {0}")]
    TraceIo(String),
    #[error("job template has a dependency cycle")]
    Cyclic,
    #[error("job template: {0}")]
    BadTemplate(String),
}

/// Job id, assigned in arrival order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

/// A task is addressed by its job and its index in the job template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskRef {
    pub job: JobId,
    pub index: u32,
}

/// Interned task-type label (index into the experiment's type table).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TaskType(pub u8);

/// Set of task types a server accepts, as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TypeSet(pub u64);

impl TypeSet {
    pub const ALL: TypeSet = TypeSet(u64::MAX);

    pub fn only(t: TaskType) -> TypeSet {
        TypeSet(1 << t.0)
    }

    pub fn contains(self, t: TaskType) -> bool {
        self.0 & (1 << t.0) != 0
    }

    pub fn with(self, t: TaskType) -> TypeSet {
        TypeSet(self.0 | (1 << t.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Ready,
    Queued,
    Running,
    Done,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskRef,
    pub size: SimDuration,
    pub task_type: TaskType,
    pub state: TaskState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DagEdge {
    pub from: u32,
    pub to: u32,
    /// Bytes to move from the parent's server to the child's. Zero releases immediately.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub id: JobId,
    pub arrival: SimTime,
    pub tasks: Vec<Task>,
    pub edges: Vec<DagEdge>,
    pub completion: Option<SimTime>,
}

impl Job {
    pub fn sojourn(&self) -> Option<SimDuration> {
        self.completion.map(|c| c - self.arrival)
    }
}

/// `lambda = rho * mu * n_servers * n_cores`.
pub fn utilization_to_arrival_rate(rho: f64, mu: f64, n_servers: u32, n_cores: u32) -> Result<f64, WorkloadError> {
    positive("rho", rho)?;
    positive("mu", mu)?;
    positive("n_servers", n_servers as f64)?;
    positive("n_cores", n_cores as f64)?;
    Ok(rho * mu * n_servers as f64 * n_cores as f64)
}

fn positive(name: &'static str, value: f64) -> Result<(), WorkloadError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(WorkloadError::NonPositive { name, value })
    }
}

/// Inverse CDF of Exp(lambda) for `u` in `(0, 1]`: `-ln(u) / lambda` seconds.
/// `u -> 0+` gives arbitrarily long gaps, `u = 1` gives zero.
pub fn exp_inverse_cdf(u: f64, lambda: f64) -> f64 {
    -u.ln() / lambda
}

/// Exponential interarrival gap in seconds.
pub fn poisson_interarrival(rng: &mut RngStream, lambda: f64) -> f64 {
    exp_inverse_cdf(rng.uniform_open0(), lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmppPhase {
    High,
    Low,
}

/// Two-state Markov-modulated Poisson process.
#[derive(Clone, Debug, PartialEq)]
pub struct MmppState {
    pub current: MmppPhase,
    pub lambda_high: f64,
    pub lambda_low: f64,
    /// Rate of leaving the high state (1/s).
    pub rate_high_to_low: f64,
    /// Rate of leaving the low state (1/s).
    pub rate_low_to_high: f64,
}

impl MmppState {
    pub fn new(lambda_high: f64, lambda_low: f64, rate_high_to_low: f64, rate_low_to_high: f64) -> Result<Self, WorkloadError> {
        let ok = lambda_low > 0.0
            && lambda_high >= lambda_low
            && rate_high_to_low > 0.0
            && rate_low_to_high > 0.0
            && [lambda_high, lambda_low, rate_high_to_low, rate_low_to_high].iter().all(|v| v.is_finite());
        if !ok {
            return Err(WorkloadError::BadMmpp);
        }
        Ok(MmppState { current: MmppPhase::Low, lambda_high, lambda_low, rate_high_to_low, rate_low_to_high })
    }

    /// Burstiness ratio `lambda_high / lambda_low`.
    pub fn burstiness(&self) -> f64 {
        self.lambda_high / self.lambda_low
    }

    /// Stationary probability of the high state.
    pub fn high_fraction(&self) -> f64 {
        self.rate_low_to_high / (self.rate_low_to_high + self.rate_high_to_low)
    }

    pub fn mean_rate(&self) -> f64 {
        let ph = self.high_fraction();
        ph * self.lambda_high + (1.0 - ph) * self.lambda_low
    }

    fn rates(&self) -> (f64, f64) {
        match self.current {
            MmppPhase::High => (self.lambda_high, self.rate_high_to_low),
            MmppPhase::Low => (self.lambda_low, self.rate_low_to_high),
        }
    }

    /// Time until the next arrival in seconds. Arrival and phase switch race as
    /// competing exponentials; a switch changes the phase and the race restarts.
    pub fn advance(&mut self, rng: &mut RngStream) -> f64 {
        let mut elapsed = 0.0;
        loop {
            let (lambda, switch) = self.rates();
            let to_arrival = poisson_interarrival(rng, lambda);
            let to_switch = poisson_interarrival(rng, switch);
            if to_arrival <= to_switch {
                return elapsed + to_arrival;
            }
            elapsed += to_switch;
            self.current = match self.current {
                MmppPhase::High => MmppPhase::Low,
                MmppPhase::Low => MmppPhase::High,
            };
        }
    }
}

/// Functional form of [`MmppState::advance`].
pub fn mmpp_advance(mut state: MmppState, rng: &mut RngStream) -> (f64, MmppState) {
    let gap = state.advance(rng);
    (gap, state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TraceUnit {
    S,
    Ms,
    #[default]
    Us,
}

impl TraceUnit {
    fn micros(self) -> f64 {
        match self {
            TraceUnit::S => MICROS_PER_SEC as f64,
            TraceUnit::Ms => 1_000.0,
            TraceUnit::Us => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ArrivalTrace {
    pub timestamps: Vec<SimTime>,
    /// Lines that arrived out of order and were sorted into place.
    pub reorder_warnings: u64,
}

/// Parses one decimal timestamp per line. Blank lines and `#` comments are skipped.
pub fn load_trace<R: BufRead>(source: R, unit: TraceUnit) -> Result<ArrivalTrace, WorkloadError> {
    let mut timestamps = Vec::new();
    let mut warnings = 0;
    let mut last: Option<SimTime> = None;
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| WorkloadError::TraceIo(e.to_string()))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let value: f64 = text.parse().map_err(|_| WorkloadError::MalformedTrace {
            line: i + 1,
            reason: format!("not a number: {text:?}"),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(WorkloadError::MalformedTrace { line: i + 1, reason: format!("negative or non-finite timestamp {text}") });
        }
        let t = SimTime((value * unit.micros()).round() as u64);
        if last.is_some_and(|l| t < l) {
            warnings += 1;
        }
        last = Some(t);
        timestamps.push(t);
    }
    timestamps.sort();
    Ok(ArrivalTrace { timestamps, reorder_warnings: warnings })
}

/// Source of job arrival instants.
#[derive(Clone, Debug)]
pub enum ArrivalProcess {
    Poisson { lambda: f64, clock_secs: f64 },
    Mmpp { state: MmppState, clock_secs: f64 },
    Trace { trace: ArrivalTrace, next: usize },
}

impl ArrivalProcess {
    pub fn poisson(lambda: f64) -> Result<Self, WorkloadError> {
        positive("lambda", lambda)?;
        Ok(ArrivalProcess::Poisson { lambda, clock_secs: 0.0 })
    }

    pub fn mmpp(state: MmppState) -> Self {
        ArrivalProcess::Mmpp { state, clock_secs: 0.0 }
    }

    pub fn trace(trace: ArrivalTrace) -> Self {
        ArrivalProcess::Trace { trace, next: 0 }
    }

    /// Next arrival instant. The stochastic clocks run in floating-point
    /// seconds and are rounded at emission, so rounding never accumulates.
    pub fn next_arrival(&mut self, rng: &mut RngStream) -> Option<SimTime> {
        match self {
            ArrivalProcess::Poisson { lambda, clock_secs } => {
                *clock_secs += poisson_interarrival(rng, *lambda);
                Some(SimTime::from_secs_f64(*clock_secs))
            }
            ArrivalProcess::Mmpp { state, clock_secs } => {
                *clock_secs += state.advance(rng);
                Some(SimTime::from_secs_f64(*clock_secs))
            }
            ArrivalProcess::Trace { trace, next } => {
                let t = trace.timestamps.get(*next).copied();
                *next += 1;
                t
            }
        }
    }

    /// Total arrivals when finite (trace replay).
    pub fn finite_len(&self) -> Option<usize> {
        match self {
            ArrivalProcess::Trace { trace, .. } => Some(trace.timestamps.len()),
            _ => None,
        }
    }
}

/// Task-size distribution, in microseconds at nominal core speed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeDist {
    Constant(SimDuration),
    Uniform { min: SimDuration, max: SimDuration },
    Exponential { mean: SimDuration },
}

impl SizeDist {
    pub fn mean(&self) -> SimDuration {
        match *self {
            SizeDist::Constant(d) => d,
            SizeDist::Uniform { min, max } => SimDuration((min.0 + max.0) / 2),
            SizeDist::Exponential { mean } => mean,
        }
    }

    /// Draws a size; the result is always at least one microsecond.
    pub fn sample(&self, rng: &mut RngStream) -> SimDuration {
        let us = match *self {
            SizeDist::Constant(d) => d.0,
            SizeDist::Uniform { min, max } => {
                let span = (max.0 - min.0) as f64;
                min.0 + (rng.uniform() * span).round() as u64
            }
            SizeDist::Exponential { mean } => (exp_inverse_cdf(rng.uniform_open0(), 1.0) * mean.0 as f64).round() as u64,
        };
        SimDuration(us.max(1))
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let ok = match *self {
            SizeDist::Constant(d) => d.0 > 0,
            SizeDist::Uniform { min, max } => min.0 > 0 && max >= min,
            SizeDist::Exponential { mean } => mean.0 > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::BadTemplate(format!("invalid size distribution {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTemplate {
    pub name: String,
    pub task_type: TaskType,
    pub size: SizeDist,
}

/// Static DAG shape shared by every job of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct JobTemplate {
    tasks: Vec<TaskTemplate>,
    edges: Vec<DagEdge>,
    parents: Vec<Vec<u32>>,
    children: Vec<Vec<u32>>,
    topo: Vec<u32>,
}

impl JobTemplate {
    /// Validates indices and rejects cycles, self-loops and duplicate edges.
    pub fn new(tasks: Vec<TaskTemplate>, edges: Vec<DagEdge>) -> Result<Self, WorkloadError> {
        if tasks.is_empty() {
            return Err(WorkloadError::BadTemplate("a job needs at least one task".into()));
        }
        for t in &tasks {
            t.size.validate()?;
        }
        let n = tasks.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for e in &edges {
            let (f, t) = (e.from as usize, e.to as usize);
            if f >= n || t >= n {
                return Err(WorkloadError::BadTemplate(format!("edge {}->{} references a missing task", e.from, e.to)));
            }
            if f == t {
                return Err(WorkloadError::Cyclic);
            }
            if children[f].contains(&e.to) {
                return Err(WorkloadError::BadTemplate(format!("duplicate edge {}->{}", e.from, e.to)));
            }
            children[f].push(e.to);
            parents[t].push(e.from);
        }
        let topo = topological_order(&children, &parents).ok_or(WorkloadError::Cyclic)?;
        Ok(JobTemplate { tasks, edges, parents, children, topo })
    }

    pub fn single(task: TaskTemplate) -> Self {
        JobTemplate::new(vec![task], Vec::new()).expect("single task template is valid")
    }

    pub fn tasks(&self) -> &[TaskTemplate] {
        &self.tasks
    }

    pub fn edges(&self) -> &[DagEdge] {
        &self.edges
    }

    pub fn parents(&self, task: u32) -> &[u32] {
        &self.parents[task as usize]
    }

    pub fn children(&self, task: u32) -> &[u32] {
        &self.children[task as usize]
    }

    pub fn roots(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tasks.len() as u32).filter(|&t| self.parents[t as usize].is_empty())
    }

    pub fn topological_order(&self) -> &[u32] {
        &self.topo
    }

    pub fn edge(&self, from: u32, to: u32) -> Option<&DagEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn has_transfers(&self) -> bool {
        self.edges.iter().any(|e| e.bytes > 0)
    }

    /// Expected work per job at nominal speed.
    pub fn mean_work(&self) -> SimDuration {
        SimDuration(self.tasks.iter().map(|t| t.size.mean().0).sum())
    }

    /// Draws task sizes and stamps a concrete job.
    pub fn instantiate(&self, id: JobId, arrival: SimTime, rng: &mut RngStream) -> Job {
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Task {
                id: TaskRef { job: id, index: i as u32 },
                size: t.size.sample(rng),
                task_type: t.task_type,
                state: if self.parents[i].is_empty() { TaskState::Ready } else { TaskState::Pending },
            })
            .collect();
        Job { id, arrival, tasks, edges: self.edges.clone(), completion: None }
    }
}

/// Kahn's algorithm, smallest index first among ready tasks.
fn topological_order(children: &[Vec<u32>], parents: &[Vec<u32>]) -> Option<Vec<u32>> {
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: std::collections::BTreeSet<u32> =
        (0..indeg.len() as u32).filter(|&i| indeg[i as usize] == 0).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(t) = ready.pop_first() {
        order.push(t);
        for &c in &children[t as usize] {
            indeg[c as usize] -= 1;
            if indeg[c as usize] == 0 {
                ready.insert(c);
            }
        }
    }
    (order.len() == indeg.len()).then_some(order)
}

/// True when the edges over `n` tasks admit a topological order.
pub fn is_acyclic(n: usize, edges: &[DagEdge]) -> bool {
    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    for e in edges {
        children[e.from as usize].push(e.to);
        parents[e.to as usize].push(e.from);
    }
    topological_order(&children, &parents).is_some()
}
