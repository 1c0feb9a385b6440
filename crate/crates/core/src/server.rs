//! Multi-core servers: task queues, execution timing and the hierarchical
//! core / package / system power-state machine.
//!
//! A server never talks to the event queue directly. Operations push
//! [`ServerEffect`]s describing what must happen later (a task starting once
//! its core has woken, a transition finishing) and the simulation turns them
//! into events.
//!
//! Core and package C-state entry is instantaneous; exits cost the profile's
//! wake latency. System sleep has both an entry and an exit latency. While the
//! platform is suspended its cores and packages are recorded as `Off`.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{SimDuration, SimTime};
pub use crate::stats::PowerMode;
use crate::stats::{Energy, Power, ResidencyLedger, TrackedState};
use crate::workload::{TaskRef, TaskType, TypeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServerId(pub u32);

impl ServerId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("server {server} does not serve task type {task_type}")]
    NotServed { server: u32, task_type: u8 },
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("component is mid-transition")]
    Busy,
    #[error("no core {0}")]
    NoSuchCore(u32),
    #[error("core {0} has no running task")]
    NotRunning(u32),
    #[error("core {0} is not waiting to start a task")]
    NotStarting(u32),
    #[error("invalid power profile: {0}")]
    BadProfile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoreState {
    Active,
    Idle,
    C1,
    C3,
    C6,
    Off,
}

impl CoreState {
    pub fn is_sleep(self) -> bool {
        matches!(self, CoreState::C1 | CoreState::C3 | CoreState::C6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PackageState {
    PkgC0,
    PkgC6,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SystemState {
    S0,
    S3,
    SOff,
}

/// Per-state power draws and wake latencies. Server power is the sum of a
/// per-core term, a per-package (uncore) term and a platform term.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerPowerProfile {
    pub core_active: Power,
    pub core_idle: Power,
    pub core_c1: Power,
    pub core_c3: Power,
    pub core_c6: Power,
    pub core_c1_wake: SimDuration,
    pub core_c3_wake: SimDuration,
    pub core_c6_wake: SimDuration,
    pub package_c0: Power,
    pub package_c6: Power,
    pub package_c6_wake: SimDuration,
    pub platform_s0: Power,
    pub platform_s3: Power,
    pub platform_off: Power,
    pub s3_entry: SimDuration,
    pub s3_exit: SimDuration,
    pub off_entry: SimDuration,
    pub off_exit: SimDuration,
}

impl ServerPowerProfile {
    pub fn core_power(&self, s: CoreState) -> Power {
        match s {
            CoreState::Active => self.core_active,
            CoreState::Idle => self.core_idle,
            CoreState::C1 => self.core_c1,
            CoreState::C3 => self.core_c3,
            CoreState::C6 => self.core_c6,
            CoreState::Off => Power::ZERO,
        }
    }

    pub fn core_wake(&self, s: CoreState) -> SimDuration {
        match s {
            CoreState::C1 => self.core_c1_wake,
            CoreState::C3 => self.core_c3_wake,
            CoreState::C6 => self.core_c6_wake,
            _ => SimDuration::ZERO,
        }
    }

    pub fn package_power(&self, s: PackageState) -> Power {
        match s {
            PackageState::PkgC0 => self.package_c0,
            PackageState::PkgC6 => self.package_c6,
            PackageState::Off => Power::ZERO,
        }
    }

    pub fn platform_power(&self, s: SystemState) -> Power {
        match s {
            SystemState::S0 => self.platform_s0,
            SystemState::S3 => self.platform_s3,
            SystemState::SOff => self.platform_off,
        }
    }

    fn sleep_latencies(&self, s: SystemState) -> (SimDuration, SimDuration) {
        match s {
            SystemState::S3 => (self.s3_entry, self.s3_exit),
            SystemState::SOff => (self.off_entry, self.off_exit),
            SystemState::S0 => (SimDuration::ZERO, SimDuration::ZERO),
        }
    }

    /// Deeper states must not draw more than shallower ones and every
    /// non-running state must have a positive wake latency.
    pub fn validate(&self) -> Result<(), ServerError> {
        let chains: [(&str, &[Power]); 3] = [
            ("core", &[self.core_active, self.core_idle, self.core_c1, self.core_c3, self.core_c6]),
            ("package", &[self.package_c0, self.package_c6]),
            ("platform", &[self.platform_s0, self.platform_s3, self.platform_off]),
        ];
        for (name, chain) in chains {
            if chain.windows(2).any(|w| w[1] > w[0]) {
                return Err(ServerError::BadProfile(format!("{name} power must not increase with sleep depth")));
            }
        }
        let wakes = [
            ("core_c1_wake", self.core_c1_wake),
            ("core_c3_wake", self.core_c3_wake),
            ("core_c6_wake", self.core_c6_wake),
            ("package_c6_wake", self.package_c6_wake),
            ("s3_exit", self.s3_exit),
            ("off_exit", self.off_exit),
        ];
        if let Some((name, _)) = wakes.iter().find(|(_, d)| d.0 == 0) {
            return Err(ServerError::BadProfile(format!("{name} must be positive")));
        }
        Ok(())
    }

    /// Documented example profile (not a measurement of any real part).
    pub fn example() -> Self {
        ServerPowerProfile {
            core_active: Power::from_watts(8.0),
            core_idle: Power::from_watts(4.0),
            core_c1: Power::from_watts(2.0),
            core_c3: Power::from_watts(1.0),
            core_c6: Power::from_watts(0.5),
            core_c1_wake: SimDuration(2),
            core_c3_wake: SimDuration(50),
            core_c6_wake: SimDuration(500),
            package_c0: Power::from_watts(10.0),
            package_c6: Power::from_watts(2.0),
            package_c6_wake: SimDuration(100),
            platform_s0: Power::from_watts(30.0),
            platform_s3: Power::from_watts(3.0),
            platform_off: Power::ZERO,
            s3_entry: SimDuration::from_millis(10),
            s3_exit: SimDuration::from_millis(300),
            off_entry: SimDuration::from_secs(5),
            off_exit: SimDuration::from_secs(60),
        }
    }
}

/// Local (per-server) idle policy applied whenever a core runs out of work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LocalPowerPolicy {
    /// C-state an idle core drops into; `None` keeps it in C0 idle.
    pub core_sleep: Option<CoreState>,
    /// Allow PkgC6 once every core of a package is in C6.
    pub package_sleep: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QueueMode {
    #[default]
    Unified,
    PerCore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueuedTask {
    pub task: TaskRef,
    pub size: SimDuration,
    pub task_type: TaskType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    StartedOnCore(u32),
    QueuedLocal,
    QueuedOnCore(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextAction {
    PulledLocal(TaskRef),
    PulledGlobal(TaskRef),
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServerComponent {
    Core(u32),
    Package(u32),
    System,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionTarget {
    Core(u32, CoreState),
    Package(u32, PackageState),
    System(SystemState),
}

/// Work the caller must schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerEffect {
    /// The task is running on `core` and will finish at `finish_at`.
    TaskStarted { core: u32, task: TaskRef, finish_at: SimTime },
    /// `core` is waking for a task; call [`Server::begin_task`] at `at`.
    StartAt { core: u32, at: SimTime },
    /// Call [`Server::transition_complete`] for `component` at `at`.
    TransitionDone { component: ServerComponent, at: SimTime },
}

/// Coarse server activity, for pool residency accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServerActivity {
    Busy,
    Idle,
    Transition,
    Sleep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CoreSlot {
    Free,
    Starting(QueuedTask),
    Running(QueuedTask),
}

#[derive(Clone, Debug)]
pub struct Core {
    id: u32,
    package: u32,
    frequency_scale: f64,
    state: TrackedState<CoreState>,
    slot: CoreSlot,
    queue: VecDeque<QueuedTask>,
}

impl Core {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn frequency_scale(&self) -> f64 {
        self.frequency_scale
    }

    pub fn mode(&self) -> PowerMode<CoreState> {
        self.state.mode
    }

    pub fn running(&self) -> Option<TaskRef> {
        match self.slot {
            CoreSlot::Running(t) => Some(t.task),
            _ => None,
        }
    }

    pub fn is_free(&self) -> bool {
        self.slot == CoreSlot::Free
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn ledger(&self) -> &ResidencyLedger<PowerMode<CoreState>> {
        &self.state.ledger
    }
}

#[derive(Clone, Debug)]
struct Package {
    cores: std::ops::Range<u32>,
    state: TrackedState<PackageState>,
}

/// Service time on a core: `size / frequency_scale`, rounded up to whole microseconds.
pub fn task_service_duration(size: SimDuration, frequency_scale: f64) -> SimDuration {
    if frequency_scale == 1.0 {
        size
    } else {
        SimDuration((size.0 as f64 / frequency_scale).ceil() as u64)
    }
}

#[derive(Clone, Debug)]
pub struct ServerSpec {
    pub packages: u32,
    pub cores_per_package: u32,
    /// One scale per core; a single value applies to every core.
    pub frequency_scales: Vec<f64>,
    pub queue_mode: QueueMode,
    pub served: TypeSet,
}

#[derive(Clone, Debug)]
pub struct Server {
    id: ServerId,
    cores: Vec<Core>,
    packages: Vec<Package>,
    system: TrackedState<SystemState>,
    local_queue: VecDeque<QueuedTask>,
    queue_mode: QueueMode,
    profile: Arc<ServerPowerProfile>,
    served: TypeSet,
    policy: LocalPowerPolicy,
    wake_pending: bool,
}

impl Server {
    pub fn new(id: ServerId, spec: &ServerSpec, profile: Arc<ServerPowerProfile>, now: SimTime) -> Result<Self, ServerError> {
        let n = spec.packages * spec.cores_per_package;
        if n == 0 {
            return Err(ServerError::BadProfile("a server needs at least one core".into()));
        }
        let scale = |c: u32| -> f64 {
            match spec.frequency_scales.len() {
                0 => 1.0,
                1 => spec.frequency_scales[0],
                _ => spec.frequency_scales[c as usize % spec.frequency_scales.len()],
            }
        };
        let mut cores = Vec::with_capacity(n as usize);
        for c in 0..n {
            let f = scale(c);
            if !(f > 0.0 && f.is_finite()) {
                return Err(ServerError::BadProfile(format!("core {c} frequency scale {f} must be positive")));
            }
            cores.push(Core {
                id: c,
                package: c / spec.cores_per_package,
                frequency_scale: f,
                state: TrackedState::new(CoreState::Idle, now),
                slot: CoreSlot::Free,
                queue: VecDeque::new(),
            });
        }
        let packages = (0..spec.packages)
            .map(|p| Package {
                cores: p * spec.cores_per_package..(p + 1) * spec.cores_per_package,
                state: TrackedState::new(PackageState::PkgC0, now),
            })
            .collect();
        Ok(Server {
            id,
            cores,
            packages,
            system: TrackedState::new(SystemState::S0, now),
            local_queue: VecDeque::new(),
            queue_mode: spec.queue_mode,
            profile,
            served: spec.served,
            policy: LocalPowerPolicy::default(),
            wake_pending: false,
        })
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    pub fn package_count(&self) -> usize {
        self.packages.len()
    }

    pub fn package_mode(&self, p: u32) -> PowerMode<PackageState> {
        self.packages[p as usize].state.mode
    }

    pub fn system_mode(&self) -> PowerMode<SystemState> {
        self.system.mode
    }

    pub fn profile(&self) -> &ServerPowerProfile {
        &self.profile
    }

    pub fn served(&self) -> TypeSet {
        self.served
    }

    pub fn serves(&self, t: TaskType) -> bool {
        self.served.contains(t)
    }

    pub fn queue_mode(&self) -> QueueMode {
        self.queue_mode
    }

    pub fn local_policy(&self) -> LocalPowerPolicy {
        self.policy
    }

    pub fn local_queue_len(&self) -> usize {
        self.local_queue.len()
    }

    /// Queued (server and per-core) plus starting plus running tasks.
    pub fn pending_tasks(&self) -> usize {
        self.local_queue.len() + self.cores.iter().map(|c| c.queue.len() + usize::from(!c.is_free())).sum::<usize>()
    }

    pub fn running_tasks(&self) -> usize {
        self.cores.iter().filter(|c| !c.is_free()).count()
    }

    /// No queued, starting or running work.
    pub fn is_idle(&self) -> bool {
        self.pending_tasks() == 0
    }

    /// A core slot is free, whatever the power state of the server.
    pub fn has_free_core(&self) -> bool {
        self.free_cores() > 0
    }

    /// Idle cores with nothing queued for them, less tasks waiting in the server queue.
    pub fn free_cores(&self) -> usize {
        let idle = self.cores.iter().filter(|c| c.is_free() && c.queue.is_empty()).count();
        idle.saturating_sub(self.local_queue.len())
    }

    /// Fully powered: steady S0.
    pub fn is_awake(&self) -> bool {
        self.system.mode.is_steady(SystemState::S0)
    }

    /// Powered or on its way up (not suspended, not suspending).
    pub fn is_up(&self) -> bool {
        self.system.mode.target() == SystemState::S0
    }

    pub fn activity(&self) -> ServerActivity {
        match self.system.mode {
            PowerMode::Steady(SystemState::S0) => {
                if self.cores.iter().any(|c| !c.is_free()) {
                    ServerActivity::Busy
                } else {
                    ServerActivity::Idle
                }
            }
            PowerMode::Steady(_) => ServerActivity::Sleep,
            PowerMode::Transition { .. } => ServerActivity::Transition,
        }
    }

    pub fn system_ledger(&self) -> &ResidencyLedger<PowerMode<SystemState>> {
        &self.system.ledger
    }

    /// Installs a new local idle policy and applies it to idle cores.
    pub fn set_local_policy(&mut self, policy: LocalPowerPolicy, now: SimTime) {
        self.policy = policy;
        self.settle(now);
    }

    /// Places a task. Sleeping or suspending servers buffer it locally and wake.
    pub fn enqueue_task(&mut self, task: QueuedTask, now: SimTime, fx: &mut Vec<ServerEffect>) -> Result<Placement, ServerError> {
        if !self.served.contains(task.task_type) {
            return Err(ServerError::NotServed { server: self.id.0, task_type: task.task_type.0 });
        }
        match self.system.mode {
            PowerMode::Steady(SystemState::S0) => {}
            PowerMode::Transition { to: SystemState::S0, .. } => {
                self.local_queue.push_back(task);
                return Ok(Placement::QueuedLocal);
            }
            PowerMode::Transition { .. } => {
                self.local_queue.push_back(task);
                self.wake_pending = true;
                return Ok(Placement::QueuedLocal);
            }
            PowerMode::Steady(_) => {
                self.local_queue.push_back(task);
                self.begin_resume(now, fx);
                return Ok(Placement::QueuedLocal);
            }
        }
        if let Some(c) = self.pick_free_core() {
            self.start_on_core(c, task, now, fx);
            return Ok(Placement::StartedOnCore(c));
        }
        match self.queue_mode {
            QueueMode::Unified => {
                self.local_queue.push_back(task);
                Ok(Placement::QueuedLocal)
            }
            QueueMode::PerCore => {
                let c = self.shortest_core_queue();
                self.cores[c as usize].queue.push_back(task);
                Ok(Placement::QueuedOnCore(c))
            }
        }
    }

    fn shortest_core_queue(&self) -> u32 {
        self.cores.iter().min_by_key(|c| (c.queue.len() + usize::from(!c.is_free()), c.id)).map(|c| c.id).expect("at least one core")
    }

    fn wake_latency(&self, c: &Core) -> SimDuration {
        let pkg = &self.packages[c.package as usize].state;
        let pkg_lat = match pkg.mode {
            PowerMode::Steady(PackageState::PkgC6) => self.profile.package_c6_wake,
            _ => SimDuration::ZERO,
        };
        pkg_lat + self.profile.core_wake(c.state.mode.target())
    }

    /// Free, steady core with the shortest wake; lowest id breaks ties.
    fn pick_free_core(&self) -> Option<u32> {
        self.cores
            .iter()
            .filter(|c| c.is_free() && c.queue.is_empty() && c.state.mode.steady().is_some())
            .min_by_key(|c| (self.wake_latency(c), c.id))
            .map(|c| c.id)
    }

    fn start_on_core(&mut self, c: u32, task: QueuedTask, now: SimTime, fx: &mut Vec<ServerEffect>) {
        let core_mode = self.cores[c as usize].state.mode;
        let from = match core_mode {
            PowerMode::Steady(s) => s,
            PowerMode::Transition { .. } => unreachable!("start_on_core on a transitioning core"),
        };
        if !from.is_sleep() {
            self.run_now(c, task, now, fx);
            return;
        }
        let p = self.cores[c as usize].package;
        let pkg_ready = {
            let profile = Arc::clone(&self.profile);
            let pkg = &mut self.packages[p as usize].state;
            match pkg.mode {
                PowerMode::Steady(PackageState::PkgC6) => {
                    let until = now + profile.package_c6_wake;
                    pkg.begin(PackageState::PkgC6, PackageState::PkgC0, until, now);
                    fx.push(ServerEffect::TransitionDone { component: ServerComponent::Package(p), at: until });
                    until
                }
                PowerMode::Transition { to: PackageState::PkgC0, .. } => pkg.until.expect("transition has an end"),
                _ => now,
            }
        };
        let at = pkg_ready + self.profile.core_wake(from);
        let core = &mut self.cores[c as usize];
        core.state.begin(from, CoreState::Active, at, now);
        core.slot = CoreSlot::Starting(task);
        fx.push(ServerEffect::StartAt { core: c, at });
    }

    fn run_now(&mut self, c: u32, task: QueuedTask, now: SimTime, fx: &mut Vec<ServerEffect>) {
        let core = &mut self.cores[c as usize];
        if !core.state.mode.is_steady(CoreState::Active) {
            core.state.steady(CoreState::Active, now);
        }
        core.slot = CoreSlot::Running(task);
        let finish_at = now + task_service_duration(task.size, core.frequency_scale);
        fx.push(ServerEffect::TaskStarted { core: c, task: task.task, finish_at });
    }

    /// A woken core starts its reserved task. Returns the task and its finish time.
    pub fn begin_task(&mut self, c: u32, now: SimTime) -> Result<(TaskRef, SimTime), ServerError> {
        let core = self.cores.get_mut(c as usize).ok_or(ServerError::NoSuchCore(c))?;
        let CoreSlot::Starting(task) = core.slot else {
            return Err(ServerError::NotStarting(c));
        };
        core.state.steady(CoreState::Active, now);
        core.slot = CoreSlot::Running(task);
        Ok((task.task, now + task_service_duration(task.size, core.frequency_scale)))
    }

    /// Retires the running task and pulls the next one: own core queue, then the
    /// server queue, then `pull_global`. With nothing to do the core goes idle.
    pub fn complete_task(
        &mut self,
        c: u32,
        now: SimTime,
        mut pull_global: impl FnMut(TypeSet) -> Option<QueuedTask>,
        fx: &mut Vec<ServerEffect>,
    ) -> Result<(QueuedTask, NextAction), ServerError> {
        let core = self.cores.get_mut(c as usize).ok_or(ServerError::NoSuchCore(c))?;
        let CoreSlot::Running(done) = core.slot else {
            return Err(ServerError::NotRunning(c));
        };
        core.slot = CoreSlot::Free;
        let own = if self.queue_mode == QueueMode::PerCore { core.queue.pop_front() } else { None };
        let next = match own.or_else(|| self.local_queue.pop_front()) {
            Some(t) => Some((t, NextAction::PulledLocal(t.task))),
            None => pull_global(self.served).map(|t| (t, NextAction::PulledGlobal(t.task))),
        };
        match next {
            Some((t, action)) => {
                self.run_now(c, t, now, fx);
                Ok((done, action))
            }
            None => {
                self.cores[c as usize].state.steady(CoreState::Idle, now);
                self.settle(now);
                Ok((done, NextAction::Idle))
            }
        }
    }

    /// Applies the local idle policy to free idle cores and eligible packages.
    fn settle(&mut self, now: SimTime) {
        if !self.is_awake() {
            return;
        }
        if let Some(sleep) = self.policy.core_sleep {
            for core in &mut self.cores {
                if core.is_free() && core.queue.is_empty() && core.state.mode.is_steady(CoreState::Idle) {
                    core.state.steady(sleep, now);
                }
            }
        }
        if self.policy.package_sleep {
            for p in 0..self.packages.len() {
                self.try_package_sleep(p, now);
            }
        }
    }

    fn try_package_sleep(&mut self, p: usize, now: SimTime) -> bool {
        let range = self.packages[p].cores.clone();
        let all_c6 = range.clone().all(|c| self.cores[c as usize].state.mode.is_steady(CoreState::C6));
        let pkg = &mut self.packages[p].state;
        if all_c6 && pkg.mode.is_steady(PackageState::PkgC0) {
            pkg.steady(PackageState::PkgC6, now);
            true
        } else {
            false
        }
    }

    fn begin_resume(&mut self, now: SimTime, fx: &mut Vec<ServerEffect>) -> SimTime {
        let PowerMode::Steady(from) = self.system.mode else {
            unreachable!("resume from a transition");
        };
        let (_, exit) = self.profile.sleep_latencies(from);
        let until = now + exit;
        self.system.begin(from, SystemState::S0, until, now);
        for core in &mut self.cores {
            core.state.begin(CoreState::Off, CoreState::Idle, until, now);
        }
        for pkg in &mut self.packages {
            pkg.state.begin(PackageState::Off, PackageState::PkgC0, until, now);
        }
        self.wake_pending = false;
        fx.push(ServerEffect::TransitionDone { component: ServerComponent::System, at: until });
        until
    }

    /// Starts a power-state change; returns when it completes.
    pub fn request_state_transition(
        &mut self,
        target: TransitionTarget,
        now: SimTime,
        fx: &mut Vec<ServerEffect>,
    ) -> Result<SimTime, ServerError> {
        match target {
            TransitionTarget::Core(c, to) => {
                if !self.is_awake() {
                    return Err(ServerError::IllegalTransition("core transitions need a running platform".into()));
                }
                let profile = Arc::clone(&self.profile);
                let core = self.cores.get(c as usize).ok_or(ServerError::NoSuchCore(c))?;
                let PowerMode::Steady(from) = core.state.mode else {
                    return Err(ServerError::Busy);
                };
                let pkg_awake = self.packages[core.package as usize].state.mode.is_steady(PackageState::PkgC0);
                let core = &mut self.cores[c as usize];
                if from == to {
                    return Ok(now);
                }
                match (from, to) {
                    (CoreState::Idle, s) if s.is_sleep() => {
                        if !core.is_free() {
                            return Err(ServerError::IllegalTransition(format!("core {c} is busy")));
                        }
                        core.state.steady(s, now);
                        Ok(now)
                    }
                    (s, CoreState::Idle) if s.is_sleep() => {
                        if !pkg_awake {
                            return Err(ServerError::IllegalTransition(format!("core {c}: package is asleep")));
                        }
                        let until = now + profile.core_wake(s);
                        core.state.begin(s, CoreState::Idle, until, now);
                        fx.push(ServerEffect::TransitionDone { component: ServerComponent::Core(c), at: until });
                        Ok(until)
                    }
                    (from, to) => Err(ServerError::IllegalTransition(format!("core {c}: {from:?} -> {to:?}"))),
                }
            }
            TransitionTarget::Package(p, to) => {
                if !self.is_awake() {
                    return Err(ServerError::IllegalTransition("package transitions need a running platform".into()));
                }
                let pkg = self.packages.get(p as usize).ok_or(ServerError::IllegalTransition(format!("no package {p}")))?;
                let PowerMode::Steady(from) = pkg.state.mode else {
                    return Err(ServerError::Busy);
                };
                match (from, to) {
                    (a, b) if a == b => Ok(now),
                    (PackageState::PkgC0, PackageState::PkgC6) => {
                        if self.try_package_sleep(p as usize, now) {
                            Ok(now)
                        } else {
                            Err(ServerError::IllegalTransition(format!("package {p}: PkgC6 needs every core in C6")))
                        }
                    }
                    (PackageState::PkgC6, PackageState::PkgC0) => {
                        let until = now + self.profile.package_c6_wake;
                        self.packages[p as usize].state.begin(from, to, until, now);
                        fx.push(ServerEffect::TransitionDone { component: ServerComponent::Package(p), at: until });
                        Ok(until)
                    }
                    (a, b) => Err(ServerError::IllegalTransition(format!("package {p}: {a:?} -> {b:?}"))),
                }
            }
            TransitionTarget::System(SystemState::S0) => match self.system.mode {
                PowerMode::Steady(SystemState::S0) => Ok(now),
                PowerMode::Steady(_) => Ok(self.begin_resume(now, fx)),
                PowerMode::Transition { to: SystemState::S0, .. } => Ok(self.system.until.expect("transition end")),
                PowerMode::Transition { to, .. } => {
                    self.wake_pending = true;
                    Ok(self.system.until.expect("transition end") + self.profile.sleep_latencies(to).1)
                }
            },
            TransitionTarget::System(to) => {
                let PowerMode::Steady(from) = self.system.mode else {
                    return Err(ServerError::Busy);
                };
                if from != SystemState::S0 {
                    return Err(ServerError::IllegalTransition(format!("system {from:?} -> {to:?}")));
                }
                if !self.is_idle() {
                    return Err(ServerError::IllegalTransition("system sleep needs empty queues".into()));
                }
                if !self.packages.iter().all(|p| p.state.mode.is_steady(PackageState::PkgC6)) {
                    return Err(ServerError::IllegalTransition("system sleep needs every package in PkgC6".into()));
                }
                let (entry, _) = self.profile.sleep_latencies(to);
                let until = now + entry;
                self.system.begin(from, to, until, now);
                fx.push(ServerEffect::TransitionDone { component: ServerComponent::System, at: until });
                Ok(until)
            }
        }
    }

    /// Puts an idle server to sleep: idle cores drop to C6, packages to PkgC6,
    /// then the platform starts suspending.
    pub fn begin_sleep(&mut self, to: SystemState, now: SimTime, fx: &mut Vec<ServerEffect>) -> Result<SimTime, ServerError> {
        if !self.is_awake() || !self.is_idle() {
            return Err(ServerError::IllegalTransition("only an idle, running server can sleep".into()));
        }
        if self.cores.iter().any(|c| c.state.mode.steady().is_none()) || self.packages.iter().any(|p| p.state.mode.steady().is_none()) {
            return Err(ServerError::Busy);
        }
        for core in &mut self.cores {
            if !core.state.mode.is_steady(CoreState::C6) {
                core.state.steady(CoreState::C6, now);
            }
        }
        for p in 0..self.packages.len() {
            self.try_package_sleep(p, now);
        }
        self.request_state_transition(TransitionTarget::System(to), now, fx)
    }

    pub fn transition_complete(&mut self, component: ServerComponent, now: SimTime, fx: &mut Vec<ServerEffect>) -> Result<(), ServerError> {
        match component {
            ServerComponent::Core(c) => {
                let core = self.cores.get_mut(c as usize).ok_or(ServerError::NoSuchCore(c))?;
                match core.state.mode {
                    PowerMode::Transition { to: CoreState::Idle, .. } => core.state.steady(CoreState::Idle, now),
                    m => return Err(ServerError::IllegalTransition(format!("core {c} completion in {m:?}"))),
                }
            }
            ServerComponent::Package(p) => {
                let pkg = &mut self.packages[p as usize].state;
                match pkg.mode {
                    PowerMode::Transition { to, .. } => pkg.steady(to, now),
                    m => return Err(ServerError::IllegalTransition(format!("package {p} completion in {m:?}"))),
                }
            }
            ServerComponent::System => match self.system.mode {
                PowerMode::Transition { to: SystemState::S0, .. } => {
                    self.system.steady(SystemState::S0, now);
                    for core in &mut self.cores {
                        core.state.steady(CoreState::Idle, now);
                    }
                    for pkg in &mut self.packages {
                        pkg.state.steady(PackageState::PkgC0, now);
                    }
                    self.drain_buffered(now, fx);
                    self.settle(now);
                }
                PowerMode::Transition { to, .. } => {
                    self.system.steady(to, now);
                    for core in &mut self.cores {
                        core.state.steady(CoreState::Off, now);
                    }
                    for pkg in &mut self.packages {
                        pkg.state.steady(PackageState::Off, now);
                    }
                    if self.wake_pending {
                        self.begin_resume(now, fx);
                    }
                }
                m => return Err(ServerError::IllegalTransition(format!("system completion in {m:?}"))),
            },
        }
        Ok(())
    }

    /// After a resume: buffered tasks go to free cores, the rest stay queued.
    fn drain_buffered(&mut self, now: SimTime, fx: &mut Vec<ServerEffect>) {
        while !self.local_queue.is_empty() {
            let Some(c) = self.pick_free_core() else { break };
            let t = self.local_queue.pop_front().expect("nonempty");
            self.start_on_core(c, t, now, fx);
        }
        if self.queue_mode == QueueMode::PerCore {
            while let Some(t) = self.local_queue.pop_front() {
                let c = self.shortest_core_queue();
                self.cores[c as usize].queue.push_back(t);
            }
        }
    }

    /// Instantaneous draw of cores + packages + platform.
    pub fn power(&self) -> Power {
        let p = &self.profile;
        let cores: Power = self.cores.iter().map(|c| c.state.mode.power(|s| p.core_power(s))).sum();
        let pkgs: Power = self.packages.iter().map(|k| k.state.mode.power(|s| p.package_power(s))).sum();
        cores + pkgs + self.system.mode.power(|s| p.platform_power(s))
    }

    /// Closes every ledger at `now`.
    pub fn flush(&mut self, now: SimTime) {
        for c in &mut self.cores {
            c.state.ledger.flush(now).expect("core ledger regression");
        }
        for k in &mut self.packages {
            k.state.ledger.flush(now).expect("package ledger regression");
        }
        self.system.ledger.flush(now).expect("system ledger regression");
    }

    /// Energy integrated from the residency ledgers (flush first).
    pub fn energy(&self) -> Energy {
        let p = &self.profile;
        let cores: Energy = self.cores.iter().map(|c| c.state.ledger.energy(|m| m.power(|s| p.core_power(s)))).sum();
        let pkgs: Energy = self.packages.iter().map(|k| k.state.ledger.energy(|m| m.power(|s| p.package_power(s)))).sum();
        cores + pkgs + self.system.ledger.energy(|m| m.power(|s| p.platform_power(s)))
    }

    /// Core-time spent in C0 running tasks.
    pub fn core_active_time(&self) -> SimDuration {
        SimDuration(self.cores.iter().map(|c| c.state.ledger.residency(PowerMode::Steady(CoreState::Active)).0).sum())
    }

    /// Every ledger's credited time equals its elapsed time.
    pub fn residency_conserved(&self) -> bool {
        self.cores.iter().all(|c| c.state.ledger.total() == c.state.ledger.elapsed())
            && self.packages.iter().all(|k| k.state.ledger.total() == k.state.ledger.elapsed())
            && self.system.ledger.total() == self.system.ledger.elapsed()
    }

    /// Checks the state hierarchy; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, pkg) in self.packages.iter().enumerate() {
            if pkg.state.mode.is_steady(PackageState::PkgC6) {
                let ok = pkg.cores.clone().all(|c| self.cores[c as usize].state.mode.is_steady(CoreState::C6));
                if !ok {
                    return Err(format!("server {} package {i} in PkgC6 with a core not in C6", self.id.0));
                }
            }
        }
        for c in &self.cores {
            let running = matches!(c.slot, CoreSlot::Running(_));
            if running != c.state.mode.is_steady(CoreState::Active) {
                return Err(format!("server {} core {}: slot {:?} in {:?}", self.id.0, c.id, c.slot, c.state.mode));
            }
        }
        match self.system.mode {
            PowerMode::Steady(SystemState::S0) => {}
            PowerMode::Steady(s) => {
                if !self.is_idle() {
                    return Err(format!("server {} in {s:?} with pending work", self.id.0));
                }
                if !self.packages.iter().all(|p| p.state.mode.is_steady(PackageState::Off)) {
                    return Err(format!("server {} in {s:?} with powered packages", self.id.0));
                }
            }
            PowerMode::Transition { to, .. } => {
                if to != SystemState::S0 && self.running_tasks() > 0 {
                    return Err(format!("server {} suspending with running tasks", self.id.0));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::JobId;

    fn profile() -> Arc<ServerPowerProfile> {
        Arc::new(ServerPowerProfile::example())
    }

    fn spec(cores: u32, mode: QueueMode) -> ServerSpec {
        ServerSpec { packages: 1, cores_per_package: cores, frequency_scales: vec![1.0], queue_mode: mode, served: TypeSet::ALL }
    }

    fn task(i: u32, ms: u64) -> QueuedTask {
        QueuedTask { task: TaskRef { job: JobId(0), index: i }, size: SimDuration::from_millis(ms), task_type: TaskType(0) }
    }

    fn server(cores: u32) -> Server {
        Server::new(ServerId(0), &spec(cores, QueueMode::Unified), profile(), SimTime(0)).unwrap()
    }

    #[test]
    fn service_duration_scales_with_frequency() {
        assert_eq!(task_service_duration(SimDuration::from_millis(5), 1.0), SimDuration::from_millis(5));
        assert_eq!(task_service_duration(SimDuration::from_millis(5), 0.5), SimDuration::from_millis(10));
        assert_eq!(task_service_duration(SimDuration::from_millis(120), 1.0), SimDuration::from_millis(120));
        assert_eq!(task_service_duration(SimDuration(10), 3.0), SimDuration(4));
    }

    #[test]
    fn lowest_idle_core_wins() {
        let mut s = server(4);
        let mut fx = Vec::new();
        assert_eq!(s.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap(), Placement::StartedOnCore(0));
        assert_eq!(
            fx,
            vec![ServerEffect::TaskStarted { core: 0, task: task(0, 5).task, finish_at: SimTime(5_000) }]
        );
    }

    #[test]
    fn full_server_queues_locally() {
        let mut s = server(4);
        let mut fx = Vec::new();
        for i in 0..4 {
            s.enqueue_task(task(i, 5), SimTime(0), &mut fx).unwrap();
        }
        assert_eq!(s.enqueue_task(task(4, 5), SimTime(0), &mut fx).unwrap(), Placement::QueuedLocal);
        assert_eq!(s.local_queue_len(), 1);
        assert_eq!(s.pending_tasks(), 5);
    }

    #[test]
    fn per_core_mode_queues_on_cores() {
        let mut s = Server::new(ServerId(0), &spec(2, QueueMode::PerCore), profile(), SimTime(0)).unwrap();
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap();
        s.enqueue_task(task(1, 5), SimTime(0), &mut fx).unwrap();
        assert_eq!(s.enqueue_task(task(2, 5), SimTime(0), &mut fx).unwrap(), Placement::QueuedOnCore(0));
        assert_eq!(s.enqueue_task(task(3, 5), SimTime(0), &mut fx).unwrap(), Placement::QueuedOnCore(1));
        // Core 1 finishes; its own queue feeds it.
        let (_, next) = s.complete_task(1, SimTime(5_000), |_| None, &mut fx).unwrap();
        assert_eq!(next, NextAction::PulledLocal(task(3, 5).task));
    }

    #[test]
    fn per_core_mode_never_steals() {
        let mut s = Server::new(ServerId(0), &spec(2, QueueMode::PerCore), profile(), SimTime(0)).unwrap();
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap();
        s.enqueue_task(task(1, 50), SimTime(0), &mut fx).unwrap();
        assert_eq!(s.enqueue_task(task(2, 5), SimTime(0), &mut fx).unwrap(), Placement::QueuedOnCore(0));
        assert_eq!(s.enqueue_task(task(3, 5), SimTime(0), &mut fx).unwrap(), Placement::QueuedOnCore(1));
        s.complete_task(0, SimTime(5_000), |_| None, &mut fx).unwrap();
        let (_, next) = s.complete_task(0, SimTime(10_000), |_| None, &mut fx).unwrap();
        assert_eq!(next, NextAction::Idle, "core 1's queue is not stolen");
        assert_eq!(s.cores()[1].queue_len(), 1);
    }

    #[test]
    fn completion_pulls_local_then_global() {
        let mut s = server(1);
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap();
        s.enqueue_task(task(1, 5), SimTime(0), &mut fx).unwrap();
        let (done, next) = s.complete_task(0, SimTime(5_000), |_| Some(task(9, 1)), &mut fx).unwrap();
        assert_eq!(done.task, task(0, 5).task);
        assert_eq!(next, NextAction::PulledLocal(task(1, 5).task));
        assert!(s.cores()[0].mode().is_steady(CoreState::Active));
        let (_, next) = s.complete_task(0, SimTime(10_000), |_| Some(task(9, 1)), &mut fx).unwrap();
        assert_eq!(next, NextAction::PulledGlobal(task(9, 1).task));
        let (_, next) = s.complete_task(0, SimTime(10_001), |_| None, &mut fx).unwrap();
        assert_eq!(next, NextAction::Idle);
        assert!(s.is_idle());
    }

    #[test]
    fn sleeping_core_wakes_before_start() {
        let mut s = server(4);
        // Keep the package awake: one core busy, the rest in C6.
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 1_000), SimTime(0), &mut fx).unwrap();
        s.set_local_policy(LocalPowerPolicy { core_sleep: Some(CoreState::C6), package_sleep: true }, SimTime(0));
        fx.clear();
        let now = SimTime::from_secs_f64(0.1);
        assert_eq!(s.enqueue_task(task(1, 5), now, &mut fx).unwrap(), Placement::StartedOnCore(1));
        assert_eq!(fx, vec![ServerEffect::StartAt { core: 1, at: SimTime(100_500) }]);
        let (_, finish) = s.begin_task(1, SimTime(100_500)).unwrap();
        assert_eq!(finish, SimTime(105_500));
    }

    #[test]
    fn package_wake_precedes_core_wake() {
        let mut s = server(2);
        s.set_local_policy(LocalPowerPolicy { core_sleep: Some(CoreState::C6), package_sleep: true }, SimTime(0));
        assert!(s.package_mode(0).is_steady(PackageState::PkgC6));
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 5), SimTime(1_000), &mut fx).unwrap();
        // 100 us package exit, then 500 us core exit.
        assert!(fx.contains(&ServerEffect::StartAt { core: 0, at: SimTime(1_600) }));
        assert!(fx.contains(&ServerEffect::TransitionDone { component: ServerComponent::Package(0), at: SimTime(1_100) }));
        s.check_invariants().unwrap();
    }

    #[test]
    fn package_c6_gated_on_all_cores() {
        let mut s = server(4);
        let mut fx = Vec::new();
        for c in 0..4 {
            s.request_state_transition(TransitionTarget::Core(c, CoreState::C6), SimTime(0), &mut fx).unwrap();
        }
        assert_eq!(s.request_state_transition(TransitionTarget::Package(0, PackageState::PkgC6), SimTime(0), &mut fx), Ok(SimTime(0)));

        let mut busy = server(4);
        busy.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap();
        for c in 1..4 {
            busy.request_state_transition(TransitionTarget::Core(c, CoreState::C6), SimTime(0), &mut fx).unwrap();
        }
        assert!(matches!(
            busy.request_state_transition(TransitionTarget::Package(0, PackageState::PkgC6), SimTime(0), &mut fx),
            Err(ServerError::IllegalTransition(_))
        ));
    }

    #[test]
    fn suspend_then_resume_latency() {
        let p = profile();
        let mut s = server(4);
        let mut fx = Vec::new();
        let t = SimTime::from_secs_f64(10.0);
        let entered = s.begin_sleep(SystemState::S3, t, &mut fx).unwrap();
        assert_eq!(entered, t + p.s3_entry);
        s.transition_complete(ServerComponent::System, entered, &mut fx).unwrap();
        assert!(s.system_mode().is_steady(SystemState::S3));
        s.check_invariants().unwrap();

        let delta = SimDuration::from_secs(2);
        fx.clear();
        let wake_at = t + delta;
        assert_eq!(s.enqueue_task(task(0, 5), wake_at, &mut fx).unwrap(), Placement::QueuedLocal);
        let ready = wake_at + p.s3_exit;
        assert_eq!(fx, vec![ServerEffect::TransitionDone { component: ServerComponent::System, at: ready }]);
        fx.clear();
        s.transition_complete(ServerComponent::System, ready, &mut fx).unwrap();
        assert_eq!(
            fx,
            vec![ServerEffect::TaskStarted { core: 0, task: task(0, 5).task, finish_at: ready + SimDuration::from_millis(5) }]
        );
    }

    #[test]
    fn wake_during_suspend_entry_is_deferred() {
        let p = profile();
        let mut s = server(1);
        let mut fx = Vec::new();
        let entered = s.begin_sleep(SystemState::S3, SimTime(0), &mut fx).unwrap();
        fx.clear();
        s.enqueue_task(task(0, 5), SimTime(1), &mut fx).unwrap();
        assert!(fx.is_empty());
        s.transition_complete(ServerComponent::System, entered, &mut fx).unwrap();
        assert_eq!(fx, vec![ServerEffect::TransitionDone { component: ServerComponent::System, at: entered + p.s3_exit }]);
    }

    #[test]
    fn sleep_requires_idle_server() {
        let mut s = server(2);
        let mut fx = Vec::new();
        s.enqueue_task(task(0, 5), SimTime(0), &mut fx).unwrap();
        assert!(s.begin_sleep(SystemState::S3, SimTime(0), &mut fx).is_err());
        assert!(matches!(
            s.request_state_transition(TransitionTarget::System(SystemState::S3), SimTime(0), &mut fx),
            Err(ServerError::IllegalTransition(_))
        ));
    }

    #[test]
    fn unserved_type_is_rejected() {
        let mut sp = spec(1, QueueMode::Unified);
        sp.served = TypeSet::only(TaskType(1));
        let mut s = Server::new(ServerId(3), &sp, profile(), SimTime(0)).unwrap();
        let mut fx = Vec::new();
        assert_eq!(s.enqueue_task(task(0, 5), SimTime(0), &mut fx), Err(ServerError::NotServed { server: 3, task_type: 0 }));
    }

    fn arithmetic_profile() -> ServerPowerProfile {
        ServerPowerProfile {
            core_active: Power::from_watts(8.0),
            core_idle: Power::from_watts(8.0),
            core_c6: Power::from_watts(0.5),
            core_c1: Power::from_watts(0.5),
            core_c3: Power::from_watts(0.5),
            package_c0: Power::from_watts(10.0),
            package_c6: Power::from_watts(2.0),
            platform_s0: Power::from_watts(30.0),
            platform_s3: Power::from_watts(3.0),
            ..ServerPowerProfile::example()
        }
    }

    #[test]
    fn additive_power_composition() {
        let p = Arc::new(arithmetic_profile());
        let mut s = Server::new(ServerId(0), &spec(4, QueueMode::Unified), p, SimTime(0)).unwrap();
        let mut fx = Vec::new();
        for i in 0..4 {
            s.enqueue_task(task(i, 5), SimTime(0), &mut fx).unwrap();
        }
        assert_eq!(s.power(), Power::from_watts(72.0));
        for c in 0..4 {
            s.complete_task(c, SimTime(5_000), |_| None, &mut fx).unwrap();
        }
        let t = SimTime(5_000);
        s.begin_sleep(SystemState::S3, t, &mut fx).unwrap();
        // Transition draws the S0 side: 4 x 0.5 + 2 + max(30, 3).
        assert_eq!(s.power(), Power::from_watts(34.0));
        s.transition_complete(ServerComponent::System, t + s.profile().s3_entry, &mut fx).unwrap();
        assert_eq!(s.power(), Power::from_watts(3.0));
    }

    #[test]
    fn busy_residency_matches_service_time() {
        let mut s = server(1);
        let mut fx = Vec::new();
        let mut now = SimTime(0);
        let mut total = SimDuration::ZERO;
        s.enqueue_task(task(0, 3), now, &mut fx).unwrap();
        for i in 1..20u32 {
            let w = 1 + (i as u64 * 7) % 9;
            s.enqueue_task(task(i, w), now, &mut fx).unwrap();
        }
        for _ in 0..20 {
            let finish = fx
                .iter()
                .rev()
                .find_map(|e| match e {
                    ServerEffect::TaskStarted { finish_at, .. } => Some(*finish_at),
                    _ => None,
                })
                .unwrap();
            total = total + (finish - now);
            now = finish;
            fx.clear();
            s.complete_task(0, now, |_| None, &mut fx).unwrap();
        }
        s.flush(now);
        assert_eq!(s.core_active_time(), total);
        assert!(s.residency_conserved());
    }

    #[test]
    fn profile_validation() {
        ServerPowerProfile::example().validate().unwrap();
        let bad = ServerPowerProfile { core_c6: Power::from_watts(100.0), ..ServerPowerProfile::example() };
        assert!(bad.validate().is_err());
        let bad = ServerPowerProfile { core_c6_wake: SimDuration::ZERO, ..ServerPowerProfile::example() };
        assert!(bad.validate().is_err());
    }
}
