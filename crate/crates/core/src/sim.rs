//! One simulation instance: wires workload, servers, network, scheduler and
//! power controller onto the event engine and collects run statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{EngineError, EventHandle, RngStream, Scheduler, SimDuration, SimTime, StreamId};
use crate::network::{NetEffect, NetError, Network, NetworkParams, Node, SwitchComponent, SwitchId, TransferId};
use crate::powerpolicy::{FleetState, Pool, PowerCmd, PowerController};
use crate::scheduling::{
    Decision, DispatchRecord, GlobalScheduler, JobProgress, PlacedParent, PlacementPolicy, QueueEntry, ServerView,
};
use crate::server::{
    LocalPowerPolicy, Placement, QueuedTask, Server, ServerActivity, ServerComponent, ServerEffect, ServerError, ServerId,
    ServerPowerProfile, ServerSpec, SystemState, TransitionTarget,
};
use crate::stats::{Energy, EnergyAccount, LatencyRecorder, Metric, Power, PowerMode, ResidencyLedger, Sample, Summary, TimeSeries};
use crate::workload::{ArrivalProcess, JobId, JobTemplate, TaskRef, TypeSet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("network: {0}")]
    Network(#[from] NetError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("invariant violated at {at:?}: {what}")]
    Invariant { at: SimTime, what: String },
    #[error("setup: {0}")]
    Setup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopCondition {
    /// Stop the clock at this instant; jobs in flight are left unfinished.
    Duration(SimDuration),
    /// Admit this many arrivals, then run until all of them finish.
    Jobs(u64),
    /// Replay the whole (finite) arrival source, then drain.
    Exhaust,
}

pub struct SimSetup {
    pub seed: u64,
    pub stop: StopCondition,
    /// Safety cap for the draining stop conditions.
    pub time_limit: Option<SimDuration>,
    pub sample_interval: Option<SimDuration>,
    pub servers: Vec<ServerSpec>,
    pub profile: ServerPowerProfile,
    pub local: LocalPowerPolicy,
    pub network: Option<NetworkParams>,
    pub arrivals: ArrivalProcess,
    pub template: JobTemplate,
    pub policy: Box<dyn PlacementPolicy>,
    pub global_queue: bool,
    pub controller: Box<dyn PowerController>,
    pub audit: bool,
    /// Check component invariants after every event (slow).
    pub check_invariants: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ev {
    Arrival,
    TaskStart { s: ServerId, core: u32 },
    TaskComplete { s: ServerId, core: u32 },
    ServerDone { s: ServerId, comp: ServerComponent },
    SwitchDone { w: SwitchId, comp: SwitchComponent },
    FlowTimer,
    TxDone { resource: usize },
    Arrive { packet: u64 },
    Coalesce { w: SwitchId, port: u32 },
    Timer { s: ServerId },
    Sample,
}

/// Typed run metrics; [`RunMetrics::to_summary`] fixes the emitted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub sim_time_s: f64,
    pub drained: bool,
    pub jobs_arrived: u64,
    pub jobs_completed: u64,
    pub jobs_rejected: u64,
    pub tasks_dispatched: u64,
    pub latency_mean_s: Option<f64>,
    pub latency_p50_s: Option<f64>,
    pub latency_p90_s: Option<f64>,
    pub latency_p95_s: Option<f64>,
    pub latency_p99_s: Option<f64>,
    pub energy_total_j: f64,
    pub energy_server_j: f64,
    pub energy_network_j: f64,
    pub avg_power_w: f64,
    pub core_active_fraction: f64,
    pub server_sleep_fraction: f64,
    pub sleep_pool_deep_fraction: f64,
    pub awake_switch_seconds: f64,
    pub server_suspends: u64,
    pub server_resumes: u64,
    pub transfers_started: u64,
    pub transfers_completed: u64,
    pub packets_sent: u64,
    pub packets_dropped: u64,
    pub controller: Vec<(&'static str, u64)>,
    pub residency_conserved: bool,
    pub energy_additive: bool,
    pub flow_conservation_violations: u64,
    pub events: u64,
}

fn secs(v: Option<f64>) -> Metric {
    v.map_or(Metric::Text("na".into()), Metric::Real)
}

impl RunMetrics {
    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::new();
        s.push("seed", Metric::Int(self.seed));
        s.push("sim_time_s", Metric::Real(self.sim_time_s));
        s.push("drained", Metric::Int(self.drained as u64));
        s.push("jobs_arrived", Metric::Int(self.jobs_arrived));
        s.push("jobs_completed", Metric::Int(self.jobs_completed));
        s.push("jobs_rejected", Metric::Int(self.jobs_rejected));
        s.push("tasks_dispatched", Metric::Int(self.tasks_dispatched));
        s.push("latency_mean_s", secs(self.latency_mean_s));
        s.push("latency_p50_s", secs(self.latency_p50_s));
        s.push("latency_p90_s", secs(self.latency_p90_s));
        s.push("latency_p95_s", secs(self.latency_p95_s));
        s.push("latency_p99_s", secs(self.latency_p99_s));
        s.push("energy_total_j", Metric::Real(self.energy_total_j));
        s.push("energy_server_j", Metric::Real(self.energy_server_j));
        s.push("energy_network_j", Metric::Real(self.energy_network_j));
        s.push("avg_power_w", Metric::Real(self.avg_power_w));
        s.push("core_active_fraction", Metric::Real(self.core_active_fraction));
        s.push("server_sleep_fraction", Metric::Real(self.server_sleep_fraction));
        s.push("sleep_pool_deep_fraction", Metric::Real(self.sleep_pool_deep_fraction));
        s.push("awake_switch_seconds", Metric::Real(self.awake_switch_seconds));
        s.push("server_suspends", Metric::Int(self.server_suspends));
        s.push("server_resumes", Metric::Int(self.server_resumes));
        s.push("transfers_started", Metric::Int(self.transfers_started));
        s.push("transfers_completed", Metric::Int(self.transfers_completed));
        s.push("packets_sent", Metric::Int(self.packets_sent));
        s.push("packets_dropped", Metric::Int(self.packets_dropped));
        for &(k, v) in &self.controller {
            s.push(k, Metric::Int(v));
        }
        s.push("residency_conserved", Metric::Int(self.residency_conserved as u64));
        s.push("energy_additive", Metric::Int(self.energy_additive as u64));
        s.push("flow_conservation_violations", Metric::Int(self.flow_conservation_violations));
        s.push("events", Metric::Int(self.events));
        s
    }
}

pub struct SimReport {
    pub metrics: RunMetrics,
    pub series: Option<TimeSeries>,
    pub energy: EnergyAccount,
    /// Sojourn times in µs, completion order.
    pub latencies: Vec<u64>,
    /// Core-seconds spent running tasks, per server.
    pub server_active_s: Vec<f64>,
    pub audit: Option<Vec<DispatchRecord>>,
}

impl SimReport {
    pub fn summary(&self) -> Summary {
        self.metrics.to_summary()
    }
}

/// ECMP key and transfer id of the data on edge `from -> to` of a job.
/// Templates are limited to 256 tasks, so the id is unique.
pub fn transfer_key(job: JobId, from: u32, to: u32) -> u64 {
    (job.0 << 16) | ((from as u64) << 8) | to as u64
}

pub const MAX_TEMPLATE_TASKS: usize = 256;

pub struct Simulation {
    seed: u64,
    stop: StopCondition,
    time_limit: Option<SimDuration>,
    sched: Scheduler<Ev>,
    servers: Vec<Server>,
    net: Option<Network>,
    relays: bool,
    arrivals: ArrivalProcess,
    arrival_rng: RngStream,
    service_rng: RngStream,
    template: JobTemplate,
    servable: bool,
    gs: GlobalScheduler,
    ctl: Box<dyn PowerController>,
    jobs: BTreeMap<JobId, JobProgress>,
    transfers: BTreeMap<TransferId, (JobId, u32)>,
    reserved: Vec<u32>,
    timers: Vec<Option<EventHandle>>,
    flow_timer: Option<EventHandle>,
    idle_key: Vec<bool>,
    pools: Vec<Pool>,
    pool_ledgers: Vec<ResidencyLedger<(Pool, ServerActivity)>>,
    dirty: BTreeSet<ServerId>,
    latency: LatencyRecorder,
    series: Option<TimeSeries>,
    check: bool,
    next_job: u64,
    arrivals_done: bool,
    finished: bool,
    jobs_arrived: u64,
    jobs_completed: u64,
    jobs_rejected: u64,
    transfers_completed: u64,
    suspends: u64,
    resumes: u64,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Result<Self, SimError> {
        let now = SimTime::ZERO;
        if setup.servers.is_empty() {
            return Err(SimError::Setup("the fleet has no servers".into()));
        }
        if setup.template.tasks().len() > MAX_TEMPLATE_TASKS {
            return Err(SimError::Setup(format!("job templates are limited to {MAX_TEMPLATE_TASKS} tasks")));
        }
        let profile = Arc::new(setup.profile);
        let mut servers = Vec::with_capacity(setup.servers.len());
        for (i, spec) in setup.servers.iter().enumerate() {
            let mut srv = Server::new(ServerId(i as u32), spec, Arc::clone(&profile), now)?;
            srv.set_local_policy(setup.local, now);
            servers.push(srv);
        }
        let n = servers.len();
        let net = match setup.network {
            Some(p) => {
                let net = Network::new(p, now)?;
                if net.topology().n_servers() != n {
                    return Err(SimError::Setup(format!(
                        "topology attaches {} servers but the fleet has {n}",
                        net.topology().n_servers()
                    )));
                }
                Some(net)
            }
            None => None,
        };
        let relays = net
            .as_ref()
            .is_some_and(|net| (0..n as u32).any(|s| net.topology().ports(Node::Server(ServerId(s))).len() > 1));
        let all_served = servers.iter().fold(TypeSet(0), |acc, s| TypeSet(acc.0 | s.served().0));
        let servable = setup.template.tasks().iter().all(|t| all_served.contains(t.task_type));
        let pools = (0..n as u32).map(|s| setup.controller.pool_of(ServerId(s)).unwrap_or(Pool::Active)).collect::<Vec<_>>();
        let pool_ledgers = servers.iter().zip(&pools).map(|(s, &p)| ResidencyLedger::new((p, s.activity()), now)).collect();
        Ok(Simulation {
            seed: setup.seed,
            stop: setup.stop,
            time_limit: setup.time_limit,
            sched: Scheduler::new(),
            net,
            relays,
            arrivals: setup.arrivals,
            arrival_rng: RngStream::new(setup.seed, StreamId::Arrivals),
            service_rng: RngStream::new(setup.seed, StreamId::ServiceTimes),
            template: setup.template,
            servable,
            gs: GlobalScheduler::new(setup.policy, setup.global_queue, setup.audit),
            ctl: setup.controller,
            jobs: BTreeMap::new(),
            transfers: BTreeMap::new(),
            reserved: vec![0; n],
            timers: vec![None; n],
            flow_timer: None,
            idle_key: servers.iter().map(|s| s.is_awake() && s.is_idle()).collect(),
            pools,
            pool_ledgers,
            dirty: BTreeSet::new(),
            latency: LatencyRecorder::new(),
            series: setup.sample_interval.map(TimeSeries::new),
            check: setup.check_invariants,
            next_job: 0,
            arrivals_done: false,
            finished: false,
            jobs_arrived: 0,
            jobs_completed: 0,
            jobs_rejected: 0,
            transfers_completed: 0,
            suspends: 0,
            resumes: 0,
            servers,
        })
    }

    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn at(&mut self, t: SimTime, ev: Ev) -> EventHandle {
        let t = t.max(self.sched.now());
        self.sched.schedule(t, ev).expect("clamped to the present")
    }

    pub fn run(mut self) -> Result<SimReport, SimError> {
        let now = SimTime::ZERO;
        if let Some(net) = &mut self.net {
            let mut fx = Vec::new();
            net.init(now, &mut fx);
            self.net_fx(fx);
        }
        self.with_ctl(now, |c, f, cmds| c.init(f, now, cmds))?;
        self.process_dirty(now)?;
        self.schedule_next_arrival(now);
        if let Some(ts) = &self.series {
            let iv = ts.interval;
            self.at(now + iv, Ev::Sample);
        }
        let t_end = match self.stop {
            StopCondition::Duration(d) => SimTime(d.0),
            _ => self.time_limit.map_or(SimTime(u64::MAX), |d| SimTime(d.0)),
        };
        while !self.finished {
            let Some(ev) = self.sched.pop_until(t_end) else { break };
            self.handle(ev.kind)?;
        }
        let end = match self.stop {
            StopCondition::Duration(_) => {
                self.sched.advance_to(t_end)?;
                t_end
            }
            _ if self.finished => self.now(),
            _ => {
                if t_end.0 != u64::MAX {
                    self.sched.advance_to(t_end)?;
                }
                self.now()
            }
        };
        Ok(self.finish(end))
    }

    fn schedule_next_arrival(&mut self, now: SimTime) {
        if let StopCondition::Jobs(n) = self.stop {
            if self.jobs_arrived >= n {
                self.arrivals_done = true;
                return;
            }
        }
        match self.arrivals.next_arrival(&mut self.arrival_rng) {
            Some(t) => {
                self.at(t.max(now), Ev::Arrival);
            }
            None => self.arrivals_done = true,
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        let now = self.now();
        match ev {
            Ev::Arrival => self.on_arrival(now)?,
            Ev::TaskStart { s, core } => {
                let (_, finish) = self.servers[s.idx()].begin_task(core, now)?;
                self.at(finish, Ev::TaskComplete { s, core });
                self.dirty.insert(s);
            }
            Ev::TaskComplete { s, core } => self.on_task_complete(s, core, now)?,
            Ev::ServerDone { s, comp } => self.on_server_done(s, comp, now)?,
            Ev::SwitchDone { w, comp } => {
                let mut fx = Vec::new();
                let servers = &self.servers;
                let awake = |s: ServerId| servers[s.idx()].is_awake();
                self.net.as_mut().expect("network").on_switch_done(w, comp, now, &awake, &mut fx)?;
                self.net_fx(fx);
            }
            Ev::FlowTimer => {
                self.flow_timer = None;
                let mut fx = Vec::new();
                let done = self.net.as_mut().expect("network").on_flow_timer(now, &mut fx);
                self.net_fx(fx);
                self.transfers_done(done, now)?;
            }
            Ev::TxDone { resource } => {
                let mut fx = Vec::new();
                let done = self.net.as_mut().expect("network").on_tx_done(resource, now, &mut fx);
                self.net_fx(fx);
                self.transfers_done(done, now)?;
            }
            Ev::Arrive { packet } => {
                let mut fx = Vec::new();
                let done = self.net.as_mut().expect("network").on_packet_arrive(packet, now, &mut fx);
                self.net_fx(fx);
                self.transfers_done(done, now)?;
            }
            Ev::Coalesce { w, port } => {
                let mut fx = Vec::new();
                self.net.as_mut().expect("network").on_coalesce_timer(w, port, now, &mut fx);
                self.net_fx(fx);
            }
            Ev::Timer { s } => {
                self.timers[s.idx()] = None;
                self.with_ctl(now, |c, f, cmds| c.on_timer(s, f, now, cmds))?;
            }
            Ev::Sample => {
                let sample = self.sample(now);
                let ts = self.series.as_mut().expect("sampling enabled");
                ts.push(sample);
                let iv = ts.interval;
                self.at(now + iv, Ev::Sample);
            }
        }
        if self.relays && matches!(ev, Ev::FlowTimer | Ev::TxDone { .. } | Ev::Arrive { .. } | Ev::SwitchDone { .. }) {
            self.dirty.extend((0..self.servers.len() as u32).map(ServerId));
        }
        self.process_dirty(now)?;
        if self.check {
            if let Some(net) = &self.net {
                net.check_invariants().map_err(|what| SimError::Invariant { at: now, what })?;
            }
        }
        Ok(())
    }

    fn sample(&self, now: SimTime) -> Sample {
        let server_power: Power = self.servers.iter().map(Server::power).sum();
        let net_power = self.net.as_ref().map_or(Power::ZERO, Network::power);
        Sample {
            time: now,
            active_servers: self.servers.iter().filter(|s| s.is_awake()).count() as u32,
            pending_jobs: self.jobs.len() as u64,
            fleet_power: server_power + net_power,
            awake_switches: self.net.as_ref().map_or(0, |n| n.awake_switches() as u32),
        }
    }

    fn hold(&self, s: usize) -> u32 {
        self.reserved[s] + self.net.as_ref().map_or(0, |n| n.relay_holds(ServerId(s as u32)))
    }

    fn pending_tasks(&self) -> usize {
        self.servers.iter().map(Server::pending_tasks).sum::<usize>() + self.gs.global_len()
    }

    fn with_ctl(
        &mut self,
        now: SimTime,
        f: impl FnOnce(&mut dyn PowerController, &FleetState<'_>, &mut Vec<PowerCmd>),
    ) -> Result<(), SimError> {
        let holds: Vec<u32> = (0..self.servers.len()).map(|s| self.hold(s)).collect();
        let pending_tasks = self.pending_tasks();
        let mut cmds = Vec::new();
        let fleet = FleetState { servers: &self.servers, holds: &holds, pending_jobs: self.jobs.len(), pending_tasks };
        f(self.ctl.as_mut(), &fleet, &mut cmds);
        self.apply(cmds, now)
    }

    fn apply(&mut self, cmds: Vec<PowerCmd>, now: SimTime) -> Result<(), SimError> {
        for cmd in cmds {
            match cmd {
                PowerCmd::Sleep(s, st) => {
                    let srv = &self.servers[s.idx()];
                    if !(srv.is_awake() && srv.is_idle() && self.hold(s.idx()) == 0) {
                        continue;
                    }
                    self.cancel_timer(s);
                    let mut fx = Vec::new();
                    match self.servers[s.idx()].begin_sleep(st, now, &mut fx) {
                        Ok(_) => {}
                        Err(ServerError::Busy) => continue,
                        Err(e) => return Err(e.into()),
                    }
                    self.server_fx(s, fx);
                }
                PowerCmd::Wake(s) => self.wake(s, now)?,
                PowerCmd::SetLocal(s, pol) => {
                    self.servers[s.idx()].set_local_policy(pol, now);
                    self.dirty.insert(s);
                }
                PowerCmd::ArmTimer(s, d) => {
                    self.cancel_timer(s);
                    let h = self.at(now + d, Ev::Timer { s });
                    self.timers[s.idx()] = Some(h);
                }
                PowerCmd::CancelTimer(s) => self.cancel_timer(s),
            }
        }
        Ok(())
    }

    fn cancel_timer(&mut self, s: ServerId) {
        if let Some(h) = self.timers[s.idx()].take() {
            self.sched.cancel(h);
        }
    }

    fn wake(&mut self, s: ServerId, now: SimTime) -> Result<(), SimError> {
        if self.servers[s.idx()].is_up() {
            return Ok(());
        }
        let mut fx = Vec::new();
        self.servers[s.idx()].request_state_transition(TransitionTarget::System(SystemState::S0), now, &mut fx)?;
        self.server_fx(s, fx);
        Ok(())
    }

    fn server_fx(&mut self, s: ServerId, fx: Vec<ServerEffect>) {
        for e in fx {
            match e {
                ServerEffect::TaskStarted { core, finish_at, .. } => {
                    self.at(finish_at, Ev::TaskComplete { s, core });
                }
                ServerEffect::StartAt { core, at } => {
                    self.at(at, Ev::TaskStart { s, core });
                }
                ServerEffect::TransitionDone { component, at } => {
                    self.at(at, Ev::ServerDone { s, comp: component });
                }
            }
        }
        self.dirty.insert(s);
    }

    fn net_fx(&mut self, fx: Vec<NetEffect>) {
        for e in fx {
            match e {
                NetEffect::SwitchDone { switch, component, at } => {
                    self.at(at, Ev::SwitchDone { w: switch, comp: component });
                }
                NetEffect::FlowTimer(t) => {
                    if let Some(h) = self.flow_timer.take() {
                        self.sched.cancel(h);
                    }
                    if let Some(t) = t {
                        self.flow_timer = Some(self.at(t, Ev::FlowTimer));
                    }
                }
                NetEffect::TxDone { resource, at } => {
                    self.at(at, Ev::TxDone { resource });
                }
                NetEffect::Arrive { packet, at } => {
                    self.at(at, Ev::Arrive { packet });
                }
                NetEffect::CoalesceTimer { switch, port, at } => {
                    self.at(at, Ev::Coalesce { w: switch, port });
                }
                NetEffect::WakeServer(s) => {
                    let now = self.now();
                    self.wake(s, now).expect("waking a suspended relay is always legal");
                    self.dirty.insert(s);
                }
            }
        }
    }

    /// Re-derives idle/busy edges of touched servers and reports them to the
    /// controller; updates pool residency.
    fn process_dirty(&mut self, now: SimTime) -> Result<(), SimError> {
        while let Some(s) = self.dirty.pop_first() {
            let i = s.idx();
            let srv = &self.servers[i];
            if self.check {
                srv.check_invariants().map_err(|what| SimError::Invariant { at: now, what })?;
            }
            self.pool_ledgers[i].on_transition((self.pools[i], srv.activity()), now).expect("pool ledger regression");
            let busy = !srv.is_idle();
            let key = srv.is_awake() && !busy && self.hold(i) == 0;
            if key != self.idle_key[i] {
                self.idle_key[i] = key;
                if key {
                    self.with_ctl(now, |c, f, cmds| c.on_server_idle(s, f, now, cmds))?;
                } else if busy {
                    self.with_ctl(now, |c, f, cmds| c.on_server_busy(s, f, now, cmds))?;
                }
            }
        }
        Ok(())
    }

    fn after_dispatch(&mut self, now: SimTime) -> Result<(), SimError> {
        self.with_ctl(now, |c, f, cmds| c.on_dispatch(f, now, cmds))?;
        for i in 0..self.servers.len() {
            let p = self.ctl.pool_of(ServerId(i as u32)).unwrap_or(Pool::Active);
            if p != self.pools[i] {
                self.pools[i] = p;
                self.dirty.insert(ServerId(i as u32));
            }
        }
        Ok(())
    }

    fn place(&mut self, task: TaskRef, parents: &[PlacedParent], allow_global: bool, now: SimTime) -> Option<Decision> {
        let jp = &self.jobs[&task.job];
        let task_type = jp.job.tasks[task.index as usize].task_type;
        let views: Vec<ServerView> = self
            .servers
            .iter()
            .enumerate()
            .map(|(i, s)| ServerView {
                id: s.id(),
                pending: s.pending_tasks() + self.reserved[i] as usize,
                // reserved children will claim a core when their parents finish
                has_free_core: s.free_cores() > self.reserved[i] as usize,
                awake: s.is_awake(),
                served: s.served(),
            })
            .collect();
        let holds: Vec<u32> = (0..self.servers.len()).map(|s| self.hold(s)).collect();
        let fleet = FleetState {
            servers: &self.servers,
            holds: &holds,
            pending_jobs: self.jobs.len(),
            pending_tasks: self.pending_tasks(),
        };
        let tiers = self.ctl.tiers(&fleet);
        // Queue globally only while some eligible server is working and will pull.
        let allow_global = allow_global && self.servers.iter().any(|s| s.serves(task_type) && s.running_tasks() > 0);
        self.gs.decide(task, task_type, &tiers, &views, parents, self.net.as_ref(), allow_global, now)
    }

    fn enqueue(&mut self, s: ServerId, qt: QueuedTask, now: SimTime) -> Result<(), SimError> {
        let mut fx = Vec::new();
        let placement = self.servers[s.idx()].enqueue_task(qt, now, &mut fx)?;
        self.server_fx(s, fx);
        let entry = match placement {
            Placement::StartedOnCore(_) => QueueEntry::Immediate,
            Placement::QueuedLocal => QueueEntry::ServerLocal,
            Placement::QueuedOnCore(_) => QueueEntry::CoreLocal,
        };
        self.gs.record(DispatchRecord { task: qt.task, server: Some(s), time: now, entry });
        Ok(())
    }

    fn on_arrival(&mut self, now: SimTime) -> Result<(), SimError> {
        let id = JobId(self.next_job);
        self.next_job += 1;
        self.jobs_arrived += 1;
        let job = self.template.instantiate(id, now, &mut self.service_rng);
        if !self.servable {
            self.jobs_rejected += 1;
        } else {
            self.jobs.insert(id, JobProgress::new(job, &self.template));
            let roots: Vec<u32> = self.template.roots().collect();
            for t in roots {
                let task = TaskRef { job: id, index: t };
                let qt = self.jobs[&id].queued_task(t);
                let decision = self.place(task, &[], true, now).expect("servable template has eligible servers");
                let jp = self.jobs.get_mut(&id).expect("job just inserted");
                jp.mark_released(t);
                match decision {
                    Decision::Server(s) => {
                        jp.place(t, s);
                        self.enqueue(s, qt, now)?;
                    }
                    Decision::GlobalQueued => {
                        self.gs.global_queue().expect("global queue enabled").push(qt);
                        self.gs.record(DispatchRecord { task, server: None, time: now, entry: QueueEntry::Global });
                    }
                }
                self.after_dispatch(now)?;
            }
        }
        self.schedule_next_arrival(now);
        self.check_finished();
        Ok(())
    }

    fn check_finished(&mut self) {
        if self.arrivals_done && self.jobs.is_empty() && !matches!(self.stop, StopCondition::Duration(_)) {
            self.finished = true;
        }
    }

    fn on_task_complete(&mut self, s: ServerId, core: u32, now: SimTime) -> Result<(), SimError> {
        let mut fx = Vec::new();
        let gs = &mut self.gs;
        let (done, _) = self.servers[s.idx()].complete_task(core, now, |served| gs.global_queue().and_then(|q| q.pull(served)), &mut fx)?;
        self.server_fx(s, fx);
        let job = done.task.job;
        let t = done.task.index;
        let Some(jp) = self.jobs.get_mut(&job) else {
            return Ok(());
        };
        let finished = jp.task_done();
        let children: Vec<u32> = self.template.children(t).to_vec();
        for c in children {
            self.jobs.get_mut(&job).expect("job in flight").parent_done(c);
            let dst = match self.jobs[&job].server_of(c) {
                Some(d) => d,
                None => {
                    let parents = self.placed_parents(job, c);
                    let task = TaskRef { job, index: c };
                    let Some(Decision::Server(d)) = self.place(task, &parents, false, now) else {
                        unreachable!("children of an admitted job always find a server");
                    };
                    self.jobs.get_mut(&job).expect("job in flight").place(c, d);
                    self.reserved[d.idx()] += 1;
                    self.dirty.insert(d);
                    self.wake(d, now)?;
                    self.after_dispatch(now)?;
                    d
                }
            };
            let bytes = self.template.edge(t, c).map_or(0, |e| e.bytes);
            if bytes > 0 && dst != s && self.net.is_some() {
                let id = TransferId(transfer_key(job, t, c));
                self.jobs.get_mut(&job).expect("job in flight").transfer_started(c);
                self.transfers.insert(id, (job, c));
                let mut fx = Vec::new();
                let servers = &self.servers;
                let awake = |s: ServerId| servers[s.idx()].is_awake();
                self.net.as_mut().expect("network").start_transfer(id, s, dst, bytes, now, &awake, &mut fx)?;
                self.net_fx(fx);
            }
            if self.jobs.get_mut(&job).expect("job in flight").take_ready(c) {
                self.release(job, c, now)?;
            }
        }
        if finished {
            let mut jp = self.jobs.remove(&job).expect("job in flight");
            jp.job.completion = Some(now);
            self.latency.record(now - jp.job.arrival);
            self.jobs_completed += 1;
            self.check_finished();
        }
        Ok(())
    }

    fn placed_parents(&self, job: JobId, c: u32) -> Vec<PlacedParent> {
        let jp = &self.jobs[&job];
        self.template
            .parents(c)
            .iter()
            .filter(|&&p| self.template.edge(p, c).is_some_and(|e| e.bytes > 0))
            .filter_map(|&p| jp.server_of(p).map(|server| PlacedParent { server, flow_key: transfer_key(job, p, c) }))
            .collect()
    }

    fn release(&mut self, job: JobId, c: u32, now: SimTime) -> Result<(), SimError> {
        let jp = &self.jobs[&job];
        let d = jp.server_of(c).expect("released tasks are placed");
        let qt = jp.queued_task(c);
        self.reserved[d.idx()] -= 1;
        self.enqueue(d, qt, now)
    }

    fn transfers_done(&mut self, done: Vec<TransferId>, now: SimTime) -> Result<(), SimError> {
        for id in done {
            let (job, c) = self.transfers.remove(&id).expect("known transfer");
            self.transfers_completed += 1;
            let jp = self.jobs.get_mut(&job).expect("job waits on its transfers");
            jp.transfer_done(c);
            if jp.take_ready(c) {
                self.release(job, c, now)?;
            }
        }
        Ok(())
    }

    fn on_server_done(&mut self, s: ServerId, comp: ServerComponent, now: SimTime) -> Result<(), SimError> {
        let mut fx = Vec::new();
        let was = self.servers[s.idx()].system_mode();
        self.servers[s.idx()].transition_complete(comp, now, &mut fx)?;
        self.server_fx(s, fx);
        if comp != ServerComponent::System {
            return Ok(());
        }
        match was {
            PowerMode::Transition { to: SystemState::S0, .. } => {
                self.resumes += 1;
                // Idle cores of a resumed server pick up globally queued work.
                loop {
                    let srv = &self.servers[s.idx()];
                    if !srv.has_free_core() {
                        break;
                    }
                    let served = srv.served();
                    let Some(qt) = self.gs.global_queue().and_then(|q| q.pull(served)) else { break };
                    let mut fx = Vec::new();
                    self.servers[s.idx()].enqueue_task(qt, now, &mut fx)?;
                    self.server_fx(s, fx);
                }
            }
            _ => self.suspends += 1,
        }
        if self.relays {
            let mut fx = Vec::new();
            let servers = &self.servers;
            let awake = |s: ServerId| servers[s.idx()].is_awake();
            self.net.as_mut().expect("network").on_servers_changed(now, &awake, &mut fx);
            self.net_fx(fx);
        }
        Ok(())
    }

    fn finish(mut self, end: SimTime) -> SimReport {
        for s in &mut self.servers {
            s.flush(end);
        }
        for (i, l) in self.pool_ledgers.iter_mut().enumerate() {
            l.on_transition((self.pools[i], self.servers[i].activity()), end).expect("pool ledger regression");
            l.flush(end).expect("pool ledger regression");
        }
        if let Some(net) = &mut self.net {
            net.flush(end);
        }
        let energy = EnergyAccount {
            servers: self.servers.iter().map(Server::energy).collect(),
            switches: self.net.as_ref().map_or_else(Vec::new, Network::switch_energies),
        };
        let summed: Energy = energy.servers.iter().chain(&energy.switches).copied().sum();
        let elapsed = end.as_secs_f64();
        let total_cores: usize = self.servers.iter().map(Server::core_count).sum();
        let active_core_us: u64 = self.servers.iter().map(|s| s.core_active_time().0).sum();
        let sleep_us: u64 = self
            .servers
            .iter()
            .map(|s| {
                let l = s.system_ledger();
                l.residency(PowerMode::Steady(SystemState::S3)).0 + l.residency(PowerMode::Steady(SystemState::SOff)).0
            })
            .sum();
        let (mut deep, mut non_busy) = (0u64, 0u64);
        for l in &self.pool_ledgers {
            for ((pool, act), d) in l.iter() {
                if pool == Pool::Sleep && act != ServerActivity::Busy {
                    non_busy += d.0;
                    if act == ServerActivity::Sleep {
                        deep += d.0;
                    }
                }
            }
        }
        let residency_conserved = self.servers.iter().all(Server::residency_conserved)
            && self.net.as_ref().is_none_or(Network::residency_conserved)
            && self.pool_ledgers.iter().all(|l| l.total() == l.elapsed() && l.elapsed() == SimDuration(end.0));
        let latencies = self.latency.values().to_vec();
        let pct = |rec: &mut LatencyRecorder, p: f64| rec.percentile(p).ok().map(|d| d.as_secs_f64());
        let ns = self.net.as_ref().map(|n| n.stats().clone()).unwrap_or_default();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let metrics = RunMetrics {
            seed: self.seed,
            sim_time_s: elapsed,
            drained: self.jobs.is_empty(),
            jobs_arrived: self.jobs_arrived,
            jobs_completed: self.jobs_completed,
            jobs_rejected: self.jobs_rejected,
            tasks_dispatched: self.gs.dispatches(),
            latency_mean_s: self.latency.mean().map(|m| m / 1e6),
            latency_p50_s: pct(&mut self.latency, 0.50),
            latency_p90_s: pct(&mut self.latency, 0.90),
            latency_p95_s: pct(&mut self.latency, 0.95),
            latency_p99_s: pct(&mut self.latency, 0.99),
            energy_total_j: energy.total().joules(),
            energy_server_j: energy.server_total().joules(),
            energy_network_j: energy.network_total().joules(),
            avg_power_w: if elapsed > 0.0 { energy.total().joules() / elapsed } else { 0.0 },
            core_active_fraction: ratio(active_core_us, total_cores as u64 * end.0),
            server_sleep_fraction: ratio(sleep_us, self.servers.len() as u64 * end.0),
            sleep_pool_deep_fraction: ratio(deep, non_busy),
            awake_switch_seconds: self.net.as_ref().map_or(0.0, Network::awake_switch_seconds),
            server_suspends: self.suspends,
            server_resumes: self.resumes,
            transfers_started: ns.transfers_started,
            transfers_completed: self.transfers_completed,
            packets_sent: ns.packets_sent,
            packets_dropped: ns.packets_dropped,
            controller: self.ctl.counters(),
            residency_conserved,
            energy_additive: summed == energy.total(),
            flow_conservation_violations: ns.conservation_violations,
            events: self.sched.dispatched(),
        };
        SimReport {
            metrics,
            series: self.series,
            server_active_s: self.servers.iter().map(|s| s.core_active_time().as_secs_f64()).collect(),
            latencies,
            audit: self.gs.audit().map(<[DispatchRecord]>::to_vec),
            energy,
        }
    }
}
