//! Global scheduling: server placement policies, the optional global task
//! queue, and DAG dependency release.
//!
//! Root tasks are placed when their job arrives. A child task is placed when
//! its first parent completes, so placement sees current queue depths and
//! switch states, and becomes ready once every parent is done and every
//! inbound transfer has been delivered.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::SimTime;
use crate::network::Network;
use crate::server::{QueuedTask, ServerId};
use crate::workload::{Job, JobTemplate, TaskRef, TaskType, TypeSet};

/// What a placement policy may look at for one server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServerView {
    pub id: ServerId,
    /// Queued plus running tasks.
    pub pending: usize,
    pub has_free_core: bool,
    /// Steady S0.
    pub awake: bool,
    pub served: TypeSet,
}

/// A parent already placed, whose output must reach the task being placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlacedParent {
    pub server: ServerId,
    /// ECMP key of the transfer the parent will send.
    pub flow_key: u64,
}

pub struct PlacementContext<'a> {
    pub task: TaskRef,
    pub task_type: TaskType,
    pub now: SimTime,
    /// Eligible servers, ascending id. Never empty.
    pub candidates: &'a [ServerId],
    /// Every server, indexed by id.
    pub servers: &'a [ServerView],
    pub parents: &'a [PlacedParent],
    pub network: Option<&'a Network>,
}

/// Extension point for server selection. Implementations must be
/// deterministic functions of their own state and the context.
pub trait PlacementPolicy: Send {
    fn name(&self) -> &str;
    /// Returns one of `ctx.candidates`.
    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId;
}

/// Next eligible server in cyclic id order.
#[derive(Clone, Debug, Default)]
pub struct RoundRobin {
    cursor: u32,
}

impl PlacementPolicy for RoundRobin {
    fn name(&self) -> &str {
        "round_robin"
    }

    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId {
        let n = ctx.servers.len() as u32;
        let c = self.cursor % n.max(1);
        let pick = ctx.candidates.iter().copied().find(|s| s.0 >= c).unwrap_or(ctx.candidates[0]);
        self.cursor = (pick.0 + 1) % n.max(1);
        pick
    }
}

/// Fewest pending tasks, lowest id on ties.
#[derive(Clone, Debug, Default)]
pub struct LoadBalance;

impl PlacementPolicy for LoadBalance {
    fn name(&self) -> &str {
        "load_balance"
    }

    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId {
        *ctx.candidates.iter().min_by_key(|s| (ctx.servers[s.idx()].pending, s.0)).expect("candidates are never empty")
    }
}

/// Lowest id with a free core, so work consolidates onto few servers;
/// fewest pending tasks when every candidate is full.
#[derive(Clone, Debug, Default)]
pub struct Packing;

impl PlacementPolicy for Packing {
    fn name(&self) -> &str {
        "packing"
    }

    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId {
        ctx.candidates
            .iter()
            .copied()
            .find(|s| ctx.servers[s.idx()].has_free_core)
            .unwrap_or_else(|| *ctx.candidates.iter().min_by_key(|s| (ctx.servers[s.idx()].pending, s.0)).expect("candidates are never empty"))
    }
}

/// Fewest additional switches to wake, lowest id on ties. Awake servers with
/// a free core are preferred when there are any.
///
/// Cost of a candidate is the number of asleep switches on the routes from
/// the placed parents' servers, or on its uplink when there are none.
#[derive(Clone, Debug, Default)]
pub struct NetworkAware;

pub fn network_cost(net: &Network, candidate: ServerId, parents: &[PlacedParent]) -> u32 {
    let remote: Vec<&PlacedParent> = parents.iter().filter(|p| p.server != candidate).collect();
    if parents.is_empty() {
        return net.uplink_wake_cost(candidate);
    }
    let mut asleep = Vec::new();
    for p in remote {
        if let Ok(route) = net.route(p.server, candidate, p.flow_key) {
            for w in net.route_switches(&route) {
                if !net.is_switch_awake(w) && !asleep.contains(&w) {
                    asleep.push(w);
                }
            }
        }
    }
    asleep.len() as u32
}

impl PlacementPolicy for NetworkAware {
    fn name(&self) -> &str {
        "network_aware"
    }

    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId {
        let ready: Vec<ServerId> = ctx
            .candidates
            .iter()
            .copied()
            .filter(|s| {
                let v = &ctx.servers[s.idx()];
                v.awake && v.has_free_core
            })
            .collect();
        let pool = if ready.is_empty() { ctx.candidates } else { &ready };
        match ctx.network {
            Some(net) => *pool.iter().min_by_key(|&&s| (network_cost(net, s, ctx.parents), s.0)).expect("nonempty pool"),
            None => pool[0],
        }
    }
}

pub type PolicyFactory = fn() -> Box<dyn PlacementPolicy>;

/// Placement policies by name.
#[derive(Clone)]
pub struct PolicyRegistry {
    entries: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = PolicyRegistry { entries: BTreeMap::new() };
        r.register("round_robin", || Box::new(RoundRobin::default()));
        r.register("load_balance", || Box::new(LoadBalance));
        r.register("network_aware", || Box::new(NetworkAware));
        r.register("packing", || Box::new(Packing));
        r
    }
}

impl PolicyRegistry {
    pub fn register(&mut self, name: &str, factory: PolicyFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str) -> Option<Box<dyn PlacementPolicy>> {
        self.entries.get(name).map(|f| f())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// FIFO of tasks waiting for any free core.
#[derive(Clone, Debug, Default)]
pub struct GlobalQueue {
    queue: VecDeque<QueuedTask>,
}

impl GlobalQueue {
    pub fn push(&mut self, t: QueuedTask) {
        self.queue.push_back(t);
    }

    /// First task whose type `served` includes; skipped tasks keep their order.
    pub fn pull(&mut self, served: TypeSet) -> Option<QueuedTask> {
        let i = self.queue.iter().position(|t| served.contains(t.task_type))?;
        self.queue.remove(i)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Server(ServerId),
    GlobalQueued,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueEntry {
    Immediate,
    ServerLocal,
    CoreLocal,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispatchRecord {
    pub task: TaskRef,
    pub server: Option<ServerId>,
    pub time: SimTime,
    pub entry: QueueEntry,
}

pub struct GlobalScheduler {
    policy: Box<dyn PlacementPolicy>,
    global: Option<GlobalQueue>,
    audit: Option<Vec<DispatchRecord>>,
    dispatches: u64,
}

impl GlobalScheduler {
    pub fn new(policy: Box<dyn PlacementPolicy>, global_queue: bool, audit: bool) -> Self {
        GlobalScheduler { policy, global: global_queue.then(GlobalQueue::default), audit: audit.then(Vec::new), dispatches: 0 }
    }

    pub fn policy_name(&self) -> &str {
        self.policy.name()
    }

    pub fn global_queue(&mut self) -> Option<&mut GlobalQueue> {
        self.global.as_mut()
    }

    pub fn global_len(&self) -> usize {
        self.global.as_ref().map_or(0, GlobalQueue::len)
    }

    pub fn record(&mut self, r: DispatchRecord) {
        self.dispatches += 1;
        if let Some(a) = &mut self.audit {
            a.push(r);
        }
    }

    pub fn dispatches(&self) -> u64 {
        self.dispatches
    }

    pub fn audit(&self) -> Option<&[DispatchRecord]> {
        self.audit.as_deref()
    }

    /// Chooses a server among `tiers`: the first tier with an eligible server
    /// that has a free core wins, otherwise all tiers together. With the
    /// global queue on and no free core anywhere eligible, the task queues
    /// globally (unless `allow_global` is false).
    #[allow(clippy::too_many_arguments)]
    pub fn decide(
        &mut self,
        task: TaskRef,
        task_type: TaskType,
        tiers: &[Vec<ServerId>],
        servers: &[ServerView],
        parents: &[PlacedParent],
        network: Option<&Network>,
        allow_global: bool,
        now: SimTime,
    ) -> Option<Decision> {
        let eligible = |s: &ServerId| servers[s.idx()].served.contains(task_type);
        let free = |s: &ServerId| servers[s.idx()].has_free_core;
        let mut candidates: Option<Vec<ServerId>> = None;
        for tier in tiers {
            let c: Vec<ServerId> = tier.iter().copied().filter(eligible).collect();
            if c.iter().any(free) {
                candidates = Some(c);
                break;
            }
        }
        let candidates = match candidates {
            Some(c) => c,
            None => {
                let mut all: Vec<ServerId> = tiers.iter().flatten().copied().filter(eligible).collect();
                all.sort();
                all.dedup();
                if all.is_empty() {
                    all = servers.iter().map(|v| v.id).filter(eligible).collect();
                }
                if all.is_empty() {
                    return None;
                }
                if allow_global && self.global.is_some() && !all.iter().any(free) {
                    return Some(Decision::GlobalQueued);
                }
                all
            }
        };
        let mut candidates = candidates;
        candidates.sort();
        let ctx = PlacementContext { task, task_type, now, candidates: &candidates, servers, parents, network };
        let pick = self.policy.pick(&ctx);
        debug_assert!(candidates.contains(&pick), "policy {} picked a non-candidate", self.policy.name());
        Some(Decision::Server(pick))
    }
}

/// Dependency bookkeeping for one job in flight.
#[derive(Clone, Debug)]
pub struct JobProgress {
    pub job: Job,
    placed: Vec<Option<ServerId>>,
    parents_left: Vec<u32>,
    inbound_left: Vec<u32>,
    released: Vec<bool>,
    done: usize,
}

impl JobProgress {
    pub fn new(job: Job, template: &JobTemplate) -> Self {
        let n = job.tasks.len();
        JobProgress {
            parents_left: (0..n as u32).map(|t| template.parents(t).len() as u32).collect(),
            placed: vec![None; n],
            inbound_left: vec![0; n],
            released: vec![false; n],
            done: 0,
            job,
        }
    }

    pub fn server_of(&self, t: u32) -> Option<ServerId> {
        self.placed[t as usize]
    }

    pub fn place(&mut self, t: u32, s: ServerId) {
        self.placed[t as usize] = Some(s);
    }

    pub fn queued_task(&self, t: u32) -> QueuedTask {
        let task = &self.job.tasks[t as usize];
        QueuedTask { task: task.id, size: task.size, task_type: task.task_type }
    }

    /// Counts a finished task; returns whether the job is now complete.
    pub fn task_done(&mut self) -> bool {
        self.done += 1;
        self.done == self.job.tasks.len()
    }

    /// A parent of `child` finished.
    pub fn parent_done(&mut self, child: u32) {
        self.parents_left[child as usize] -= 1;
    }

    pub fn transfer_started(&mut self, child: u32) {
        self.inbound_left[child as usize] += 1;
    }

    pub fn transfer_done(&mut self, child: u32) {
        self.inbound_left[child as usize] -= 1;
    }

    /// True once, the first time `child` has all inputs.
    pub fn take_ready(&mut self, child: u32) -> bool {
        let c = child as usize;
        if !self.released[c] && self.parents_left[c] == 0 && self.inbound_left[c] == 0 {
            self.released[c] = true;
            true
        } else {
            false
        }
    }

    pub fn mark_released(&mut self, t: u32) {
        self.released[t as usize] = true;
    }
}
