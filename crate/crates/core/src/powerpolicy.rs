//! Fleet power controllers: load-threshold provisioning, single and dual
//! delay timers, and two-pool adaptive management.
//!
//! Controllers never touch servers directly. They read a [`FleetState`] and
//! push [`PowerCmd`]s that the simulation executes. The port LPI controller
//! lives with the network ([`crate::network::lpi_controller_step`]).

use serde::Deserialize;

use crate::engine::{SimDuration, SimTime};
use crate::server::{CoreState, LocalPowerPolicy, Server, ServerId, SystemState};

/// Read-only fleet snapshot handed to controllers.
pub struct FleetState<'a> {
    pub servers: &'a [Server],
    /// Per server: placed-but-unreleased tasks plus relayed transfers.
    pub holds: &'a [u32],
    /// Jobs arrived and not yet complete.
    pub pending_jobs: usize,
    /// Queued and running tasks, including the global queue.
    pub pending_tasks: usize,
}

impl FleetState<'_> {
    pub fn n(&self) -> usize {
        self.servers.len()
    }

    /// Awake, no work, nothing reserved or relayed.
    pub fn can_sleep(&self, s: ServerId) -> bool {
        let srv = &self.servers[s.idx()];
        srv.is_awake() && srv.is_idle() && self.holds[s.idx()] == 0
    }

    pub fn pending(&self, s: ServerId) -> usize {
        self.servers[s.idx()].pending_tasks()
    }

    pub fn ids(&self) -> impl Iterator<Item = ServerId> {
        (0..self.servers.len() as u32).map(ServerId)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerCmd {
    Sleep(ServerId, SystemState),
    Wake(ServerId),
    SetLocal(ServerId, LocalPowerPolicy),
    /// Replaces any armed timer of the server.
    ArmTimer(ServerId, SimDuration),
    CancelTimer(ServerId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pool {
    Active,
    Sleep,
}

pub trait PowerController: Send {
    fn name(&self) -> &str;
    fn init(&mut self, fleet: &FleetState<'_>, now: SimTime, cmds: &mut Vec<PowerCmd>);
    /// Dispatch preference: the first tier with a free core wins; servers in
    /// no tier receive no new work.
    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>>;
    fn on_dispatch(&mut self, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}
    fn on_server_idle(&mut self, _s: ServerId, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}
    fn on_server_busy(&mut self, _s: ServerId, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}
    fn on_timer(&mut self, _s: ServerId, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}
    fn pool_of(&self, _s: ServerId) -> Option<Pool> {
        None
    }
    fn counters(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SleepState {
    #[default]
    S3,
    Off,
}

impl SleepState {
    pub fn system(self) -> SystemState {
        match self {
            SleepState::S3 => SystemState::S3,
            SleepState::Off => SystemState::SOff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    ActiveIdle,
    Provisioning {
        min_load: f64,
        max_load: f64,
        #[serde(default)]
        sleep_state: SleepState,
    },
    DelayTimer {
        tau_s: f64,
        #[serde(default)]
        sleep_state: SleepState,
    },
    DualTimer {
        tau_high_s: f64,
        tau_low_s: f64,
        n_high: u32,
        #[serde(default)]
        sleep_state: SleepState,
    },
    AdaptivePools {
        t_wakeup: f64,
        t_sleep: f64,
        tau_s: f64,
        #[serde(default)]
        sleep_state: SleepState,
    },
}

impl ControllerConfig {
    pub fn validate(&self, n_servers: u32) -> Vec<String> {
        let mut v = Vec::new();
        let nonneg = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("power.controller.{name} must be a non-negative number, got {x}"));
            }
        };
        match *self {
            ControllerConfig::ActiveIdle => {}
            ControllerConfig::Provisioning { min_load, max_load, .. } => {
                nonneg("min_load", min_load, &mut v);
                nonneg("max_load", max_load, &mut v);
                if min_load >= max_load {
                    v.push(format!("power.controller.min_load ({min_load}) must be below max_load ({max_load})"));
                }
            }
            ControllerConfig::DelayTimer { tau_s, .. } => nonneg("tau_s", tau_s, &mut v),
            ControllerConfig::DualTimer { tau_high_s, tau_low_s, n_high, .. } => {
                nonneg("tau_high_s", tau_high_s, &mut v);
                nonneg("tau_low_s", tau_low_s, &mut v);
                if tau_high_s < tau_low_s {
                    v.push(format!("power.controller.tau_high_s ({tau_high_s}) must be at least tau_low_s ({tau_low_s})"));
                }
                if n_high > n_servers {
                    v.push(format!("power.controller.n_high ({n_high}) exceeds the fleet size ({n_servers})"));
                }
            }
            ControllerConfig::AdaptivePools { t_wakeup, t_sleep, tau_s, .. } => {
                nonneg("t_wakeup", t_wakeup, &mut v);
                nonneg("t_sleep", t_sleep, &mut v);
                nonneg("tau_s", tau_s, &mut v);
                if t_sleep >= t_wakeup {
                    v.push(format!("power.controller.t_sleep ({t_sleep}) must be below t_wakeup ({t_wakeup})"));
                }
            }
        }
        v
    }

    pub fn build(&self, n_servers: u32) -> Box<dyn PowerController> {
        let n = n_servers as usize;
        match *self {
            ControllerConfig::ActiveIdle => Box::new(ActiveIdle),
            ControllerConfig::Provisioning { min_load, max_load, sleep_state } => Box::new(Provisioning {
                cfg: ProvisioningConfig { min_load, max_load },
                sleep: sleep_state.system(),
                draining: vec![false; n],
                off: vec![false; n],
                actions: [0; 2],
            }),
            ControllerConfig::DelayTimer { tau_s, sleep_state } => {
                Box::new(DelayTimer::new("delay_timer", vec![SimDuration::from_secs_f64(tau_s); n], 0, sleep_state.system()))
            }
            ControllerConfig::DualTimer { tau_high_s, tau_low_s, n_high, sleep_state } => {
                let taus = dual_timer_assign(
                    &DualTimerConfig { tau_high: SimDuration::from_secs_f64(tau_high_s), tau_low: SimDuration::from_secs_f64(tau_low_s), n_high },
                    n_servers,
                );
                Box::new(DelayTimer::new("dual_timer", taus, n_high as usize, sleep_state.system()))
            }
            ControllerConfig::AdaptivePools { t_wakeup, t_sleep, tau_s, sleep_state } => Box::new(AdaptivePools {
                cfg: AdaptivePoolConfig { t_wakeup, t_sleep },
                tau: SimDuration::from_secs_f64(tau_s),
                sleep: sleep_state.system(),
                pool: vec![Pool::Active; n],
                to_active: 0,
                to_sleep: 0,
                saturated: 0,
            }),
        }
    }
}

/// Servers stay up; idle cores follow the configured local policy.
pub struct ActiveIdle;

impl PowerController for ActiveIdle {
    fn name(&self) -> &str {
        "active_idle"
    }

    fn init(&mut self, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}

    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>> {
        vec![fleet.ids().collect()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProvisioningConfig {
    pub min_load: f64,
    pub max_load: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProvisionAction {
    SleepOne,
    WakeOne,
    None,
}

/// Load is pending tasks per active server.
pub fn provisioning_step(cfg: &ProvisioningConfig, active: usize, pending_tasks: usize) -> ProvisionAction {
    let load = if active == 0 { f64::INFINITY } else { pending_tasks as f64 / active as f64 };
    if load < cfg.min_load {
        ProvisionAction::SleepOne
    } else if load > cfg.max_load {
        ProvisionAction::WakeOne
    } else {
        ProvisionAction::None
    }
}

/// Puts one server aside when load falls below the band and brings one back
/// above it. A server put aside drains its queue and then sleeps.
pub struct Provisioning {
    cfg: ProvisioningConfig,
    sleep: SystemState,
    draining: Vec<bool>,
    off: Vec<bool>,
    actions: [u64; 2],
}

impl Provisioning {
    fn active(&self, s: ServerId) -> bool {
        !self.draining[s.idx()] && !self.off[s.idx()]
    }

    fn try_sleep(&mut self, s: ServerId, fleet: &FleetState<'_>, cmds: &mut Vec<PowerCmd>) {
        if fleet.can_sleep(s) {
            self.draining[s.idx()] = false;
            self.off[s.idx()] = true;
            cmds.push(PowerCmd::Sleep(s, self.sleep));
        }
    }
}

impl PowerController for Provisioning {
    fn name(&self) -> &str {
        "provisioning"
    }

    fn init(&mut self, _fleet: &FleetState<'_>, _now: SimTime, _cmds: &mut Vec<PowerCmd>) {}

    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>> {
        vec![fleet.ids().filter(|&s| self.active(s)).collect()]
    }

    fn on_dispatch(&mut self, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        let active: Vec<ServerId> = fleet.ids().filter(|&s| self.active(s)).collect();
        match provisioning_step(&self.cfg, active.len(), fleet.pending_tasks) {
            ProvisionAction::SleepOne if active.len() > 1 => {
                let s = *active.iter().min_by_key(|&&s| (fleet.pending(s), s.0)).expect("active nonempty");
                self.draining[s.idx()] = true;
                self.actions[0] += 1;
                self.try_sleep(s, fleet, cmds);
            }
            ProvisionAction::WakeOne => {
                if let Some(s) = fleet.ids().find(|&s| !self.active(s)) {
                    self.actions[1] += 1;
                    if self.draining[s.idx()] {
                        self.draining[s.idx()] = false;
                    } else {
                        self.off[s.idx()] = false;
                        cmds.push(PowerCmd::Wake(s));
                    }
                }
            }
            _ => {}
        }
    }

    fn on_server_idle(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        if !self.active(s) {
            self.try_sleep(s, fleet, cmds);
        }
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![("provision_sleep_actions", self.actions[0]), ("provision_wake_actions", self.actions[1])]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualTimerConfig {
    pub tau_high: SimDuration,
    pub tau_low: SimDuration,
    pub n_high: u32,
}

/// Servers `0..n_high` get the long timer and are dispatched to first.
pub fn dual_timer_assign(cfg: &DualTimerConfig, n_servers: u32) -> Vec<SimDuration> {
    (0..n_servers).map(|s| if s < cfg.n_high { cfg.tau_high } else { cfg.tau_low }).collect()
}

/// Per-server idle timer: an idle server sleeps once its timer expires; any
/// work cancels it. With `n_high > 0` the first `n_high` servers form a
/// preferred dispatch tier.
pub struct DelayTimer {
    name: &'static str,
    taus: Vec<SimDuration>,
    n_high: usize,
    sleep: SystemState,
}

impl DelayTimer {
    pub fn new(name: &'static str, taus: Vec<SimDuration>, n_high: usize, sleep: SystemState) -> Self {
        DelayTimer { name, taus, n_high, sleep }
    }

    pub fn tau(&self, s: ServerId) -> SimDuration {
        self.taus[s.idx()]
    }
}

impl PowerController for DelayTimer {
    fn name(&self) -> &str {
        self.name
    }

    fn init(&mut self, fleet: &FleetState<'_>, now: SimTime, cmds: &mut Vec<PowerCmd>) {
        for s in fleet.ids() {
            if fleet.can_sleep(s) {
                self.on_server_idle(s, fleet, now, cmds);
            }
        }
    }

    /// High-timer servers first, then servers that are up, then sleepers.
    /// A sleeping server is only woken when no up server has a free core.
    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>> {
        let high = self.n_high.min(fleet.n());
        let up = |s: &ServerId| fleet.servers[s.idx()].is_up();
        let mut tiers = Vec::with_capacity(3);
        if high > 0 {
            tiers.push(fleet.ids().take(high).collect());
        }
        tiers.push(fleet.ids().skip(high).filter(up).collect());
        tiers.push(fleet.ids().skip(high).filter(|s| !up(s)).collect());
        tiers.retain(|t: &Vec<ServerId>| !t.is_empty());
        tiers
    }

    fn on_server_idle(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        let tau = self.taus[s.idx()];
        if tau.0 == 0 {
            if fleet.can_sleep(s) {
                cmds.push(PowerCmd::Sleep(s, self.sleep));
            }
        } else {
            cmds.push(PowerCmd::ArmTimer(s, tau));
        }
    }

    fn on_server_busy(&mut self, s: ServerId, _fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        cmds.push(PowerCmd::CancelTimer(s));
    }

    fn on_timer(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        if fleet.can_sleep(s) {
            cmds.push(PowerCmd::Sleep(s, self.sleep));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptivePoolConfig {
    pub t_wakeup: f64,
    pub t_sleep: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMigration {
    ToActive,
    ToSleep,
    Hold,
    /// The move was called for but the source pool cannot give a server.
    Saturated,
}

/// Load is pending jobs per active-pool server.
pub fn adaptive_pool_step(cfg: &AdaptivePoolConfig, load: f64, active_pool: usize, sleep_pool: usize) -> PoolMigration {
    if load > cfg.t_wakeup {
        if sleep_pool > 0 {
            PoolMigration::ToActive
        } else {
            PoolMigration::Saturated
        }
    } else if load < cfg.t_sleep {
        if active_pool > 1 {
            PoolMigration::ToSleep
        } else {
            PoolMigration::Saturated
        }
    } else {
        PoolMigration::Hold
    }
}

/// Active pool serves all work with cores and packages allowed into C6;
/// sleep-pool servers get no new work and suspend after `tau` idle.
pub struct AdaptivePools {
    cfg: AdaptivePoolConfig,
    tau: SimDuration,
    sleep: SystemState,
    pool: Vec<Pool>,
    to_active: u64,
    to_sleep: u64,
    saturated: u64,
}

pub const POOL_LOCAL_POLICY: LocalPowerPolicy = LocalPowerPolicy { core_sleep: Some(CoreState::C6), package_sleep: true };

impl AdaptivePools {
    fn arm(&self, s: ServerId, fleet: &FleetState<'_>, cmds: &mut Vec<PowerCmd>) {
        if self.tau.0 == 0 {
            if fleet.can_sleep(s) {
                cmds.push(PowerCmd::Sleep(s, self.sleep));
            }
        } else {
            cmds.push(PowerCmd::ArmTimer(s, self.tau));
        }
    }
}

impl PowerController for AdaptivePools {
    fn name(&self) -> &str {
        "adaptive_pools"
    }

    fn init(&mut self, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        for s in fleet.ids() {
            cmds.push(PowerCmd::SetLocal(s, POOL_LOCAL_POLICY));
        }
    }

    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>> {
        vec![fleet.ids().filter(|s| self.pool[s.idx()] == Pool::Active).collect()]
    }

    fn on_dispatch(&mut self, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        let active: Vec<ServerId> = fleet.ids().filter(|s| self.pool[s.idx()] == Pool::Active).collect();
        let sleeping: Vec<ServerId> = fleet.ids().filter(|s| self.pool[s.idx()] == Pool::Sleep).collect();
        let load = fleet.pending_jobs as f64 / active.len().max(1) as f64;
        match adaptive_pool_step(&self.cfg, load, active.len(), sleeping.len()) {
            PoolMigration::ToActive => {
                let s = *sleeping
                    .iter()
                    .min_by_key(|&&s| (!fleet.servers[s.idx()].is_up(), s.0))
                    .expect("sleep pool nonempty");
                self.pool[s.idx()] = Pool::Active;
                self.to_active += 1;
                cmds.push(PowerCmd::CancelTimer(s));
                if !fleet.servers[s.idx()].is_up() {
                    cmds.push(PowerCmd::Wake(s));
                }
            }
            PoolMigration::ToSleep => {
                let s = *active.iter().min_by_key(|&&s| (fleet.pending(s), s.0)).expect("active pool nonempty");
                self.pool[s.idx()] = Pool::Sleep;
                self.to_sleep += 1;
                if fleet.can_sleep(s) {
                    self.arm(s, fleet, cmds);
                }
            }
            PoolMigration::Saturated => self.saturated += 1,
            PoolMigration::Hold => {}
        }
    }

    fn on_server_idle(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        if self.pool[s.idx()] == Pool::Sleep {
            self.arm(s, fleet, cmds);
        }
    }

    fn on_server_busy(&mut self, s: ServerId, _fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        cmds.push(PowerCmd::CancelTimer(s));
    }

    fn on_timer(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        if self.pool[s.idx()] == Pool::Sleep && fleet.can_sleep(s) {
            cmds.push(PowerCmd::Sleep(s, self.sleep));
        }
    }

    fn pool_of(&self, s: ServerId) -> Option<Pool> {
        Some(self.pool[s.idx()])
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![("pool_to_active", self.to_active), ("pool_to_sleep", self.to_sleep), ("pool_saturated", self.saturated)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{QueueMode, ServerPowerProfile, ServerSpec};
    use crate::workload::TypeSet;
    use std::sync::Arc;

    fn fleet(n: u32) -> Vec<Server> {
        let spec = ServerSpec { packages: 1, cores_per_package: 4, frequency_scales: vec![1.0], queue_mode: QueueMode::Unified, served: TypeSet::ALL };
        let p = Arc::new(ServerPowerProfile::example());
        (0..n).map(|i| Server::new(ServerId(i), &spec, Arc::clone(&p), SimTime(0)).unwrap()).collect()
    }

    #[test]
    fn provisioning_rule() {
        let cfg = ProvisioningConfig { min_load: 0.5, max_load: 3.0 };
        assert_eq!(provisioning_step(&cfg, 10, 2), ProvisionAction::SleepOne);
        assert_eq!(provisioning_step(&cfg, 5, 20), ProvisionAction::WakeOne);
        assert_eq!(provisioning_step(&cfg, 4, 8), ProvisionAction::None);
    }

    #[test]
    fn adaptive_rule_and_hysteresis() {
        let cfg = AdaptivePoolConfig { t_wakeup: 2.0, t_sleep: 0.5 };
        assert_eq!(adaptive_pool_step(&cfg, 3.0, 4, 2), PoolMigration::ToActive);
        assert_eq!(adaptive_pool_step(&cfg, 0.1, 4, 2), PoolMigration::ToSleep);
        assert_eq!(adaptive_pool_step(&cfg, 1.0, 4, 2), PoolMigration::Hold);
        assert_eq!(adaptive_pool_step(&cfg, 3.0, 4, 0), PoolMigration::Saturated);
        assert_eq!(adaptive_pool_step(&cfg, 0.1, 1, 3), PoolMigration::Saturated);
        for i in 0..=400 {
            let load = i as f64 * 0.01;
            let m = adaptive_pool_step(&cfg, load, 4, 2);
            assert!(!(m == PoolMigration::ToActive && load < cfg.t_sleep));
            assert!(!(m == PoolMigration::ToSleep && load > cfg.t_wakeup));
        }
    }

    #[test]
    fn dual_assignment_and_degeneracy() {
        let cfg = DualTimerConfig { tau_high: SimDuration::from_secs(5), tau_low: SimDuration::from_millis(400), n_high: 4 };
        let taus = dual_timer_assign(&cfg, 20);
        assert_eq!(taus.iter().filter(|&&t| t == cfg.tau_high).count(), 4);
        assert!(taus[..4].iter().all(|&t| t == cfg.tau_high));
        let zero = dual_timer_assign(&DualTimerConfig { n_high: 0, ..cfg }, 20);
        assert!(zero.iter().all(|&t| t == cfg.tau_low));
        let all = dual_timer_assign(&DualTimerConfig { n_high: 20, ..cfg }, 20);
        assert!(all.iter().all(|&t| t == cfg.tau_high));
    }

    #[test]
    fn delay_timer_arms_and_cancels() {
        let servers = fleet(2);
        let holds = vec![0; 2];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let mut c = ControllerConfig::DelayTimer { tau_s: 0.4, sleep_state: SleepState::S3 }.build(2);
        let mut cmds = Vec::new();
        c.init(&f, SimTime(0), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::ArmTimer(ServerId(0), SimDuration::from_millis(400)), PowerCmd::ArmTimer(ServerId(1), SimDuration::from_millis(400))]);
        cmds.clear();
        c.on_server_busy(ServerId(0), &f, SimTime(10), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::CancelTimer(ServerId(0))]);
        cmds.clear();
        c.on_timer(ServerId(1), &f, SimTime(400_000), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::Sleep(ServerId(1), SystemState::S3)]);
    }

    #[test]
    fn zero_tau_sleeps_immediately() {
        let servers = fleet(1);
        let holds = vec![0];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let mut c = ControllerConfig::DelayTimer { tau_s: 0.0, sleep_state: SleepState::S3 }.build(1);
        let mut cmds = Vec::new();
        c.on_server_idle(ServerId(0), &f, SimTime(0), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::Sleep(ServerId(0), SystemState::S3)]);
        let held = vec![1];
        let f = FleetState { holds: &held, ..f };
        cmds.clear();
        c.on_server_idle(ServerId(0), &f, SimTime(0), &mut cmds);
        assert!(cmds.is_empty(), "a held server never sleeps");
    }

    #[test]
    fn dual_timer_tiers() {
        let servers = fleet(5);
        let holds = vec![0; 5];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let c = ControllerConfig::DualTimer { tau_high_s: 5.0, tau_low_s: 0.4, n_high: 2, sleep_state: SleepState::S3 }.build(5);
        assert_eq!(c.tiers(&f), vec![vec![ServerId(0), ServerId(1)], vec![ServerId(2), ServerId(3), ServerId(4)]]);
    }

    #[test]
    fn delay_timer_prefers_servers_that_are_up() {
        let mut servers = fleet(4);
        let mut fx = Vec::new();
        servers[1].begin_sleep(SystemState::S3, SimTime(0), &mut fx).unwrap();
        let holds = vec![0; 4];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let c = ControllerConfig::DelayTimer { tau_s: 0.4, sleep_state: SleepState::S3 }.build(4);
        assert_eq!(c.tiers(&f), vec![vec![ServerId(0), ServerId(2), ServerId(3)], vec![ServerId(1)]]);
    }

    #[test]
    fn provisioning_drains_lowest_load() {
        let servers = fleet(3);
        let holds = vec![0; 3];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let mut c = ControllerConfig::Provisioning { min_load: 0.5, max_load: 3.0, sleep_state: SleepState::S3 }.build(3);
        let mut cmds = Vec::new();
        c.on_dispatch(&f, SimTime(0), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::Sleep(ServerId(0), SystemState::S3)]);
        assert_eq!(c.tiers(&f), vec![vec![ServerId(1), ServerId(2)]]);
        let f = FleetState { pending_tasks: 100, ..f };
        cmds.clear();
        c.on_dispatch(&f, SimTime(1), &mut cmds);
        assert_eq!(cmds, vec![PowerCmd::Wake(ServerId(0))]);
    }

    #[test]
    fn adaptive_pools_move_servers() {
        let servers = fleet(3);
        let holds = vec![0; 3];
        let f = FleetState { servers: &servers, holds: &holds, pending_jobs: 0, pending_tasks: 0 };
        let mut c = ControllerConfig::AdaptivePools { t_wakeup: 2.0, t_sleep: 0.5, tau_s: 0.1, sleep_state: SleepState::S3 }.build(3);
        let mut cmds = Vec::new();
        c.on_dispatch(&f, SimTime(0), &mut cmds);
        assert_eq!(c.pool_of(ServerId(0)), Some(Pool::Sleep));
        assert_eq!(cmds, vec![PowerCmd::ArmTimer(ServerId(0), SimDuration::from_millis(100))]);
        let f = FleetState { pending_jobs: 10, ..f };
        cmds.clear();
        c.on_dispatch(&f, SimTime(1), &mut cmds);
        assert_eq!(c.pool_of(ServerId(0)), Some(Pool::Active));
    }

    #[test]
    fn validation_reports_cross_field_errors() {
        assert_eq!(ControllerConfig::Provisioning { min_load: 2.0, max_load: 1.0, sleep_state: SleepState::S3 }.validate(4).len(), 1);
        assert_eq!(ControllerConfig::AdaptivePools { t_wakeup: 1.0, t_sleep: 1.0, tau_s: 0.1, sleep_state: SleepState::S3 }.validate(4).len(), 1);
        assert_eq!(ControllerConfig::DualTimer { tau_high_s: 1.0, tau_low_s: 2.0, n_high: 9, sleep_state: SleepState::S3 }.validate(4).len(), 2);
        assert!(ControllerConfig::ActiveIdle.validate(4).is_empty());
    }
}
