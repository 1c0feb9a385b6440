//! Data-center network: topology, routing, transport and switch power.
//!
//! Transfers run either as fluid flows sharing link capacity max-min fairly,
//! or as store-and-forward packets through per-(link, direction) output
//! queues. Flow accounting is in integer bits; a flow's completion time is
//! rounded up to the next microsecond and recomputed whenever the set of
//! running flows changes. Flows ignore propagation delay.
//!
//! A flow starts once every switch port at either end of every link on its
//! route is active and every relaying server is awake. Packets instead wake
//! ports hop by hop.

pub mod maxmin;
pub mod routing;
pub mod switch;
pub mod topology;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Deserialize;
use thiserror::Error;

use crate::engine::{SimDuration, SimTime, MICROS_PER_SEC};
use crate::server::ServerId;
use crate::stats::{Energy, Power};

pub use maxmin::max_min_rates;
pub use routing::{splitmix64, RouteError, Router};
pub use switch::{LineCardState, PortState, Switch, SwitchComponent, SwitchPowerProfile, SwitchPowerTable};
pub use topology::{Dir, Endpoint, Hop, Link, LinkId, Node, SwitchId, SwitchRole, Topology, TopologyError, TopologyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    #[default]
    Flow,
    Packet {
        #[serde(default = "default_packet_bytes")]
        packet_bytes: u32,
        #[serde(default = "default_buffer_packets")]
        buffer_packets: u32,
        #[serde(default)]
        propagation_us: u64,
    },
}

fn default_packet_bytes() -> u32 {
    1500
}

fn default_buffer_packets() -> u32 {
    256
}

/// Port sleep controller. `threshold: None` keeps every port active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpiConfig {
    /// Queue size (packets) at or below which an idle port enters LPI. In flow
    /// mode any value enables LPI for ports carrying no flow.
    #[serde(default)]
    pub threshold: Option<u32>,
    /// Sleep a line card once all of its ports are in LPI.
    #[serde(default = "yes")]
    pub line_card_sleep: bool,
    /// Longest a packet waits in a port held in LPI below the threshold.
    #[serde(default = "default_coalesce_us")]
    pub max_coalesce_us: u64,
}

fn yes() -> bool {
    true
}

fn default_coalesce_us() -> u64 {
    100
}

impl Default for LpiConfig {
    fn default() -> Self {
        LpiConfig { threshold: None, line_card_sleep: true, max_coalesce_us: default_coalesce_us() }
    }
}

/// Decision of the queue-threshold port controller for one port.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpiCommand {
    Stay,
    EnterLpi,
    Wake,
    /// Hold in LPI; wake when the coalescing window closes.
    Coalesce,
}

/// Pure decision function of the LPI controller.
pub fn lpi_controller_step(threshold: Option<u32>, port: PortState, queue_len: u32, serializing: bool) -> LpiCommand {
    match (port, threshold) {
        (_, None) => {
            if port == PortState::Active {
                LpiCommand::Stay
            } else {
                LpiCommand::Wake
            }
        }
        (PortState::Active, Some(t)) => {
            if !serializing && queue_len <= t {
                LpiCommand::EnterLpi
            } else {
                LpiCommand::Stay
            }
        }
        (_, Some(t)) => {
            if queue_len == 0 {
                LpiCommand::Stay
            } else if queue_len > t {
                LpiCommand::Wake
            } else {
                LpiCommand::Coalesce
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error("invalid switch profile: {0}")]
    BadProfile(String),
    #[error("transfer {0} already exists")]
    Duplicate(u64),
    #[error("unknown transfer {0}")]
    Unknown(u64),
    #[error("network state: {0}")]
    State(String),
}

/// Work the caller must schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetEffect {
    SwitchDone { switch: SwitchId, component: SwitchComponent, at: SimTime },
    /// Earliest flow completion changed; `None` means no flow is running.
    FlowTimer(Option<SimTime>),
    TxDone { resource: usize, at: SimTime },
    Arrive { packet: u64, at: SimTime },
    CoalesceTimer { switch: SwitchId, port: u32, at: SimTime },
    /// A relaying server must be woken.
    WakeServer(ServerId),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetStats {
    pub transfers_started: u64,
    pub flows_completed: u64,
    pub bits_delivered: u128,
    /// Flows whose delivered bits differ from their size, or that finished
    /// before the allocated rate could have carried them.
    pub conservation_violations: u64,
    /// Largest over-delivery at completion, in bits (rounding slack).
    pub max_completion_slack_bits: f64,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub messages_completed: u64,
}

#[derive(Clone, Debug)]
struct FlowState {
    resources: Vec<usize>,
    size_bits: u128,
    remaining: u128,
    delivered: u128,
    rate: f64,
    last: SimTime,
    finish: SimTime,
}

#[derive(Clone, Debug)]
struct MessageState {
    total: u64,
    delivered: u64,
    dropped: u64,
}

#[derive(Clone, Debug)]
enum Phase {
    Waiting,
    Flow(FlowState),
    Message(MessageState),
}

#[derive(Clone, Debug)]
struct Transfer {
    route: Vec<Hop>,
    relays: Vec<ServerId>,
    ports: Vec<(SwitchId, u32)>,
    bytes: u64,
    phase: Phase,
}

#[derive(Clone, Copy, Debug)]
struct Packet {
    transfer: TransferId,
    bytes: u32,
    hop: u32,
}

#[derive(Clone, Debug, Default)]
struct OutQueue {
    queue: VecDeque<Packet>,
    busy: bool,
}

pub struct NetworkParams {
    pub topology: TopologyKind,
    pub link_rate_bps: u64,
    pub transport: Transport,
    pub switch_profile: SwitchPowerProfile,
    pub lpi: LpiConfig,
}

#[derive(Clone, Debug)]
pub struct Network {
    topo: Topology,
    router: Router,
    table: SwitchPowerTable,
    lpi: LpiConfig,
    transport: Transport,
    switches: Vec<Switch>,
    port_holds: Vec<Vec<u32>>,
    relay_holds: Vec<u32>,
    transfers: BTreeMap<TransferId, Transfer>,
    waiting: BTreeSet<TransferId>,
    flow_timer: Option<SimTime>,
    queues: Vec<OutQueue>,
    in_flight: BTreeMap<u64, Packet>,
    next_packet: u64,
    coalescing: BTreeSet<(SwitchId, u32)>,
    stats: NetStats,
}

fn serialization(bytes: u32, rate_bps: u64) -> SimDuration {
    SimDuration(((bytes as u128 * 8 * MICROS_PER_SEC as u128).div_ceil(rate_bps as u128)) as u64)
}

impl Network {
    pub fn new(params: NetworkParams, now: SimTime) -> Result<Network, NetError> {
        params.switch_profile.validate().map_err(NetError::BadProfile)?;
        if let Transport::Packet { packet_bytes: 0, .. } = params.transport {
            return Err(NetError::BadProfile("packet size must be positive".into()));
        }
        let topo = Topology::build(params.topology, params.link_rate_bps)?;
        let router = Router::new(&topo);
        let table = params.switch_profile.tables();
        let switches: Vec<Switch> =
            (0..topo.n_switches()).map(|w| Switch::new(topo.switch_port_count(SwitchId(w as u32)) as u32, &table, now)).collect();
        let port_holds = switches.iter().map(|s| vec![0; s.n_ports() as usize]).collect();
        Ok(Network {
            relay_holds: vec![0; topo.n_servers()],
            queues: vec![OutQueue::default(); topo.links().len() * 2],
            topo,
            router,
            table,
            lpi: params.lpi,
            transport: params.transport,
            switches,
            port_holds,
            transfers: BTreeMap::new(),
            waiting: BTreeSet::new(),
            flow_timer: None,
            in_flight: BTreeMap::new(),
            next_packet: 0,
            coalescing: BTreeSet::new(),
            stats: NetStats::default(),
        })
    }

    /// Lets idle ports enter LPI at the start of a run.
    pub fn init(&mut self, now: SimTime, fx: &mut Vec<NetEffect>) {
        for w in 0..self.switches.len() {
            for p in 0..self.switches[w].n_ports() {
                self.maybe_sleep_port(SwitchId(w as u32), p, now, fx);
            }
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn switch(&self, w: SwitchId) -> &Switch {
        &self.switches[w.idx()]
    }

    pub fn is_switch_awake(&self, w: SwitchId) -> bool {
        self.switches[w.idx()].is_awake()
    }

    pub fn awake_switches(&self) -> usize {
        self.switches.iter().filter(|s| s.is_awake()).count()
    }

    pub fn awake_set(&self) -> BTreeSet<SwitchId> {
        (0..self.switches.len() as u32).map(SwitchId).filter(|&w| self.is_switch_awake(w)).collect()
    }

    /// Transfers still in the network.
    pub fn in_progress(&self) -> usize {
        self.transfers.len()
    }

    /// Number of transfers that route through server `s` as a relay.
    pub fn relay_holds(&self, s: ServerId) -> u32 {
        self.relay_holds[s.idx()]
    }

    pub fn route(&self, src: ServerId, dst: ServerId, key: u64) -> Result<Vec<Hop>, RouteError> {
        self.router.route(&self.topo, src, dst, key)
    }

    /// Distinct switches on a route, in path order.
    pub fn route_switches(&self, route: &[Hop]) -> Vec<SwitchId> {
        let mut out = Vec::new();
        for &h in route {
            if let Node::Switch(w) = self.topo.hop_ends(h).1.node {
                if !out.contains(&w) {
                    out.push(w);
                }
            }
        }
        out
    }

    /// Asleep switches on the route a transfer with `key` would take.
    pub fn route_wake_cost(&self, src: ServerId, dst: ServerId, key: u64) -> u32 {
        match self.route(src, dst, key) {
            Ok(r) => self.route_switches(&r).into_iter().filter(|&w| !self.is_switch_awake(w)).count() as u32,
            Err(_) => 0,
        }
    }

    /// Asleep switches a server needs to reach the rest of the network.
    pub fn uplink_wake_cost(&self, s: ServerId) -> u32 {
        uplink_switches(&self.topo, s).into_iter().filter(|&w| !self.is_switch_awake(w)).count() as u32
    }

    pub fn power(&self) -> Power {
        self.switches.iter().map(|s| s.power(&self.table)).sum()
    }

    pub fn flush(&mut self, now: SimTime) {
        for s in &mut self.switches {
            s.flush(now);
        }
    }

    pub fn switch_energies(&self) -> Vec<Energy> {
        self.switches.iter().map(|s| s.energy(&self.table)).collect()
    }

    /// Time-integrated awake-switch count (switch-seconds).
    pub fn awake_switch_seconds(&self) -> f64 {
        self.switches.iter().map(|s| s.awake_time().as_secs_f64()).sum()
    }

    pub fn residency_conserved(&self) -> bool {
        self.switches.iter().all(Switch::residency_conserved)
    }

    fn switch_ports_on(&self, route: &[Hop]) -> Vec<(SwitchId, u32)> {
        let mut out = Vec::new();
        for &h in route {
            let (a, b) = self.topo.hop_ends(h);
            for e in [a, b] {
                if let Node::Switch(w) = e.node {
                    if !out.contains(&(w, e.port)) {
                        out.push((w, e.port));
                    }
                }
            }
        }
        out
    }

    fn relays_on(&self, route: &[Hop]) -> Vec<ServerId> {
        route[..route.len().saturating_sub(1)]
            .iter()
            .filter_map(|&h| match self.topo.hop_ends(h).1.node {
                Node::Server(s) => Some(s),
                Node::Switch(_) => None,
            })
            .collect()
    }

    /// Starts moving `bytes` from `src` to `dst`. `key` seeds ECMP.
    #[allow(clippy::too_many_arguments)]
    pub fn start_transfer(
        &mut self,
        id: TransferId,
        src: ServerId,
        dst: ServerId,
        bytes: u64,
        now: SimTime,
        server_awake: &dyn Fn(ServerId) -> bool,
        fx: &mut Vec<NetEffect>,
    ) -> Result<(), NetError> {
        if self.transfers.contains_key(&id) {
            return Err(NetError::Duplicate(id.0));
        }
        let route = self.route(src, dst, id.0)?;
        let ports = self.switch_ports_on(&route);
        let relays = self.relays_on(&route);
        for &s in &relays {
            self.relay_holds[s.idx()] += 1;
            if !server_awake(s) {
                fx.push(NetEffect::WakeServer(s));
            }
        }
        if self.transport == Transport::Flow {
            for &(w, p) in &ports {
                self.port_holds[w.idx()][p as usize] += 1;
                self.wake_port(w, p, now, fx);
            }
        }
        self.transfers.insert(id, Transfer { route, relays, ports, bytes, phase: Phase::Waiting });
        self.waiting.insert(id);
        self.stats.transfers_started += 1;
        self.try_start(now, server_awake, fx);
        Ok(())
    }

    fn transfer_ready(&self, t: &Transfer, server_awake: &dyn Fn(ServerId) -> bool) -> bool {
        t.relays.iter().all(|&s| server_awake(s))
            && (self.transport != Transport::Flow || t.ports.iter().all(|&(w, p)| self.switches[w.idx()].port_ready(p)))
    }

    fn try_start(&mut self, now: SimTime, server_awake: &dyn Fn(ServerId) -> bool, fx: &mut Vec<NetEffect>) {
        let ready: Vec<TransferId> =
            self.waiting.iter().copied().filter(|id| self.transfer_ready(&self.transfers[id], server_awake)).collect();
        if ready.is_empty() {
            return;
        }
        let mut flows_started = false;
        for id in ready {
            self.waiting.remove(&id);
            match self.transport {
                Transport::Flow => {
                    self.advance_flows(now);
                    let t = self.transfers.get_mut(&id).expect("waiting transfer exists");
                    let size_bits = t.bytes as u128 * 8;
                    t.phase = Phase::Flow(FlowState {
                        resources: t.route.iter().map(|h| h.resource()).collect(),
                        size_bits,
                        remaining: size_bits,
                        delivered: 0,
                        rate: 0.0,
                        last: now,
                        finish: now,
                    });
                    flows_started = true;
                }
                Transport::Packet { packet_bytes, .. } => {
                    let t = self.transfers.get_mut(&id).expect("waiting transfer exists");
                    let n = t.bytes.div_ceil(packet_bytes as u64).max(1);
                    t.phase = Phase::Message(MessageState { total: n, delivered: 0, dropped: 0 });
                    let first = t.route[0].resource();
                    let mut left = t.bytes;
                    for _ in 0..n {
                        let b = left.min(packet_bytes as u64) as u32;
                        left -= b as u64;
                        self.queues[first].queue.push_back(Packet { transfer: id, bytes: b.max(1), hop: 0 });
                    }
                    self.stats.packets_sent += n;
                    self.kick(first, now, fx);
                }
            }
        }
        if flows_started {
            self.reallocate(now, fx);
        }
    }

    /// Relaying servers changed state; retry waiting transfers.
    pub fn on_servers_changed(&mut self, now: SimTime, server_awake: &dyn Fn(ServerId) -> bool, fx: &mut Vec<NetEffect>) {
        self.try_start(now, server_awake, fx);
        let resources: Vec<usize> = (0..self.queues.len()).filter(|&r| !self.queues[r].queue.is_empty()).collect();
        for r in resources {
            self.kick(r, now, fx);
        }
    }

    fn wake_port(&mut self, w: SwitchId, p: u32, now: SimTime, fx: &mut Vec<NetEffect>) {
        let mut out = Vec::new();
        self.switches[w.idx()].wake_port(p, &self.table, now, &mut out);
        fx.extend(out.into_iter().map(|(component, at)| NetEffect::SwitchDone { switch: w, component, at }));
    }

    /// Outbound and inbound queue occupancy and activity of a switch port.
    fn port_traffic(&self, w: SwitchId, p: u32) -> (u32, bool) {
        let (link, dir) = self.topo.ports(Node::Switch(w))[p as usize];
        let out = Hop { link, dir }.resource();
        let inb = out ^ 1;
        let q = (self.queues[out].queue.len() + self.queues[inb].queue.len()) as u32;
        (q, self.queues[out].busy || self.queues[inb].busy)
    }

    fn port_needed(&self, w: SwitchId, p: u32) -> bool {
        match self.transport {
            Transport::Flow => self.port_holds[w.idx()][p as usize] > 0,
            Transport::Packet { .. } => {
                let (q, busy) = self.port_traffic(w, p);
                q > 0 || busy
            }
        }
    }

    fn maybe_sleep_port(&mut self, w: SwitchId, p: u32, now: SimTime, fx: &mut Vec<NetEffect>) {
        if self.lpi.threshold.is_none() || self.port_needed(w, p) {
            return;
        }
        let mut out = Vec::new();
        let sw = &mut self.switches[w.idx()];
        if sw.sleep_port(p, &self.table, now, &mut out) && out.is_empty() && self.lpi.line_card_sleep {
            let c = sw.card_of(p);
            sw.try_sleep_card(c, &self.table, now, &mut out);
        }
        fx.extend(out.into_iter().map(|(component, at)| NetEffect::SwitchDone { switch: w, component, at }));
    }

    /// A switch component finished a transition.
    pub fn on_switch_done(
        &mut self,
        w: SwitchId,
        comp: SwitchComponent,
        now: SimTime,
        server_awake: &dyn Fn(ServerId) -> bool,
        fx: &mut Vec<NetEffect>,
    ) -> Result<(), NetError> {
        self.switches[w.idx()].complete(comp, now).map_err(NetError::State)?;
        match comp {
            SwitchComponent::Port(p) => match self.switches[w.idx()].port_mode(p).steady() {
                Some(PortState::Active) => {
                    if self.port_needed(w, p) {
                        self.kick_port(w, p, now, fx);
                    } else {
                        self.maybe_sleep_port(w, p, now, fx);
                    }
                }
                Some(_) => {
                    if self.port_needed(w, p) {
                        self.request_port(w, p, now, fx);
                    } else if self.lpi.line_card_sleep {
                        let mut out = Vec::new();
                        let sw = &mut self.switches[w.idx()];
                        let c = sw.card_of(p);
                        sw.try_sleep_card(c, &self.table, now, &mut out);
                        fx.extend(out.into_iter().map(|(component, at)| NetEffect::SwitchDone { switch: w, component, at }));
                    }
                }
                None => {}
            },
            SwitchComponent::LineCard(c) => {
                let ports = self.switches[w.idx()].ports_of_card(c);
                let needed: Vec<u32> = ports.clone().filter(|&p| self.port_needed(w, p)).collect();
                match self.switches[w.idx()].card_mode(c).steady() {
                    Some(LineCardState::Active) => {
                        if needed.is_empty() {
                            let mut out = Vec::new();
                            self.switches[w.idx()].try_sleep_card(c, &self.table, now, &mut out);
                            fx.extend(out.into_iter().map(|(component, at)| NetEffect::SwitchDone { switch: w, component, at }));
                        }
                        for p in needed {
                            self.wake_port(w, p, now, fx);
                        }
                    }
                    _ => {
                        if let Some(&p) = needed.first() {
                            self.wake_port(w, p, now, fx);
                        }
                    }
                }
            }
        }
        if self.transport == Transport::Flow {
            self.try_start(now, server_awake, fx);
        }
        Ok(())
    }

    /// Packet mode: a port in LPI has traffic. Wake now or coalesce.
    fn request_port(&mut self, w: SwitchId, p: u32, now: SimTime, fx: &mut Vec<NetEffect>) {
        if self.transport == Transport::Flow {
            self.wake_port(w, p, now, fx);
            return;
        }
        let mode = self.switches[w.idx()].port_mode(p);
        let card_ready = self.switches[w.idx()].card_mode(self.switches[w.idx()].card_of(p)).is_steady(LineCardState::Active);
        let Some(state) = mode.steady() else { return };
        if state == PortState::Active && card_ready {
            return;
        }
        let (q, busy) = self.port_traffic(w, p);
        match lpi_controller_step(self.lpi.threshold, state, q, busy) {
            LpiCommand::Wake => self.wake_port(w, p, now, fx),
            LpiCommand::Coalesce => {
                if self.coalescing.insert((w, p)) {
                    fx.push(NetEffect::CoalesceTimer { switch: w, port: p, at: now + SimDuration(self.lpi.max_coalesce_us) });
                }
            }
            LpiCommand::Stay | LpiCommand::EnterLpi => {
                if !card_ready {
                    self.wake_port(w, p, now, fx);
                }
            }
        }
    }

    pub fn on_coalesce_timer(&mut self, w: SwitchId, p: u32, now: SimTime, fx: &mut Vec<NetEffect>) {
        self.coalescing.remove(&(w, p));
        if self.port_needed(w, p) {
            self.wake_port(w, p, now, fx);
        }
    }

    fn kick_port(&mut self, w: SwitchId, p: u32, now: SimTime, fx: &mut Vec<NetEffect>) {
        if self.transport == Transport::Flow {
            return;
        }
        let (link, dir) = self.topo.ports(Node::Switch(w))[p as usize];
        let out = Hop { link, dir }.resource();
        self.kick(out, now, fx);
        self.kick(out ^ 1, now, fx);
    }

    fn endpoint_ready(&self, e: Endpoint) -> bool {
        match e.node {
            Node::Switch(w) => self.switches[w.idx()].port_ready(e.port),
            Node::Server(_) => true,
        }
    }

    fn resource_hop(r: usize) -> Hop {
        Hop { link: LinkId((r / 2) as u32), dir: if r.is_multiple_of(2) { Dir::AtoB } else { Dir::BtoA } }
    }

    /// Starts serializing the head packet of resource `r` if both ends are ready.
    fn kick(&mut self, r: usize, now: SimTime, fx: &mut Vec<NetEffect>) {
        if self.queues[r].busy || self.queues[r].queue.is_empty() {
            return;
        }
        let hop = Self::resource_hop(r);
        let (tx, rx) = self.topo.hop_ends(hop);
        let mut ready = true;
        for e in [tx, rx] {
            if !self.endpoint_ready(e) {
                ready = false;
                if let Node::Switch(w) = e.node {
                    self.request_port(w, e.port, now, fx);
                }
            }
        }
        if !ready {
            return;
        }
        let bytes = self.queues[r].queue.front().expect("nonempty").bytes;
        self.queues[r].busy = true;
        let at = now + serialization(bytes, self.topo.link(hop.link).rate_bps);
        fx.push(NetEffect::TxDone { resource: r, at });
    }

    /// A packet finished serializing on resource `r`.
    pub fn on_tx_done(&mut self, r: usize, now: SimTime, fx: &mut Vec<NetEffect>) -> Vec<TransferId> {
        let mut done = Vec::new();
        let q = &mut self.queues[r];
        q.busy = false;
        let mut pkt = q.queue.pop_front().expect("tx done on an empty queue");
        pkt.hop += 1;
        let prop = match self.transport {
            Transport::Packet { propagation_us, .. } => propagation_us,
            Transport::Flow => 0,
        };
        if prop > 0 {
            let id = self.next_packet;
            self.next_packet += 1;
            self.in_flight.insert(id, pkt);
            fx.push(NetEffect::Arrive { packet: id, at: now + SimDuration(prop) });
        } else {
            self.arrive(pkt, now, fx, &mut done);
        }
        self.kick(r, now, fx);
        self.after_drain(r, now, fx);
        done
    }

    pub fn on_packet_arrive(&mut self, packet: u64, now: SimTime, fx: &mut Vec<NetEffect>) -> Vec<TransferId> {
        let mut done = Vec::new();
        if let Some(pkt) = self.in_flight.remove(&packet) {
            self.arrive(pkt, now, fx, &mut done);
        }
        done
    }

    fn arrive(&mut self, pkt: Packet, now: SimTime, fx: &mut Vec<NetEffect>, done: &mut Vec<TransferId>) {
        let t = self.transfers.get(&pkt.transfer).expect("packet of a live transfer");
        if pkt.hop as usize == t.route.len() {
            self.stats.packets_delivered += 1;
            self.stats.bits_delivered += pkt.bytes as u128 * 8;
            self.message_progress(pkt.transfer, false, done);
            return;
        }
        let r = t.route[pkt.hop as usize].resource();
        let limit = match self.transport {
            Transport::Packet { buffer_packets, .. } => buffer_packets as usize,
            Transport::Flow => usize::MAX,
        };
        if self.queues[r].queue.len() >= limit {
            self.stats.packets_dropped += 1;
            self.message_progress(pkt.transfer, true, done);
            return;
        }
        self.queues[r].queue.push_back(pkt);
        self.kick(r, now, fx);
    }

    fn message_progress(&mut self, id: TransferId, dropped: bool, done: &mut Vec<TransferId>) {
        let t = self.transfers.get_mut(&id).expect("live transfer");
        let Phase::Message(m) = &mut t.phase else { unreachable!("packet of a non-message transfer") };
        if dropped {
            m.dropped += 1;
        } else {
            m.delivered += 1;
        }
        if m.delivered + m.dropped == m.total {
            let t = self.transfers.remove(&id).expect("live transfer");
            for s in t.relays {
                self.relay_holds[s.idx()] -= 1;
            }
            self.stats.messages_completed += 1;
            done.push(id);
        }
    }

    fn after_drain(&mut self, r: usize, now: SimTime, fx: &mut Vec<NetEffect>) {
        let (tx, rx) = self.topo.hop_ends(Self::resource_hop(r));
        for e in [tx, rx] {
            if let Node::Switch(w) = e.node {
                self.maybe_sleep_port(w, e.port, now, fx);
            }
        }
    }

    fn advance_flows(&mut self, now: SimTime) {
        for t in self.transfers.values_mut() {
            if let Phase::Flow(f) = &mut t.phase {
                let dt = (now - f.last).0 as f64;
                let moved = ((f.rate * dt / MICROS_PER_SEC as f64).floor() as u128).min(f.remaining);
                f.remaining -= moved;
                f.delivered += moved;
                f.last = now;
            }
        }
    }

    fn reallocate(&mut self, now: SimTime, fx: &mut Vec<NetEffect>) {
        self.advance_flows(now);
        let caps: Vec<f64> = (0..self.queues.len()).map(|r| self.topo.link(Self::resource_hop(r).link).rate_bps as f64).collect();
        let ids: Vec<TransferId> =
            self.transfers.iter().filter(|(_, t)| matches!(t.phase, Phase::Flow(_))).map(|(&id, _)| id).collect();
        let routes: Vec<Vec<usize>> = ids
            .iter()
            .map(|id| match &self.transfers[id].phase {
                Phase::Flow(f) => f.resources.clone(),
                _ => unreachable!(),
            })
            .collect();
        let rates = max_min_rates(&caps, &routes);
        let mut next: Option<SimTime> = None;
        for (id, rate) in ids.iter().zip(rates) {
            let Phase::Flow(f) = &mut self.transfers.get_mut(id).expect("flow exists").phase else { unreachable!() };
            f.rate = rate;
            let us = (f.remaining as f64 * MICROS_PER_SEC as f64 / rate).ceil() as u64;
            f.finish = now + SimDuration(us);
            next = Some(next.map_or(f.finish, |n| n.min(f.finish)));
        }
        if next != self.flow_timer {
            self.flow_timer = next;
            fx.push(NetEffect::FlowTimer(next));
        }
    }

    /// Completes every flow due by `now` and reallocates the rest.
    pub fn on_flow_timer(&mut self, now: SimTime, fx: &mut Vec<NetEffect>) -> Vec<TransferId> {
        self.flow_timer = None;
        let due: Vec<TransferId> = self
            .transfers
            .iter()
            .filter(|(_, t)| matches!(&t.phase, Phase::Flow(f) if f.finish <= now))
            .map(|(&id, _)| id)
            .collect();
        for id in &due {
            let t = self.transfers.get_mut(id).expect("due flow");
            let Phase::Flow(f) = &mut t.phase else { unreachable!() };
            let carried = f.rate * (now - f.last).0 as f64 / MICROS_PER_SEC as f64;
            let slack = carried - f.remaining as f64;
            if slack < -1.0 {
                self.stats.conservation_violations += 1;
            }
            self.stats.max_completion_slack_bits = self.stats.max_completion_slack_bits.max(slack);
            f.delivered += f.remaining;
            f.remaining = 0;
            if f.delivered != f.size_bits {
                self.stats.conservation_violations += 1;
            }
            self.stats.bits_delivered += f.delivered;
            self.stats.flows_completed += 1;
        }
        for id in &due {
            let t = self.transfers.remove(id).expect("due flow");
            for s in t.relays {
                self.relay_holds[s.idx()] -= 1;
            }
            for (w, p) in t.ports {
                self.port_holds[w.idx()][p as usize] -= 1;
                self.maybe_sleep_port(w, p, now, fx);
            }
        }
        self.reallocate(now, fx);
        due
    }

    /// Current per-flow rates in bits/s, by transfer id.
    pub fn flow_rates(&self) -> Vec<(TransferId, f64)> {
        self.transfers
            .iter()
            .filter_map(|(&id, t)| match &t.phase {
                Phase::Flow(f) => Some((id, f.rate)),
                _ => None,
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (w, s) in self.switches.iter().enumerate() {
            s.check_invariants().map_err(|e| format!("switch {w}: {e}"))?;
        }
        let mut load = vec![0.0f64; self.queues.len()];
        for t in self.transfers.values() {
            if let Phase::Flow(f) = &t.phase {
                if f.remaining > f.size_bits {
                    return Err("flow remaining exceeds size".into());
                }
                for &r in &f.resources {
                    load[r] += f.rate;
                }
            }
        }
        for (r, l) in load.iter().enumerate() {
            let cap = self.topo.link(Self::resource_hop(r).link).rate_bps as f64;
            if *l > cap * (1.0 + 1e-9) {
                return Err(format!("resource {r} carries {l} b/s over capacity {cap}"));
            }
        }
        if let Transport::Packet { buffer_packets, .. } = self.transport {
            // Source hosts hold whole messages; every forwarding queue is bounded.
            for (r, q) in self.queues.iter().enumerate() {
                let fwd = q.queue.iter().filter(|p| p.hop > 0).count();
                if fwd > buffer_packets as usize {
                    return Err(format!("resource {r} holds {fwd} packets over limit {buffer_packets}"));
                }
            }
        }
        Ok(())
    }
}

/// Switches a server needs awake to talk to its neighbourhood: in a fat tree
/// its edge switch and the lowest-numbered aggregation switch of its pod; in
/// a star the hub; elsewhere its directly attached switches.
pub fn uplink_switches(topo: &Topology, s: ServerId) -> Vec<SwitchId> {
    let attached = topo.attached_switches(s);
    match topo.kind() {
        TopologyKind::FatTree { .. } => {
            let mut out = attached.clone();
            if let Some(&edge) = attached.first() {
                if let SwitchRole::Edge { pod } = topo.role(edge) {
                    let agg = (0..topo.n_switches() as u32)
                        .map(SwitchId)
                        .find(|&w| topo.role(w) == SwitchRole::Aggregation { pod, index: 0 });
                    out.extend(agg);
                }
            }
            out
        }
        _ => attached,
    }
}

/// Switches on `candidate`'s uplink that are not in `awake`.
pub fn network_wake_cost(topo: &Topology, awake: &BTreeSet<SwitchId>, candidate: ServerId) -> u32 {
    uplink_switches(topo, candidate).into_iter().filter(|w| !awake.contains(w)).count() as u32
}
