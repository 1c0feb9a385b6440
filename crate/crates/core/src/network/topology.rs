//! Topology construction with deterministic node, port and link numbering.
//!
//! Servers are numbered `0..n_servers` and switches `0..n_switches`. Ports on
//! a node are numbered in the order its links are created. The adjacency text
//! format written by [`Topology::to_adjacency_text`] lists one link per line:
//! `link <id> <node>:<port> <node>:<port> <rate_bps>` with nodes as `s<id>`
//! (server) or `w<id>` (switch).

use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use crate::server::ServerId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SwitchId(pub u32);

impl SwitchId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Server(ServerId),
    Switch(SwitchId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

impl LinkId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub node: Node,
    pub port: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    pub rate_bps: u64,
}

/// Direction of travel over a link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    AtoB,
    BtoA,
}

/// One step of a route: a link traversed in a direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub link: LinkId,
    pub dir: Dir,
}

impl Hop {
    /// Index of the (link, direction) transmission resource.
    pub fn resource(self) -> usize {
        self.link.idx() * 2 + usize::from(self.dir == Dir::BtoA)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyKind {
    FatTree { k: u32 },
    Star { n: u32 },
    Bcube { n: u32, k: u32 },
    CamCube { x: u32, y: u32, z: u32 },
    /// Experimental: `dims`-dimensional flattened butterfly with `k` switches
    /// per dimension and `concentration` servers per switch.
    FlattenedButterfly { k: u32, dims: u32, concentration: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchRole {
    Edge { pod: u32 },
    Aggregation { pod: u32, index: u32 },
    Core,
    Hub,
    Level(u32),
    Router,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("fat-tree k must be even and at least 2, got {0}")]
    OddFatTree(u32),
    #[error("invalid topology parameters: {0}")]
    BadParams(String),
    #[error("topology is disconnected")]
    Disconnected,
}

#[derive(Clone, Debug)]
pub struct Topology {
    kind: TopologyKind,
    n_servers: u32,
    roles: Vec<SwitchRole>,
    links: Vec<Link>,
    server_ports: Vec<Vec<(LinkId, Dir)>>,
    switch_ports: Vec<Vec<(LinkId, Dir)>>,
}

impl Topology {
    pub fn build(kind: TopologyKind, rate_bps: u64) -> Result<Topology, TopologyError> {
        if rate_bps == 0 {
            return Err(TopologyError::BadParams("link rate must be positive".into()));
        }
        let mut b = Builder::new(kind, rate_bps);
        match kind {
            TopologyKind::FatTree { k } => {
                if k < 2 || k % 2 == 1 {
                    return Err(TopologyError::OddFatTree(k));
                }
                let h = k / 2;
                b.servers(k * h * h);
                for pod in 0..k {
                    for _ in 0..h {
                        b.switch(SwitchRole::Edge { pod });
                    }
                }
                for pod in 0..k {
                    for index in 0..h {
                        b.switch(SwitchRole::Aggregation { pod, index });
                    }
                }
                for _ in 0..h * h {
                    b.switch(SwitchRole::Core);
                }
                let edge = |pod: u32, e: u32| pod * h + e;
                let agg = |pod: u32, a: u32| k * h + pod * h + a;
                let core = |i: u32, j: u32| 2 * k * h + i * h + j;
                for pod in 0..k {
                    for e in 0..h {
                        for host in 0..h {
                            b.link(Node::Server(ServerId(pod * h * h + e * h + host)), Node::Switch(SwitchId(edge(pod, e))));
                        }
                    }
                }
                for pod in 0..k {
                    for e in 0..h {
                        for a in 0..h {
                            b.link(Node::Switch(SwitchId(edge(pod, e))), Node::Switch(SwitchId(agg(pod, a))));
                        }
                    }
                }
                for pod in 0..k {
                    for a in 0..h {
                        for j in 0..h {
                            b.link(Node::Switch(SwitchId(agg(pod, a))), Node::Switch(SwitchId(core(a, j))));
                        }
                    }
                }
            }
            TopologyKind::Star { n } => {
                if n == 0 {
                    return Err(TopologyError::BadParams("star needs at least one server".into()));
                }
                b.servers(n);
                b.switch(SwitchRole::Hub);
                for s in 0..n {
                    b.link(Node::Server(ServerId(s)), Node::Switch(SwitchId(0)));
                }
            }
            TopologyKind::Bcube { n, k } => {
                if n < 2 {
                    return Err(TopologyError::BadParams("bcube n must be at least 2".into()));
                }
                let per_level = n.checked_pow(k).ok_or_else(|| TopologyError::BadParams("bcube too large".into()))?;
                let servers = per_level.checked_mul(n).ok_or_else(|| TopologyError::BadParams("bcube too large".into()))?;
                b.servers(servers);
                for level in 0..=k {
                    for _ in 0..per_level {
                        b.switch(SwitchRole::Level(level));
                    }
                }
                // Server links level by level so port l of a server is its level-l port.
                for s in 0..servers {
                    for level in 0..=k {
                        let low = s % n.pow(level);
                        let high = s / n.pow(level + 1);
                        let sw = level * per_level + high * n.pow(level) + low;
                        b.link(Node::Server(ServerId(s)), Node::Switch(SwitchId(sw)));
                    }
                }
            }
            TopologyKind::CamCube { x, y, z } => {
                if x == 0 || y == 0 || z == 0 {
                    return Err(TopologyError::BadParams("camcube dimensions must be positive".into()));
                }
                let dims = [x, y, z];
                let n = x * y * z;
                b.servers(n);
                let id = |c: [u32; 3]| c[0] + x * (c[1] + y * c[2]);
                for s in 0..n {
                    let c = [s % x, (s / x) % y, s / (x * y)];
                    for d in 0..3 {
                        // Size 1: no neighbor. Size 2: the +1 and -1 neighbors coincide.
                        if dims[d] == 1 || (dims[d] == 2 && c[d] == 1) {
                            continue;
                        }
                        let mut nb = c;
                        nb[d] = (c[d] + 1) % dims[d];
                        b.link(Node::Server(ServerId(s)), Node::Server(ServerId(id(nb))));
                    }
                }
            }
            TopologyKind::FlattenedButterfly { k, dims, concentration } => {
                if k < 2 || dims == 0 || concentration == 0 {
                    return Err(TopologyError::BadParams("flattened butterfly needs k >= 2, dims >= 1, concentration >= 1".into()));
                }
                let n_sw = k.checked_pow(dims).ok_or_else(|| TopologyError::BadParams("flattened butterfly too large".into()))?;
                b.servers(n_sw * concentration);
                for _ in 0..n_sw {
                    b.switch(SwitchRole::Router);
                }
                for s in 0..n_sw * concentration {
                    b.link(Node::Server(ServerId(s)), Node::Switch(SwitchId(s / concentration)));
                }
                for sw in 0..n_sw {
                    for d in 0..dims {
                        let stride = k.pow(d);
                        let digit = (sw / stride) % k;
                        for other in digit + 1..k {
                            let peer = sw + (other - digit) * stride;
                            b.link(Node::Switch(SwitchId(sw)), Node::Switch(SwitchId(peer)));
                        }
                    }
                }
            }
        }
        let topo = b.finish();
        if !topo.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(topo)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_servers(&self) -> usize {
        self.n_servers as usize
    }

    pub fn n_switches(&self) -> usize {
        self.roles.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_servers() + self.n_switches()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.idx()]
    }

    pub fn role(&self, sw: SwitchId) -> SwitchRole {
        self.roles[sw.idx()]
    }

    /// Ports of a node in port order, each as (link, outbound direction).
    pub fn ports(&self, node: Node) -> &[(LinkId, Dir)] {
        match node {
            Node::Server(s) => &self.server_ports[s.idx()],
            Node::Switch(w) => &self.switch_ports[w.idx()],
        }
    }

    pub fn switch_port_count(&self, sw: SwitchId) -> usize {
        self.switch_ports[sw.idx()].len()
    }

    /// Dense node index: servers first, then switches.
    pub fn node_index(&self, node: Node) -> usize {
        match node {
            Node::Server(s) => s.idx(),
            Node::Switch(w) => self.n_servers() + w.idx(),
        }
    }

    pub fn node_at(&self, idx: usize) -> Node {
        if idx < self.n_servers() {
            Node::Server(ServerId(idx as u32))
        } else {
            Node::Switch(SwitchId((idx - self.n_servers()) as u32))
        }
    }

    /// Transmitting and receiving endpoints of a hop.
    pub fn hop_ends(&self, hop: Hop) -> (Endpoint, Endpoint) {
        let l = self.link(hop.link);
        match hop.dir {
            Dir::AtoB => (l.a, l.b),
            Dir::BtoA => (l.b, l.a),
        }
    }

    /// Switches directly attached to a server.
    pub fn attached_switches(&self, s: ServerId) -> Vec<SwitchId> {
        let mut out: Vec<SwitchId> = self.server_ports[s.idx()]
            .iter()
            .filter_map(|&(l, d)| match self.hop_ends(Hop { link: l, dir: d }).1.node {
                Node::Switch(w) => Some(w),
                Node::Server(_) => None,
            })
            .collect();
        out.dedup();
        out
    }

    fn neighbors(&self, idx: usize) -> impl Iterator<Item = (Hop, usize)> + '_ {
        self.ports(self.node_at(idx)).iter().map(move |&(link, dir)| {
            let hop = Hop { link, dir };
            (hop, self.node_index(self.hop_ends(hop).1.node))
        })
    }

    /// Breadth-first hop distances from every node to `dst`.
    pub fn distances_to(&self, dst: Node) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n_nodes()];
        let start = self.node_index(dst);
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for (_, v) in self.neighbors(u) {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Equal-cost next hops from `node` toward the destination of `dist`, in link order.
    pub(crate) fn next_hops(&self, node: usize, dist: &[u32]) -> Vec<(Hop, usize)> {
        let d = dist[node];
        self.neighbors(node).filter(|&(_, v)| d != u32::MAX && d > 0 && dist[v] == d - 1).collect()
    }

    fn is_connected(&self) -> bool {
        if self.n_nodes() == 0 {
            return true;
        }
        self.distances_to(self.node_at(0)).iter().all(|&d| d != u32::MAX)
    }

    pub fn to_adjacency_text(&self) -> String {
        let name = |n: Node| match n {
            Node::Server(s) => format!("s{}", s.0),
            Node::Switch(w) => format!("w{}", w.0),
        };
        let mut out = format!("# {:?}\n# servers {} switches {} links {}\n", self.kind, self.n_servers, self.roles.len(), self.links.len());
        for (i, l) in self.links.iter().enumerate() {
            let _ = writeln!(out, "link {i} {}:{} {}:{} {}", name(l.a.node), l.a.port, name(l.b.node), l.b.port, l.rate_bps);
        }
        out
    }
}

struct Builder {
    kind: TopologyKind,
    rate: u64,
    n_servers: u32,
    roles: Vec<SwitchRole>,
    links: Vec<Link>,
    server_ports: Vec<Vec<(LinkId, Dir)>>,
    switch_ports: Vec<Vec<(LinkId, Dir)>>,
}

impl Builder {
    fn new(kind: TopologyKind, rate: u64) -> Self {
        Builder { kind, rate, n_servers: 0, roles: Vec::new(), links: Vec::new(), server_ports: Vec::new(), switch_ports: Vec::new() }
    }

    fn servers(&mut self, n: u32) {
        self.n_servers = n;
        self.server_ports = vec![Vec::new(); n as usize];
    }

    fn switch(&mut self, role: SwitchRole) {
        self.roles.push(role);
        self.switch_ports.push(Vec::new());
    }

    fn ports_of(&mut self, n: Node) -> &mut Vec<(LinkId, Dir)> {
        match n {
            Node::Server(s) => &mut self.server_ports[s.idx()],
            Node::Switch(w) => &mut self.switch_ports[w.idx()],
        }
    }

    fn link(&mut self, a: Node, b: Node) {
        let id = LinkId(self.links.len() as u32);
        let pa = self.ports_of(a).len() as u32;
        self.ports_of(a).push((id, Dir::AtoB));
        let pb = self.ports_of(b).len() as u32;
        self.ports_of(b).push((id, Dir::BtoA));
        self.links.push(Link { a: Endpoint { node: a, port: pa }, b: Endpoint { node: b, port: pb }, rate_bps: self.rate });
    }

    fn finish(self) -> Topology {
        Topology {
            kind: self.kind,
            n_servers: self.n_servers,
            roles: self.roles,
            links: self.links,
            server_ports: self.server_ports,
            switch_ports: self.switch_ports,
        }
    }
}
