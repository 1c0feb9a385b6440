//! Shortest-path routing with hash-based ECMP.
//!
//! At each node the candidate next hops are the neighbors one step closer to
//! the destination, in link-id order. The chosen index is
//! `splitmix64(flow_key ^ hop_index * 0x9E37_79B9_7F4A_7C15) % candidates`.

use thiserror::Error;

use super::topology::{Hop, Node, Topology};
use crate::server::ServerId;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("source and destination are the same server {0}")]
    SameServer(u32),
    #[error("no server {0}")]
    NoSuchServer(u32),
    #[error("no path from server {0} to server {1}")]
    Disconnected(u32, u32),
}

/// Distance tables toward every server, computed once.
#[derive(Clone, Debug)]
pub struct Router {
    dist: Vec<Vec<u32>>,
}

impl Router {
    pub fn new(topo: &Topology) -> Self {
        let dist = (0..topo.n_servers()).map(|s| topo.distances_to(Node::Server(ServerId(s as u32)))).collect();
        Router { dist }
    }

    pub fn hop_count(&self, topo: &Topology, src: ServerId, dst: ServerId) -> Option<u32> {
        let d = self.dist.get(dst.idx())?[topo.node_index(Node::Server(src))];
        (d != u32::MAX).then_some(d)
    }

    pub fn route(&self, topo: &Topology, src: ServerId, dst: ServerId, flow_key: u64) -> Result<Vec<Hop>, RouteError> {
        if src == dst {
            return Err(RouteError::SameServer(src.0));
        }
        for s in [src, dst] {
            if s.idx() >= topo.n_servers() {
                return Err(RouteError::NoSuchServer(s.0));
            }
        }
        let dist = &self.dist[dst.idx()];
        let mut at = topo.node_index(Node::Server(src));
        if dist[at] == u32::MAX {
            return Err(RouteError::Disconnected(src.0, dst.0));
        }
        let mut path = Vec::with_capacity(dist[at] as usize);
        let mut hop_index = 0u64;
        while dist[at] > 0 {
            let cands = topo.next_hops(at, dist);
            let pick = (splitmix64(flow_key ^ hop_index.wrapping_mul(GOLDEN)) % cands.len() as u64) as usize;
            let (hop, next) = cands[pick];
            path.push(hop);
            at = next;
            hop_index += 1;
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::topology::{Dir, SwitchRole, TopologyKind};

    fn fat4() -> (Topology, Router) {
        let t = Topology::build(TopologyKind::FatTree { k: 4 }, 1_000_000_000).unwrap();
        let r = Router::new(&t);
        (t, r)
    }

    fn switches_on(t: &Topology, path: &[Hop]) -> Vec<SwitchRole> {
        path[..path.len() - 1]
            .iter()
            .map(|&h| match t.hop_ends(h).1.node {
                Node::Switch(w) => t.role(w),
                Node::Server(_) => panic!("server relay in a fat tree"),
            })
            .collect()
    }

    #[test]
    fn star_routes_through_hub() {
        let t = Topology::build(TopologyKind::Star { n: 5 }, 1_000_000_000).unwrap();
        let r = Router::new(&t);
        let p = r.route(&t, ServerId(1), ServerId(4), 7).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].dir, Dir::AtoB);
        assert_eq!(p[1].dir, Dir::BtoA);
    }

    #[test]
    fn fat_tree_path_lengths() {
        let (t, r) = fat4();
        assert_eq!(r.route(&t, ServerId(0), ServerId(1), 0).unwrap().len(), 2);
        let intra_pod = r.route(&t, ServerId(0), ServerId(2), 0).unwrap();
        assert_eq!(intra_pod.len(), 4);
        let inter = r.route(&t, ServerId(0), ServerId(15), 0).unwrap();
        assert_eq!(inter.len(), 6);
        let roles = switches_on(&t, &inter);
        assert!(matches!(roles[0], SwitchRole::Edge { pod: 0 }));
        assert!(matches!(roles[1], SwitchRole::Aggregation { pod: 0, .. }));
        assert!(matches!(roles[2], SwitchRole::Core));
        assert!(matches!(roles[3], SwitchRole::Aggregation { pod: 3, .. }));
        assert!(matches!(roles[4], SwitchRole::Edge { pod: 3 }));
    }

    #[test]
    fn ecmp_is_deterministic_and_spreads() {
        let (t, r) = fat4();
        let a = r.route(&t, ServerId(0), ServerId(15), 42).unwrap();
        assert_eq!(a, r.route(&t, ServerId(0), ServerId(15), 42).unwrap());
        let distinct: std::collections::BTreeSet<_> = (0..64).map(|k| r.route(&t, ServerId(0), ServerId(15), k).unwrap()).collect();
        assert!(distinct.len() > 1);
        assert!(distinct.len() <= 4, "k=4 has 4 inter-pod paths");
    }

    #[test]
    fn route_errors() {
        let (t, r) = fat4();
        assert_eq!(r.route(&t, ServerId(3), ServerId(3), 0), Err(RouteError::SameServer(3)));
        assert_eq!(r.route(&t, ServerId(3), ServerId(99), 0), Err(RouteError::NoSuchServer(99)));
    }

    #[test]
    fn bcube_relays_through_servers() {
        let t = Topology::build(TopologyKind::Bcube { n: 2, k: 1 }, 1_000_000_000).unwrap();
        let r = Router::new(&t);
        // Servers 0 and 3 differ in both digits: two switch hops with a server relay.
        let p = r.route(&t, ServerId(0), ServerId(3), 0).unwrap();
        assert_eq!(p.len(), 4);
        assert!(matches!(t.hop_ends(p[1]).1.node, Node::Server(_)));
    }
}
