//! Plugging a custom placement policy and power controller into a run.
//!
//! `cargo run --release -p dcsim-core --example custom_policy`
//!
//! The placement policy is registered by name so configs can select it. The
//! controller is swapped into the built setup, since controllers are chosen
//! from a closed set in config files.

use std::path::Path;

use dcsim::config::Experiment;
use dcsim::engine::SimTime;
use dcsim::powerpolicy::{FleetState, PowerCmd, PowerController};
use dcsim::scheduling::{PlacementContext, PlacementPolicy, PolicyRegistry};
use dcsim::server::{ServerId, SystemState};
use dcsim::sim::Simulation;

/// Busiest server that still has a free core; highest id when all are full.
struct FillBusiest;

impl PlacementPolicy for FillBusiest {
    fn name(&self) -> &str {
        "fill_busiest"
    }

    fn pick(&mut self, ctx: &PlacementContext<'_>) -> ServerId {
        let free = ctx.candidates.iter().filter(|s| ctx.servers[s.idx()].has_free_core);
        free.max_by_key(|s| (ctx.servers[s.idx()].pending, std::cmp::Reverse(s.0)))
            .copied()
            .unwrap_or(*ctx.candidates.last().expect("candidates are never empty"))
    }
}

/// Keeps the first `k` servers up and suspends any other server the moment it idles.
struct KeepFirst {
    k: u32,
}

impl PowerController for KeepFirst {
    fn name(&self) -> &str {
        "keep_first"
    }

    fn init(&mut self, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        cmds.extend(fleet.ids().filter(|s| s.0 >= self.k && fleet.can_sleep(*s)).map(|s| PowerCmd::Sleep(s, SystemState::S3)));
    }

    fn tiers(&self, fleet: &FleetState<'_>) -> Vec<Vec<ServerId>> {
        let (first, rest) = fleet.ids().partition(|s| s.0 < self.k);
        vec![first, rest]
    }

    fn on_server_idle(&mut self, s: ServerId, fleet: &FleetState<'_>, _now: SimTime, cmds: &mut Vec<PowerCmd>) {
        if s.0 >= self.k && fleet.can_sleep(s) {
            cmds.push(PowerCmd::Sleep(s, SystemState::S3));
        }
    }
}

const CONFIG: &str = r#"
[simulation]
seed = 1
stop = { jobs = 20000 }
sample_interval_s = 0

[fleet]
servers = 8
cores_per_package = 4

[workload]
arrivals = { kind = "poisson", utilization = 0.3 }
tasks = [{ size = { dist = "exponential", mean_ms = 5.0 } }]

[scheduler]
policy = "fill_busiest"
"#;

fn main() {
    let mut registry = PolicyRegistry::default();
    registry.register("fill_busiest", || Box::new(FillBusiest));
    let exp = Experiment::parse_with(CONFIG, Path::new("."), &registry).expect("config");
    let cell = &exp.cells()[0];

    for k in [8, 4, 2] {
        let mut setup = exp.setup(cell, &registry).expect("setup");
        setup.controller = Box::new(KeepFirst { k });
        let r = Simulation::new(setup).expect("sim").run().expect("run");
        let m = &r.metrics;
        println!(
            "keep_first k={k}: {:.1} J, mean {:.2} ms, p95 {:.2} ms, {} resumes",
            m.energy_total_j,
            m.latency_mean_s.unwrap_or(f64::NAN) * 1e3,
            m.latency_p95_s.unwrap_or(f64::NAN) * 1e3,
            m.server_resumes
        );
    }
}
