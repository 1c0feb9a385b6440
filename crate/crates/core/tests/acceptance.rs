//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.
//!
//! Runs every shipped config, so expect a couple of minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dcsim::config::{Cell, Experiment};
use dcsim::engine::SimDuration;
use dcsim::network::maxmin::max_min_rates;
use dcsim::runner::{self, CellResult};
use dcsim::scheduling::PolicyRegistry;
use dcsim::stats::{Energy, Power};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.

/// Criterion 1: wall clock per shipped config run.
const RUN_BUDGET: Duration = Duration::from_secs(60);
/// Criterion 2: busy-core fraction must land within this of rho.
const BUSY_TOL: f64 = 0.01;
const QUEUEING_MIN_JOBS: u64 = 1_000_000;
const QUEUEING_BUDGET: Duration = Duration::from_secs(120);
/// Criterion 3: exact, in picojoules.
const STAR_POWER_W: f64 = 20.22;
const STAR_ENERGY_J: u128 = 145_584;
const STAR_SECONDS: u64 = 7200;
/// Criterion 4.
const DAG_MAX_TASKS: usize = 5;
const DAG_BUDGET: Duration = Duration::from_secs(60);
/// Criterion 5: allowed gap to the exact reference, bit/s.
const MAXMIN_TOL_BPS: f64 = 1.0;
const MAXMIN_SETS: usize = 40;
const MAXMIN_MAX_LINKS: usize = 5;
const MAXMIN_MAX_FLOWS: usize = 6;
/// Criterion 6 and 7 budgets.
const SWEEP_BUDGET: Duration = Duration::from_secs(600);
/// Criterion 8.
const RESIDENCY_TOL: f64 = 0.10;
const DEEP_MIN: f64 = 0.5;
const POOLS_BUDGET: Duration = Duration::from_secs(300);
/// Criterion 9: p95 of the network-aware run relative to the baseline.
const P95_SLACK: f64 = 1.05;
const NETWORK_BUDGET: Duration = Duration::from_secs(300);

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Check {
    id: u8,
    pass: bool,
    detail: String,
}

/// Per-cell summary values, read back from the run summary.
fn metric(r: &CellResult, key: &str) -> f64 {
    r.summary.get(key).and_then(|m| m.as_f64()).unwrap_or_else(|| panic!("missing metric {key}"))
}

fn axis(exp: &Experiment, cell: &Cell, name: &str) -> toml::Value {
    exp.points[cell.point].overrides.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone()).unwrap_or_else(|| panic!("no axis {name}"))
}

fn num(v: &toml::Value) -> f64 {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).expect("numeric axis")
}

struct ConfigRun {
    name: String,
    exp: Experiment,
    results: Vec<CellResult>,
    elapsed: Duration,
}

fn run_config(name: &str, registry: &PolicyRegistry) -> ConfigRun {
    let exp = Experiment::load(&configs_dir().join(format!("{name}.toml"))).unwrap_or_else(|e| panic!("{name}: {e}"));
    let start = Instant::now();
    let results: Vec<CellResult> = runner::run_cells(&exp, &exp.cells(), registry, 0)
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    ConfigRun { name: name.to_string(), exp, results, elapsed: start.elapsed() }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).expect("prefix").to_path_buf(), fs::read(&p).expect("read file"));
            }
        }
    }
    out
}

/// 1: a second, sequential run writes byte-identical artifacts.
fn determinism(runs: &[ConfigRun], registry: &PolicyRegistry) -> Check {
    let mut bad = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in runs {
        let a = tempfile::tempdir().expect("tempdir");
        let b = tempfile::tempdir().expect("tempdir");
        runner::write_outputs(a.path(), &run.exp, &run.results).expect("write");
        let start = Instant::now();
        let again: Vec<CellResult> = runner::run_cells_sequential(&run.exp, &run.exp.cells(), registry)
            .into_iter()
            .collect::<Result<_, _>>()
            .expect("rerun");
        let t = start.elapsed();
        slowest = slowest.max(t).max(run.elapsed);
        runner::write_outputs(b.path(), &run.exp, &again).expect("write");
        let (fa, fb) = (files_under(a.path()), files_under(b.path()));
        let summaries = fa.keys().filter(|p| p.ends_with("summary.csv")).count();
        if fa != fb || summaries != run.results.len() {
            bad.push(format!("{} differs", run.name));
        }
        if run.elapsed > RUN_BUDGET || t > RUN_BUDGET {
            bad.push(format!("{} took {:.1?}", run.name, run.elapsed.max(t)));
        }
    }
    Check {
        id: 1,
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} shipped configs byte-identical across two runs (parallel vs sequential); slowest run {:.1?}", runs.len(), slowest)
        } else {
            bad.join("; ")
        },
    }
}

/// 2: busy-core fraction against the configured utilization.
fn queueing(run: &ConfigRun) -> Check {
    let cfg = &run.exp.configs[0];
    let template = cfg.template().expect("template");
    // lambda = rho * mu * servers * cores = 0.3 * 200/s * 16
    let lambda = cfg.arrival_rate(&template).expect("rate");
    let r = &run.results[0];
    let busy = metric(r, "core_active_fraction");
    let jobs = metric(r, "jobs_completed") as u64;
    let pass = (lambda - 960.0).abs() < 1e-9 && (busy - 0.30).abs() <= BUSY_TOL && jobs >= QUEUEING_MIN_JOBS && run.elapsed < QUEUEING_BUDGET;
    Check { id: 2, pass, detail: format!("lambda {lambda} jobs/s, busy fraction {busy:.4} over {jobs} jobs (want 0.30 +/- {BUSY_TOL}), {:.1?}", run.elapsed) }
}

/// 3: star-24 with every port active for two hours.
fn star24(run: &ConfigRun) -> Check {
    let r = &run.results[0];
    let net = r.report.energy.network_total();
    let want = Energy(STAR_ENERGY_J * 1_000_000_000_000);
    let expected_from_power = Energy::of(Power::from_watts(STAR_POWER_W), SimDuration::from_secs(STAR_SECONDS));
    let series = r.report.series.as_ref().expect("series");
    let flat = series.samples.windows(2).all(|w| w[0].fleet_power == w[1].fleet_power);
    let switch_s = metric(r, "awake_switch_seconds");
    let pass = net == want && expected_from_power == want && flat && switch_s == STAR_SECONDS as f64 && run.elapsed < Duration::from_secs(10);
    Check {
        id: 3,
        pass,
        detail: format!(
            "network energy {} J (want {STAR_ENERGY_J} J exactly = {STAR_POWER_W} W x {STAR_SECONDS} s), power flat over {} samples, {:.1?}",
            net.0 as f64 / 1e12,
            series.samples.len(),
            run.elapsed
        ),
    }
}

/// Longest path by enumerating every path from every node.
fn brute_critical_path(sizes: &[u64], edges: &[(usize, usize)]) -> u64 {
    fn walk(v: usize, acc: u64, sizes: &[u64], edges: &[(usize, usize)]) -> u64 {
        let here = acc + sizes[v];
        edges.iter().filter(|e| e.0 == v).map(|e| walk(e.1, here, sizes, edges)).max().unwrap_or(here).max(here)
    }
    (0..sizes.len()).map(|v| walk(v, 0, sizes, edges)).max().unwrap_or(0)
}

fn dag_config(sizes_ms: &[u64], edges: &[(usize, usize)]) -> String {
    let tasks: Vec<String> = sizes_ms.iter().map(|ms| format!("{{ size = {{ dist = \"constant\", ms = {ms}.0 }} }}")).collect();
    let edges: Vec<String> = edges.iter().map(|(a, b)| format!("{{ from = {a}, to = {b} }}")).collect();
    format!(
        "[simulation]\nseed = 5\nstop = {{ jobs = 1 }}\nsample_interval_s = 0\n\
         [fleet]\nservers = 1\ncores_per_package = {DAG_MAX_TASKS}\n\
         [workload]\narrivals = {{ kind = \"poisson\", rate = 1.0 }}\ntasks = [{}]\nedges = [{}]\n",
        tasks.join(", "),
        edges.join(", ")
    )
}

/// 4: every DAG on up to five tasks, unconstrained cores, zero-size edges.
fn dag_oracle(registry: &PolicyRegistry, conserved: &mut Conservation) -> Check {
    let start = Instant::now();
    // Three size patterns so ties and dominance both show up.
    let patterns: [[u64; DAG_MAX_TASKS]; 3] = [[1, 2, 3, 4, 5], [5, 1, 4, 2, 3], [2, 2, 2, 2, 2]];
    let (mut shapes, mut cases, mut bad) = (0usize, 0usize, Vec::new());
    for n in 1..=DAG_MAX_TASKS {
        // Every DAG has a topological order, so edges i -> j with i < j over
        // all subsets of pairs cover every shape.
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            shapes += 1;
            let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &p)| p).collect();
            for pat in &patterns {
                cases += 1;
                let sizes = &pat[..n];
                let exp = Experiment::parse(&dag_config(sizes, &edges), Path::new(".")).expect("dag config");
                let r = runner::run_cell(&exp, &exp.cells()[0], registry).expect("dag run");
                conserved.add(&r);
                let want = brute_critical_path(&sizes.iter().map(|ms| ms * 1000).collect::<Vec<_>>(), &edges);
                if r.report.latencies != [want] {
                    bad.push(format!("n={n} edges={edges:?} sizes={sizes:?}: got {:?} want {want}", r.report.latencies));
                }
            }
        }
    }
    let t = start.elapsed();
    Check {
        id: 4,
        pass: bad.is_empty() && t < DAG_BUDGET,
        detail: if bad.is_empty() {
            format!("{shapes} DAG shapes x 3 size patterns ({cases} jobs) match the brute-force critical path exactly, {t:.1?}")
        } else {
            format!("{} mismatches, first: {}", bad.len(), bad[0])
        },
    }
}

/// Exact progressive filling: repeatedly saturate the link with the smallest
/// equal share among the unfixed flows crossing it.
fn reference_max_min(capacities: &[u64], flows: &[Vec<usize>]) -> Vec<BigRational> {
    let big = |x: u64| BigRational::from_integer(x.into());
    let zero = big(0);
    let mut rate: Vec<Option<BigRational>> = vec![None; flows.len()];
    let mut remaining: Vec<BigRational> = capacities.iter().map(|&c| big(c)).collect();
    loop {
        let mut best: Option<(BigRational, usize)> = None;
        for (l, rem) in remaining.iter().enumerate() {
            let users = flows.iter().enumerate().filter(|(f, links)| rate[*f].is_none() && links.contains(&l)).count();
            if users == 0 {
                continue;
            }
            let share = rem / big(users as u64);
            if best.as_ref().is_none_or(|(b, _)| share < *b) {
                best = Some((share, l));
            }
        }
        let Some((share, link)) = best else { break };
        for f in 0..flows.len() {
            if rate[f].is_none() && flows[f].contains(&link) {
                for &l in &flows[f] {
                    remaining[l] = &remaining[l] - &share;
                }
                rate[f] = Some(share.clone());
            }
        }
        debug_assert!(remaining.iter().all(|r| *r >= zero));
    }
    rate.into_iter().map(|r| r.expect("every flow crosses a link")).collect()
}

fn to_f64(r: &BigRational) -> f64 {
    // Rates are below 2^53 bit/s, so integer part plus a fraction is enough.
    let whole = r.floor();
    let frac = r - &whole;
    let w: f64 = whole.to_integer().to_string().parse().expect("integer");
    let num: f64 = frac.numer().to_string().parse().expect("numer");
    let den: f64 = frac.denom().to_string().parse().expect("denom");
    w + num / den
}

/// 5: randomized flow sets against the exact reference.
fn max_min_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_786d_696e);
    let mut worst = 0.0f64;
    for _ in 0..MAXMIN_SETS {
        let links = rng.random_range(1..=MAXMIN_MAX_LINKS);
        let caps: Vec<u64> = (0..links).map(|_| rng.random_range(1..=100u64) * 100_000_000).collect();
        let n_flows = rng.random_range(1..=MAXMIN_MAX_FLOWS);
        let flows: Vec<Vec<usize>> = (0..n_flows)
            .map(|_| {
                let mut f: Vec<usize> = (0..links).filter(|_| rng.random_bool(0.5)).collect();
                if f.is_empty() {
                    f.push(rng.random_range(0..links));
                }
                f
            })
            .collect();
        let got = max_min_rates(&caps.iter().map(|&c| c as f64).collect::<Vec<_>>(), &flows);
        let want = reference_max_min(&caps, &flows);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - to_f64(w)).abs());
        }
    }
    let t = start.elapsed();
    Check {
        id: 5,
        pass: worst <= MAXMIN_TOL_BPS && t < Duration::from_secs(10),
        detail: format!("{MAXMIN_SETS} random flow sets (<= {MAXMIN_MAX_LINKS} links, <= {MAXMIN_MAX_FLOWS} flows), worst gap {worst:.3e} bit/s (allowed {MAXMIN_TOL_BPS}), {t:.1?}"),
    }
}

/// Seed-mean of `key` per sweep point.
fn point_means(run: &ConfigRun, key: &str) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &run.results {
        let e = acc.entry(r.cell.point).or_default();
        e.0 += metric(r, key);
        e.1 += 1;
    }
    acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect()
}

/// 6: energy against tau has an interior minimum in the same bucket at every rho.
fn delay_timer_shape(run: &ConfigRun) -> Check {
    let energy = point_means(run, "energy_total_j");
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &run.exp.points {
        let cell = Cell { id: 0, point: p.index, seed: 0 };
        let rho = axis(&run.exp, &cell, "workload.arrivals.utilization").to_string();
        let tau = num(&axis(&run.exp, &cell, "power.controller.tau_s"));
        curves.entry(rho).or_default().push((tau, energy[&p.index]));
    }
    let mut argmins = Vec::new();
    let mut interior = true;
    let mut parts = Vec::new();
    for (rho, c) in &mut curves {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (i, min) = c.iter().enumerate().map(|(i, x)| (i, x.1)).min_by(|a, b| a.1.total_cmp(&b.1)).expect("curve");
        interior &= i > 0 && i + 1 < c.len() && min < c[0].1 && min < c[c.len() - 1].1;
        argmins.push(i);
        parts.push(format!("rho {rho}: argmin tau {:.3} s (bucket {i}), E {:.0}/{:.0}/{:.0} J at ends/min", c[i].0, c[0].1, c[c.len() - 1].1, min));
    }
    let same = argmins.windows(2).all(|w| w[0] == w[1]);
    let grid_ok = curves.values().all(|c| c.len() == 10 && (c[0].0 - 0.05).abs() < 1e-12 && (c[9].0 - 12.8).abs() < 1e-12);
    Check {
        id: 6,
        pass: interior && same && grid_ok && curves.len() == 3 && run.elapsed < SWEEP_BUDGET,
        detail: format!("{}; {:.1?}", parts.join("; "), run.elapsed),
    }
}

/// 7: best dual-timer cell versus best single-timer cell.
fn dual_timer(single: &ConfigRun, dual: &ConfigRun) -> Check {
    let (se, sp) = (point_means(single, "energy_total_j"), point_means(single, "latency_p95_s"));
    let (de, dp) = (point_means(dual, "energy_total_j"), point_means(dual, "latency_p95_s"));
    let (bs, best_single) = se.iter().min_by(|a, b| a.1.total_cmp(b.1)).map(|(p, e)| (*p, *e)).expect("single");
    let p95_single = sp[&bs];
    // n_high = 0 would just be a single timer
    let best_dual = dual
        .exp
        .points
        .iter()
        .filter(|p| {
            let cell = Cell { id: 0, point: p.index, seed: 0 };
            num(&axis(&dual.exp, &cell, "power.controller.n_high")) > 0.0 && dp[&p.index] <= p95_single
        })
        .map(|p| (p.index, de[&p.index]))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let t = single.elapsed + dual.elapsed;
    match best_dual {
        Some((bd, e)) => Check {
            id: 7,
            pass: e <= best_single && t < SWEEP_BUDGET,
            detail: format!(
                "best single {best_single:.0} J at p95 {p95_single:.3} s ({}); best dual {e:.0} J at p95 {:.3} s ({}), {:.1}% less; {t:.1?}",
                single.exp.points[bs].label(),
                dp[&bd],
                dual.exp.points[bd].label(),
                100.0 * (1.0 - e / best_single)
            ),
        },
        None => Check { id: 7, pass: false, detail: format!("no dual cell meets p95 {p95_single:.3} s") },
    }
}

/// 8: adaptive pools keep active residency near rho and idle sleepers deep.
fn adaptive_pools(run: &ConfigRun) -> Check {
    let mut parts = Vec::new();
    let mut pass = run.elapsed < POOLS_BUDGET;
    for r in &run.results {
        let rho = num(&axis(&run.exp, &r.cell, "workload.arrivals.utilization"));
        let active = metric(r, "core_active_fraction");
        let deep = metric(r, "sleep_pool_deep_fraction");
        pass &= (active - rho).abs() <= RESIDENCY_TOL && (rho > 0.6 || deep >= DEEP_MIN);
        parts.push(format!("rho {rho} seed {}: active {active:.3} deep {deep:.3}", r.cell.seed));
    }
    Check { id: 8, pass, detail: format!("{}; {:.1?}", parts.join(", "), run.elapsed) }
}

/// 9: network-aware placement against server-balanced, seed by seed.
fn network_aware(run: &ConfigRun) -> Check {
    let mut by_seed: BTreeMap<u64, BTreeMap<String, &CellResult>> = BTreeMap::new();
    for r in &run.results {
        let policy = axis(&run.exp, &r.cell, "scheduler.policy").as_str().expect("policy").to_string();
        by_seed.entry(r.cell.seed).or_default().insert(policy, r);
    }
    let mut pass = run.elapsed < NETWORK_BUDGET;
    let mut parts = Vec::new();
    for (seed, m) in &by_seed {
        let (lb, na) = (m["load_balance"], m["network_aware"]);
        let (sw_lb, sw_na) = (metric(lb, "awake_switch_seconds"), metric(na, "awake_switch_seconds"));
        let (p_lb, p_na) = (metric(lb, "latency_p95_s"), metric(na, "latency_p95_s"));
        pass &= sw_na < sw_lb && p_na <= P95_SLACK * p_lb && metric(lb, "jobs_completed") == 2000.0;
        parts.push(format!("seed {seed}: switch-s {sw_lb:.2} -> {sw_na:.2}, p95 x{:.3}", p_na / p_lb));
    }
    Check { id: 9, pass, detail: format!("{}; {:.1?}", parts.join(", "), run.elapsed) }
}

#[derive(Default)]
struct Conservation {
    runs: usize,
    transfers: u64,
    failures: Vec<String>,
}

impl Conservation {
    fn add(&mut self, r: &CellResult) {
        self.runs += 1;
        let m = &r.report.metrics;
        self.transfers += m.transfers_completed;
        let subtotal = r.report.energy.server_total() + r.report.energy.network_total();
        let summed: Energy = r.report.energy.servers.iter().chain(&r.report.energy.switches).copied().sum();
        if !m.residency_conserved || !m.energy_additive || m.flow_conservation_violations != 0 || subtotal != summed {
            self.failures.push(format!("cell {} seed {}", r.cell.id, r.cell.seed));
        }
    }

    fn check(&self) -> Check {
        Check {
            id: 10,
            pass: self.failures.is_empty(),
            detail: format!(
                "{} runs: residency sums equal elapsed time, energy equals server + network subtotals, {} completed transfers conserve bytes; {} failures",
                self.runs,
                self.transfers,
                self.failures.len()
            ),
        }
    }
}

fn main() {
    let registry = PolicyRegistry::default();
    let mut conserved = Conservation::default();
    let names = [
        "validation_queueing",
        "validation_star24",
        "case1_provisioning",
        "case2_single_timer",
        "case2_web_serving_single",
        "case2_dual_timer",
        "case3_adaptive_pools",
        "case4_network_aware",
    ];
    let shipped: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(configs_dir())
            .expect("configs dir")
            .filter_map(|e| e.ok()?.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
            .filter(|s| !s.starts_with('.') && s != "traces")
            .collect();
        v.sort();
        v
    };
    let runs: Vec<ConfigRun> = names.iter().map(|n| run_config(n, &registry)).collect();
    for run in &runs {
        for r in &run.results {
            conserved.add(r);
        }
    }
    let by_name = |n: &str| runs.iter().find(|r| r.name == n).expect("config run");

    let mut checks = vec![determinism(&runs, &registry)];
    let mut listed: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    listed.sort();
    if listed != shipped {
        checks[0].pass = false;
        checks[0].detail = format!("shipped configs {shipped:?} differ from the suite's list");
    }
    checks.push(queueing(by_name("validation_queueing")));
    checks.push(star24(by_name("validation_star24")));
    checks.push(dag_oracle(&registry, &mut conserved));
    checks.push(max_min_oracle());
    checks.push(delay_timer_shape(by_name("case2_single_timer")));
    checks.push(dual_timer(by_name("case2_web_serving_single"), by_name("case2_dual_timer")));
    checks.push(adaptive_pools(by_name("case3_adaptive_pools")));
    checks.push(network_aware(by_name("case4_network_aware")));
    checks.push(conserved.check());

    let mut failed = 0;
    for c in &checks {
        println!("{} criterion {:>2}: {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.detail);
        failed += usize::from(!c.pass);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
