//! Experiment configuration: a single TOML file, validated before anything
//! runs. Unknown keys are rejected.
//!
//! A `[sweep]` table maps dotted config paths to value lists; every point of
//! the cartesian product is an independent configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::engine::SimDuration;
use crate::network::{LpiConfig, NetworkParams, SwitchPowerProfile, Topology, TopologyKind, Transport};
use crate::powerpolicy::ControllerConfig;
use crate::scheduling::PolicyRegistry;
use crate::server::{CoreState, LocalPowerPolicy, QueueMode, ServerPowerProfile, ServerSpec};
use crate::sim::{SimSetup, StopCondition, MAX_TEMPLATE_TASKS};
use crate::stats::Power;
use crate::workload::{
    load_trace, utilization_to_arrival_rate, ArrivalProcess, DagEdge, JobTemplate, MmppState, SizeDist, TaskTemplate,
    TaskType, TraceUnit, TypeSet,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulation: SimulationCfg,
    pub fleet: FleetCfg,
    #[serde(default)]
    pub network: Option<NetworkCfg>,
    pub workload: WorkloadCfg,
    #[serde(default)]
    pub scheduler: SchedulerCfg,
    #[serde(default)]
    pub power: PowerCfg,
    #[serde(default)]
    pub output: OutputCfg,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StopCfg {
    Jobs(u64),
    DurationS(f64),
    /// Replay the arrival trace to its end, then drain.
    Exhaust,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationCfg {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    pub stop: StopCfg,
    /// Safety cap when draining.
    #[serde(default)]
    pub time_limit_s: Option<f64>,
    /// Time-series interval; 0 turns sampling off.
    #[serde(default = "one")]
    pub sample_interval_s: f64,
    #[serde(default)]
    pub check_invariants: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueueModeCfg {
    #[default]
    Unified,
    PerCore,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetCfg {
    pub servers: u32,
    #[serde(default = "one_u32")]
    pub packages: u32,
    pub cores_per_package: u32,
    #[serde(default = "nominal")]
    pub frequency_scales: Vec<f64>,
    #[serde(default)]
    pub queue_mode: QueueModeCfg,
    /// Task types per server; every server serves every type when absent.
    #[serde(default)]
    pub serves: Option<Vec<Vec<u8>>>,
    /// `"example"` or a path to a server profile file.
    #[serde(default = "example_name")]
    pub profile: String,
}

fn one_u32() -> u32 {
    1
}

fn nominal() -> Vec<f64> {
    vec![1.0]
}

fn example_name() -> String {
    "example".into()
}

fn reference_name() -> String {
    "reference".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCfg {
    pub topology: TopologyKind,
    #[serde(default = "one")]
    pub link_rate_gbps: f64,
    #[serde(default)]
    pub transport: Transport,
    /// `"reference"` or a path to a switch profile file.
    #[serde(default = "reference_name")]
    pub switch_profile: String,
    #[serde(default)]
    pub lpi: LpiConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalCfg {
    /// Give either `utilization` (of all cores) or `rate` (jobs/s).
    Poisson {
        #[serde(default)]
        utilization: Option<f64>,
        #[serde(default)]
        rate: Option<f64>,
    },
    /// Two-state MMPP around a mean rate. `burstiness` is the high/low rate
    /// ratio, `high_fraction` the long-run share of time in the high state.
    Mmpp {
        #[serde(default)]
        utilization: Option<f64>,
        #[serde(default)]
        rate: Option<f64>,
        burstiness: f64,
        high_fraction: f64,
        mean_high_s: f64,
    },
    Trace {
        path: String,
        #[serde(default)]
        unit: TraceUnit,
    },
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeCfg {
    Constant { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
    Exponential { mean_ms: f64 },
}

impl SizeCfg {
    fn to_dist(self) -> SizeDist {
        let d = |ms: f64| SimDuration((ms * 1000.0).round() as u64);
        match self {
            SizeCfg::Constant { ms } => SizeDist::Constant(d(ms)),
            SizeCfg::Uniform { min_ms, max_ms } => SizeDist::Uniform { min: d(min_ms), max: d(max_ms) },
            SizeCfg::Exponential { mean_ms } => SizeDist::Exponential { mean: d(mean_ms) },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskCfg {
    #[serde(default)]
    pub name: String,
    #[serde(default, rename = "type")]
    pub task_type: u8,
    pub size: SizeCfg,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeCfg {
    pub from: u32,
    pub to: u32,
    #[serde(default)]
    pub bytes: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadCfg {
    pub arrivals: ArrivalCfg,
    pub tasks: Vec<TaskCfg>,
    #[serde(default)]
    pub edges: Vec<EdgeCfg>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerCfg {
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default)]
    pub global_queue: bool,
}

fn default_policy() -> String {
    "load_balance".into()
}

impl Default for SchedulerCfg {
    fn default() -> Self {
        SchedulerCfg { policy: default_policy(), global_queue: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreSleepCfg {
    C1,
    C3,
    C6,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalCfg {
    #[serde(default)]
    pub core_sleep: Option<CoreSleepCfg>,
    #[serde(default)]
    pub package_sleep: bool,
}

impl LocalCfg {
    pub fn policy(self) -> LocalPowerPolicy {
        LocalPowerPolicy {
            core_sleep: self.core_sleep.map(|c| match c {
                CoreSleepCfg::C1 => CoreState::C1,
                CoreSleepCfg::C3 => CoreState::C3,
                CoreSleepCfg::C6 => CoreState::C6,
            }),
            package_sleep: self.package_sleep,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerCfg {
    #[serde(default = "active_idle")]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub local: LocalCfg,
}

fn active_idle() -> ControllerConfig {
    ControllerConfig::ActiveIdle
}

impl Default for PowerCfg {
    fn default() -> Self {
        PowerCfg { controller: ControllerConfig::ActiveIdle, local: LocalCfg::default() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    /// Relative to the config file; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default = "yes")]
    pub timeseries: bool,
    #[serde(default)]
    pub audit: bool,
    /// QoS target: p95 latency at most this multiple of the mean job work.
    #[serde(default = "two")]
    pub qos_factor: f64,
    /// Percentile checked against the QoS target.
    #[serde(default = "p95")]
    pub qos_percentile: f64,
}

fn yes() -> bool {
    true
}

fn two() -> f64 {
    2.0
}

fn p95() -> f64 {
    0.95
}

impl Default for OutputCfg {
    fn default() -> Self {
        OutputCfg { dir: None, timeseries: true, audit: false, qos_factor: 2.0, qos_percentile: 0.95 }
    }
}

/// Server profile file: powers in watts, latencies in microseconds.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerProfileFile {
    #[serde(default)]
    pub description: String,
    pub core_active_w: f64,
    pub core_idle_w: f64,
    pub core_c1_w: f64,
    pub core_c3_w: f64,
    pub core_c6_w: f64,
    pub core_c1_wake_us: u64,
    pub core_c3_wake_us: u64,
    pub core_c6_wake_us: u64,
    pub package_c0_w: f64,
    pub package_c6_w: f64,
    pub package_c6_wake_us: u64,
    pub platform_s0_w: f64,
    pub platform_s3_w: f64,
    #[serde(default)]
    pub platform_off_w: f64,
    pub s3_entry_us: u64,
    pub s3_exit_us: u64,
    pub off_entry_us: u64,
    pub off_exit_us: u64,
}

impl ServerProfileFile {
    /// First power field that is negative or not finite.
    fn bad_power(&self) -> Option<&'static str> {
        [
            ("core_active_w", self.core_active_w),
            ("core_idle_w", self.core_idle_w),
            ("core_c1_w", self.core_c1_w),
            ("core_c3_w", self.core_c3_w),
            ("core_c6_w", self.core_c6_w),
            ("package_c0_w", self.package_c0_w),
            ("package_c6_w", self.package_c6_w),
            ("platform_s0_w", self.platform_s0_w),
            ("platform_s3_w", self.platform_s3_w),
            ("platform_off_w", self.platform_off_w),
        ]
        .into_iter()
        .find(|(_, w)| !(w.is_finite() && *w >= 0.0))
        .map(|(name, _)| name)
    }

    pub fn to_profile(&self) -> ServerPowerProfile {
        let w = Power::from_watts;
        ServerPowerProfile {
            core_active: w(self.core_active_w),
            core_idle: w(self.core_idle_w),
            core_c1: w(self.core_c1_w),
            core_c3: w(self.core_c3_w),
            core_c6: w(self.core_c6_w),
            core_c1_wake: SimDuration(self.core_c1_wake_us),
            core_c3_wake: SimDuration(self.core_c3_wake_us),
            core_c6_wake: SimDuration(self.core_c6_wake_us),
            package_c0: w(self.package_c0_w),
            package_c6: w(self.package_c6_w),
            package_c6_wake: SimDuration(self.package_c6_wake_us),
            platform_s0: w(self.platform_s0_w),
            platform_s3: w(self.platform_s3_w),
            platform_off: w(self.platform_off_w),
            s3_entry: SimDuration(self.s3_entry_us),
            s3_exit: SimDuration(self.s3_exit_us),
            off_entry: SimDuration(self.off_entry_us),
            off_exit: SimDuration(self.off_exit_us),
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })
}

pub fn load_server_profile(path: &Path) -> Result<ServerPowerProfile, ConfigError> {
    let f: ServerProfileFile = toml::from_str(&read(path)?).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    if let Some(name) = f.bad_power() {
        return Err(ConfigError::Parse(format!("{}: {name} must be finite and non-negative", path.display())));
    }
    Ok(f.to_profile())
}

pub fn load_switch_profile(path: &Path) -> Result<SwitchPowerProfile, ConfigError> {
    toml::from_str(&read(path)?).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
}

/// Sweep axis: explicit values or a generated grid.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum AxisCfg {
    List(Vec<toml::Value>),
    Grid(GridCfg),
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum GridCfg {
    Geometric { start: f64, stop: f64, count: u32 },
    Linear { start: f64, stop: f64, count: u32 },
}

/// Twelve significant digits, so grid values print cleanly.
fn tidy(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Grid points; the last point equals `stop` exactly.
pub fn geometric_grid(start: f64, stop: f64, count: u32) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|i| if i == n - 1 { stop } else { tidy(start * (stop / start).powf(i as f64 / (n - 1) as f64)) })
            .collect(),
    }
}

pub fn linear_grid(start: f64, stop: f64, count: u32) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n).map(|i| if i == n - 1 { stop } else { tidy(start + (stop - start) * i as f64 / (n - 1) as f64) }).collect(),
    }
}

/// Sets `path` (dotted) in `root`. Intermediate tables must exist unless the
/// final key is new in an existing table.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| format!("sweep path {path}: {} is not a table", parts[..i].join(".")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        // Missing tables are created; unknown keys still fail deserialization.
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// One sweep point: the overrides applied to the base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub index: usize,
    pub overrides: Vec<(String, toml::Value)>,
}

impl Point {
    pub fn label(&self) -> String {
        self.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// One simulation: a sweep point under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub point: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("p{:03}_seed{}", self.point, self.seed)
    }
}

/// A parsed, validated experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub text: String,
    pub base_dir: PathBuf,
    base: toml::Value,
    pub axes: Vec<(String, Vec<toml::Value>)>,
    pub points: Vec<Point>,
    pub seeds: Vec<u64>,
    /// Configuration of each point, already validated.
    pub configs: Vec<ExperimentConfig>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
        let text = read(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Experiment::parse(&text, &base_dir)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Experiment, ConfigError> {
        Experiment::parse_with(text, base_dir, &PolicyRegistry::default())
    }

    /// Parses and validates against a registry that may hold custom policies.
    pub fn parse_with(text: &str, base_dir: &Path, registry: &PolicyRegistry) -> Result<Experiment, ConfigError> {
        let mut base: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let sweep = base.as_table_mut().and_then(|t| t.remove("sweep"));
        let mut axes = Vec::new();
        let mut errors = Vec::new();
        if let Some(sweep) = sweep {
            let table = sweep.as_table().ok_or_else(|| ConfigError::Invalid(vec!["[sweep] must be a table".into()]))?.clone();
            for (key, v) in table {
                match v.try_into::<AxisCfg>() {
                    Ok(AxisCfg::List(vals)) if !vals.is_empty() => axes.push((key, vals)),
                    Ok(AxisCfg::List(_)) => errors.push(format!("sweep.{key}: empty value list")),
                    Ok(AxisCfg::Grid(g)) => {
                        let (vals, ok) = match g {
                            GridCfg::Geometric { start, stop, count } => {
                                (geometric_grid(start, stop, count), start > 0.0 && stop > 0.0 && count > 0)
                            }
                            GridCfg::Linear { start, stop, count } => (linear_grid(start, stop, count), count > 0),
                        };
                        if ok {
                            axes.push((key, vals.into_iter().map(toml::Value::Float).collect()));
                        } else {
                            errors.push(format!("sweep.{key}: grid needs count > 0 (and positive bounds when geometric)"));
                        }
                    }
                    Err(e) => errors.push(format!("sweep.{key}: expected a list or {{ geometric|linear = {{ start, stop, count }} }}: {e}")),
                }
            }
        }
        let mut points = vec![Point { index: 0, overrides: Vec::new() }];
        for (key, vals) in &axes {
            let mut next = Vec::with_capacity(points.len() * vals.len());
            for p in &points {
                for v in vals {
                    let mut o = p.overrides.clone();
                    o.push((key.clone(), v.clone()));
                    next.push(Point { index: 0, overrides: o });
                }
            }
            points = next;
        }
        for (i, p) in points.iter_mut().enumerate() {
            p.index = i;
        }
        let mut configs = Vec::with_capacity(points.len());
        for p in &points {
            let mut v = base.clone();
            let mut bad = false;
            for (k, val) in &p.overrides {
                if let Err(e) = set_path(&mut v, k, val.clone()) {
                    errors.push(e);
                    bad = true;
                }
            }
            if bad {
                continue;
            }
            let prefix = if axes.is_empty() { String::new() } else { format!("[point {}: {}] ", p.index, p.label()) };
            match v.try_into::<ExperimentConfig>() {
                Ok(cfg) => {
                    errors.extend(cfg.validate(base_dir, registry).into_iter().map(|e| format!("{prefix}{e}")));
                    configs.push(cfg);
                }
                Err(e) => errors.push(format!("{prefix}{e}")),
            }
            if !errors.is_empty() && !axes.is_empty() {
                // One broken point usually means all are; report once.
                break;
            }
        }
        errors.dedup();
        if !errors.is_empty() {
            return Err(ConfigError::Invalid(errors));
        }
        let seeds = configs[0].seeds();
        Ok(Experiment { text: text.to_string(), base_dir: base_dir.to_path_buf(), base, axes, points, seeds, configs })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::with_capacity(self.points.len() * self.seeds.len());
        for p in &self.points {
            for &seed in &self.seeds {
                cells.push(Cell { id: cells.len(), point: p.index, seed });
            }
        }
        cells
    }

    /// Replaces the seed list (CLI `--seed`).
    pub fn override_seeds(&mut self, seeds: Vec<u64>) {
        self.seeds = seeds;
    }

    pub fn base(&self) -> &toml::Value {
        &self.base
    }

    pub fn setup(&self, cell: &Cell, registry: &PolicyRegistry) -> Result<SimSetup, ConfigError> {
        self.configs[cell.point].setup(cell.seed, &self.base_dir, registry)
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        match (&self.simulation.seeds, self.simulation.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![1],
        }
    }

    pub fn total_cores(&self) -> u32 {
        self.fleet.servers * self.fleet.packages * self.fleet.cores_per_package
    }

    /// Every violation found, schema-valid input assumed.
    // Negated comparisons so NaN fails every check.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, base_dir: &Path, registry: &PolicyRegistry) -> Vec<String> {
        let mut v = Vec::new();
        let sim = &self.simulation;
        if sim.seed.is_some() && sim.seeds.is_some() {
            v.push("simulation: give either seed or seeds, not both".into());
        }
        if sim.seeds.as_ref().is_some_and(Vec::is_empty) {
            v.push("simulation.seeds: empty list".into());
        }
        match sim.stop {
            StopCfg::Jobs(0) => v.push("simulation.stop.jobs must be positive".into()),
            StopCfg::DurationS(d) if !(d.is_finite() && d > 0.0) => v.push("simulation.stop.duration_s must be positive".into()),
            StopCfg::Exhaust if !matches!(self.workload.arrivals, ArrivalCfg::Trace { .. }) => {
                v.push("simulation.stop = \"exhaust\" needs trace arrivals".into())
            }
            _ => {}
        }
        if !(sim.sample_interval_s.is_finite() && sim.sample_interval_s >= 0.0) {
            v.push("simulation.sample_interval_s must be non-negative".into());
        }
        let f = &self.fleet;
        if f.servers == 0 {
            v.push("fleet.servers must be positive".into());
        }
        if f.packages == 0 || f.cores_per_package == 0 {
            v.push("fleet.packages and fleet.cores_per_package must be positive".into());
        }
        let cores = (f.packages * f.cores_per_package) as usize;
        if f.frequency_scales.len() != 1 && f.frequency_scales.len() != cores {
            v.push(format!("fleet.frequency_scales: give 1 or {cores} values, got {}", f.frequency_scales.len()));
        }
        if f.frequency_scales.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            v.push("fleet.frequency_scales must be positive".into());
        }
        if let Some(serves) = &f.serves {
            if serves.len() != f.servers as usize {
                v.push(format!("fleet.serves: {} entries for {} servers", serves.len(), f.servers));
            }
            if serves.iter().flatten().any(|&t| t >= 64) {
                v.push("fleet.serves: task types must be below 64".into());
            }
        }
        match self.server_profile(base_dir) {
            Ok(p) => {
                if let Err(e) = p.validate() {
                    v.push(format!("fleet.profile: {e}"));
                }
            }
            Err(e) => v.push(format!("fleet.profile: {e}")),
        }
        if let Some(n) = &self.network {
            match Topology::build(n.topology, (n.link_rate_gbps * 1e9) as u64) {
                Ok(t) if t.n_servers() != f.servers as usize => {
                    v.push(format!("network.topology attaches {} servers but fleet.servers is {}", t.n_servers(), f.servers))
                }
                Ok(_) => {}
                Err(e) => v.push(format!("network.topology: {e}")),
            }
            if !(n.link_rate_gbps.is_finite() && n.link_rate_gbps > 0.0) {
                v.push("network.link_rate_gbps must be positive".into());
            }
            match self.switch_profile(base_dir) {
                Ok(Some(p)) => {
                    if let Err(e) = p.validate() {
                        v.push(format!("network.switch_profile: {e}"));
                    }
                }
                Ok(None) => {}
                Err(e) => v.push(format!("network.switch_profile: {e}")),
            }
            if let Transport::Packet { packet_bytes: 0, .. } = n.transport {
                v.push("network.transport.packet_bytes must be positive".into());
            }
        } else if self.workload.edges.iter().any(|e| e.bytes > 0) {
            v.push("workload.edges carry bytes but no [network] is configured".into());
        }
        let w = &self.workload;
        if w.tasks.is_empty() {
            v.push("workload.tasks: a job needs at least one task".into());
        }
        if w.tasks.len() > MAX_TEMPLATE_TASKS {
            v.push(format!("workload.tasks: at most {MAX_TEMPLATE_TASKS} tasks"));
        }
        if let Err(e) = self.template() {
            v.push(format!("workload: {e}"));
        }
        let served = self.served_union();
        for (i, t) in w.tasks.iter().enumerate() {
            if !served.contains(TaskType(t.task_type)) {
                v.push(format!("workload.tasks[{i}]: no server serves type {}", t.task_type));
            }
        }
        let rate_check = |utilization: Option<f64>, rate: Option<f64>, v: &mut Vec<String>| match (utilization, rate) {
            (Some(_), Some(_)) | (None, None) => v.push("workload.arrivals: give exactly one of utilization or rate".into()),
            (Some(u), None) if !(u > 0.0 && u.is_finite()) => v.push("workload.arrivals.utilization must be positive".into()),
            (None, Some(r)) if !(r > 0.0 && r.is_finite()) => v.push("workload.arrivals.rate must be positive".into()),
            _ => {}
        };
        match &w.arrivals {
            ArrivalCfg::Poisson { utilization, rate } => rate_check(*utilization, *rate, &mut v),
            ArrivalCfg::Mmpp { utilization, rate, burstiness, high_fraction, mean_high_s } => {
                rate_check(*utilization, *rate, &mut v);
                if !(*burstiness >= 1.0) {
                    v.push("workload.arrivals.burstiness must be at least 1".into());
                }
                if !(*high_fraction > 0.0 && *high_fraction < 1.0) {
                    v.push("workload.arrivals.high_fraction must lie in (0, 1)".into());
                }
                if !(*mean_high_s > 0.0) {
                    v.push("workload.arrivals.mean_high_s must be positive".into());
                }
            }
            ArrivalCfg::Trace { path, .. } => {
                if !resolve(base_dir, path).is_file() {
                    v.push(format!("workload.arrivals.path: no file {path}"));
                }
            }
        }
        if registry.create(&self.scheduler.policy).is_none() {
            let names: Vec<&str> = registry.names().collect();
            v.push(format!("scheduler.policy: unknown policy {:?} (known: {})", self.scheduler.policy, names.join(", ")));
        }
        v.extend(self.power.controller.validate(f.servers));
        let o = &self.output;
        if !(o.qos_factor > 0.0) {
            v.push("output.qos_factor must be positive".into());
        }
        if !(o.qos_percentile > 0.0 && o.qos_percentile <= 1.0) {
            v.push("output.qos_percentile must lie in (0, 1]".into());
        }
        v
    }

    fn served_union(&self) -> TypeSet {
        match &self.fleet.serves {
            None => TypeSet::ALL,
            Some(s) => TypeSet(s.iter().flatten().filter(|&&t| t < 64).fold(0, |acc, &t| acc | (1 << t))),
        }
    }

    pub fn server_profile(&self, base_dir: &Path) -> Result<ServerPowerProfile, ConfigError> {
        match self.fleet.profile.as_str() {
            "example" => Ok(ServerPowerProfile::example()),
            p => load_server_profile(&resolve(base_dir, p)),
        }
    }

    fn switch_profile(&self, base_dir: &Path) -> Result<Option<SwitchPowerProfile>, ConfigError> {
        match &self.network {
            None => Ok(None),
            Some(n) => match n.switch_profile.as_str() {
                "reference" => Ok(Some(SwitchPowerProfile::reference())),
                p => load_switch_profile(&resolve(base_dir, p)).map(Some),
            },
        }
    }

    pub fn template(&self) -> Result<JobTemplate, String> {
        let tasks = self
            .workload
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskTemplate {
                name: if t.name.is_empty() { format!("t{i}") } else { t.name.clone() },
                task_type: TaskType(t.task_type),
                size: t.size.to_dist(),
            })
            .collect();
        let edges = self.workload.edges.iter().map(|e| DagEdge { from: e.from, to: e.to, bytes: e.bytes }).collect();
        JobTemplate::new(tasks, edges).map_err(|e| e.to_string())
    }

    /// Mean arrival rate in jobs per second (stochastic arrivals only).
    pub fn arrival_rate(&self, template: &JobTemplate) -> Option<f64> {
        let (utilization, rate) = match self.workload.arrivals {
            ArrivalCfg::Poisson { utilization, rate } | ArrivalCfg::Mmpp { utilization, rate, .. } => (utilization, rate),
            ArrivalCfg::Trace { .. } => return None,
        };
        rate.or_else(|| {
            let mu = 1.0 / template.mean_work().as_secs_f64();
            utilization_to_arrival_rate(utilization?, mu, 1, self.total_cores()).ok()
        })
    }

    pub fn setup(&self, seed: u64, base_dir: &Path, registry: &PolicyRegistry) -> Result<SimSetup, ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(vec![e]);
        let template = self.template().map_err(invalid)?;
        let arrivals = match &self.workload.arrivals {
            ArrivalCfg::Poisson { .. } => {
                let lambda = self.arrival_rate(&template).expect("stochastic");
                ArrivalProcess::poisson(lambda).map_err(|e| invalid(e.to_string()))?
            }
            ArrivalCfg::Mmpp { burstiness, high_fraction, mean_high_s, .. } => {
                let mean = self.arrival_rate(&template).expect("stochastic");
                let low = mean / (high_fraction * burstiness + (1.0 - high_fraction));
                let r_hl = 1.0 / mean_high_s;
                let r_lh = r_hl * high_fraction / (1.0 - high_fraction);
                let state = MmppState::new(low * burstiness, low, r_hl, r_lh).map_err(|e| invalid(e.to_string()))?;
                ArrivalProcess::mmpp(state)
            }
            ArrivalCfg::Trace { path, unit } => {
                let p = resolve(base_dir, path);
                let file = fs::File::open(&p).map_err(|e| ConfigError::Io { path: p.display().to_string(), reason: e.to_string() })?;
                let trace = load_trace(std::io::BufReader::new(file), *unit).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                ArrivalProcess::trace(trace)
            }
        };
        let f = &self.fleet;
        let servers = (0..f.servers as usize)
            .map(|i| ServerSpec {
                packages: f.packages,
                cores_per_package: f.cores_per_package,
                frequency_scales: f.frequency_scales.clone(),
                queue_mode: match f.queue_mode {
                    QueueModeCfg::Unified => QueueMode::Unified,
                    QueueModeCfg::PerCore => QueueMode::PerCore,
                },
                served: match &f.serves {
                    None => TypeSet::ALL,
                    Some(s) => s[i].iter().fold(TypeSet(0), |acc, &t| acc.with(TaskType(t))),
                },
            })
            .collect();
        let network = match &self.network {
            None => None,
            Some(n) => Some(NetworkParams {
                topology: n.topology,
                link_rate_bps: (n.link_rate_gbps * 1e9).round() as u64,
                transport: n.transport,
                switch_profile: self.switch_profile(base_dir)?.expect("network configured"),
                lpi: n.lpi,
            }),
        };
        let s = &self.simulation;
        let secs = |x: f64| SimDuration((x * 1e6).round() as u64);
        Ok(SimSetup {
            seed,
            stop: match s.stop {
                StopCfg::Jobs(n) => StopCondition::Jobs(n),
                StopCfg::DurationS(d) => StopCondition::Duration(secs(d)),
                StopCfg::Exhaust => StopCondition::Exhaust,
            },
            time_limit: s.time_limit_s.map(secs),
            sample_interval: (self.output.timeseries && s.sample_interval_s > 0.0).then(|| secs(s.sample_interval_s)),
            servers,
            profile: self.server_profile(base_dir)?,
            local: self.power.local.policy(),
            network,
            arrivals,
            template,
            policy: registry.create(&self.scheduler.policy).ok_or_else(|| invalid(format!("unknown policy {}", self.scheduler.policy)))?,
            global_queue: self.scheduler.global_queue,
            controller: self.power.controller.build(f.servers),
            audit: self.output.audit,
            check_invariants: s.check_invariants,
        })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
