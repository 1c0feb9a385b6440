//! Runs experiment cells and writes their artifacts.
//!
//! Cells are independent simulations. With the `parallel` feature they run on
//! a rayon pool; results are always collected in cell order, so the output
//! does not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Cell, ConfigError, Experiment};
use crate::scheduling::{DispatchRecord, PolicyRegistry, QueueEntry};
use crate::sim::{SimError, SimReport, Simulation};
use crate::stats::{Metric, Summary};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cell {cell}: {source}")]
    Sim { cell: usize, source: SimError },
}

pub struct CellResult {
    pub cell: Cell,
    pub report: SimReport,
    /// Run summary plus the QoS rows.
    pub summary: Summary,
}

pub fn run_cell(exp: &Experiment, cell: &Cell, registry: &PolicyRegistry) -> Result<CellResult, RunError> {
    let setup = exp.setup(cell, registry)?;
    let report = Simulation::new(setup).and_then(Simulation::run).map_err(|source| RunError::Sim { cell: cell.id, source })?;
    let summary = qos_summary(exp, cell, &report);
    Ok(CellResult { cell: cell.clone(), report, summary })
}

fn qos_summary(exp: &Experiment, cell: &Cell, report: &SimReport) -> Summary {
    let cfg = &exp.configs[cell.point];
    let mut s = report.summary();
    let work = cfg.template().expect("validated").mean_work().as_secs_f64();
    let target = cfg.output.qos_factor * work;
    let mut lat = report.latencies.clone();
    lat.sort_unstable();
    let q = if lat.is_empty() {
        None
    } else {
        let n = lat.len();
        let rank = ((cfg.output.qos_percentile * n as f64).ceil() as usize).clamp(1, n);
        Some(lat[rank - 1] as f64 / 1e6)
    };
    s.push("qos_target_s", Metric::Real(target));
    s.push("qos_latency_s", q.map_or(Metric::Text("na".into()), Metric::Real));
    s.push("qos_met", Metric::Int(q.is_some_and(|q| q <= target) as u64));
    s
}

pub fn run_cells_sequential(exp: &Experiment, cells: &[Cell], registry: &PolicyRegistry) -> Vec<Result<CellResult, RunError>> {
    cells.iter().map(|c| run_cell(exp, c, registry)).collect()
}

/// Runs cells on `threads` workers (0 means one per CPU).
#[cfg(feature = "parallel")]
pub fn run_cells_parallel(
    exp: &Experiment,
    cells: &[Cell],
    registry: &PolicyRegistry,
    threads: usize,
) -> Vec<Result<CellResult, RunError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    pool.install(|| cells.par_iter().map(|c| run_cell(exp, c, registry)).collect())
}

/// Parallel when the feature is on and more than one thread is asked for.
pub fn run_cells(exp: &Experiment, cells: &[Cell], registry: &PolicyRegistry, threads: usize) -> Vec<Result<CellResult, RunError>> {
    #[cfg(feature = "parallel")]
    if threads != 1 && cells.len() > 1 {
        return run_cells_parallel(exp, cells, registry, threads);
    }
    let _ = threads;
    run_cells_sequential(exp, cells, registry)
}

pub fn config_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn metric_text(m: &Metric) -> String {
    match m {
        Metric::Int(i) => i.to_string(),
        Metric::Real(r) => format!("{r:.6}"),
        Metric::Text(t) => t.clone(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Summary keys across all cells, first-seen order.
/// Summary keys in first-seen order. The seed is an id column, not a metric.
fn key_union(results: &[CellResult]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for r in results {
        for (k, _) in r.summary.rows() {
            if k != "seed" && !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys
}

/// One row per cell: ids, sweep values, then every summary metric.
pub fn cells_csv(exp: &Experiment, results: &[CellResult]) -> String {
    let keys = key_union(results);
    let mut out = String::from("cell,point,seed");
    for (axis, _) in &exp.axes {
        out.push(',');
        out.push_str(&csv_field(axis));
    }
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for r in results {
        write!(out, "{},{},{}", r.cell.id, r.cell.point, r.cell.seed).expect("string write");
        for (_, v) in &exp.points[r.cell.point].overrides {
            out.push(',');
            out.push_str(&csv_field(&v.to_string()));
        }
        for k in &keys {
            out.push(',');
            if let Some(m) = r.summary.get(k) {
                out.push_str(&metric_text(m));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub point: usize,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Mean, min and max of every numeric metric across the seeds of each point.
pub fn aggregate(results: &[CellResult]) -> Vec<AggregateRow> {
    let keys = key_union(results);
    let mut points: Vec<usize> = results.iter().map(|r| r.cell.point).collect();
    points.sort_unstable();
    points.dedup();
    let mut rows = Vec::new();
    for p in points {
        for k in &keys {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.cell.point == p)
                .filter_map(|r| r.summary.get(k).and_then(Metric::as_f64))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            rows.push(AggregateRow { point: p, metric: k.clone(), mean, min, max, n: vals.len() });
        }
    }
    rows
}

pub fn aggregate_csv(exp: &Experiment, rows: &[AggregateRow]) -> String {
    let mut out = String::from("point");
    for (axis, _) in &exp.axes {
        out.push(',');
        out.push_str(&csv_field(axis));
    }
    out.push_str(",metric,mean,min,max,seeds\n");
    for r in rows {
        write!(out, "{}", r.point).expect("string write");
        for (_, v) in &exp.points[r.point].overrides {
            out.push(',');
            out.push_str(&csv_field(&v.to_string()));
        }
        writeln!(out, ",{},{:.6},{:.6},{:.6},{}", r.metric, r.mean, r.min, r.max, r.n).expect("string write");
    }
    out
}

pub fn audit_csv(records: &[DispatchRecord]) -> String {
    let mut out = String::from("job,task,server,time_s,entry\n");
    for r in records {
        let entry = match r.entry {
            QueueEntry::Immediate => "immediate",
            QueueEntry::ServerLocal => "server_local",
            QueueEntry::CoreLocal => "core_local",
            QueueEntry::Global => "global",
        };
        let server = r.server.map_or(String::new(), |s| s.0.to_string());
        writeln!(out, "{},{},{},{:.6},{}", r.task.job.0, r.task.index, server, r.time.as_secs_f64(), entry).expect("string write");
    }
    out
}

pub fn manifest(exp: &Experiment, cells: usize) -> String {
    let mut out = String::new();
    writeln!(out, "tool = \"dcsim\"").expect("string write");
    writeln!(out, "version = \"{}\"", env!("CARGO_PKG_VERSION")).expect("string write");
    writeln!(out, "config_sha256 = \"{}\"", config_sha256(&exp.text)).expect("string write");
    writeln!(out, "points = {}", exp.points.len()).expect("string write");
    writeln!(out, "seeds = [{}]", exp.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")).expect("string write");
    writeln!(out, "cells = {cells}").expect("string write");
    let axes: Vec<String> = exp.axes.iter().map(|(k, v)| format!("{k:?} = {}", v.len())).collect();
    writeln!(out, "axes = {{ {} }}", axes.join(", ")).expect("string write");
    out
}

/// Writes the manifest, config copy, cell and aggregate tables, and one
/// directory per cell with its summary and time series.
pub fn write_outputs(dir: &Path, exp: &Experiment, results: &[CellResult]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.toml"), manifest(exp, results.len()))?;
    fs::write(dir.join("config.toml"), &exp.text)?;
    fs::write(dir.join("cells.csv"), cells_csv(exp, results))?;
    fs::write(dir.join("aggregate.csv"), aggregate_csv(exp, &aggregate(results)))?;
    for r in results {
        let cd = dir.join(r.cell.dir_name());
        fs::create_dir_all(&cd)?;
        fs::write(cd.join("summary.csv"), r.summary.to_csv())?;
        if let Some(ts) = &r.report.series {
            let mut buf = Vec::new();
            ts.write_csv(&mut buf)?;
            fs::write(cd.join("timeseries.csv"), buf)?;
        }
        if let Some(a) = &r.report.audit {
            fs::write(cd.join("audit.csv"), audit_csv(a))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const SWEEP: &str = r#"
[simulation]
seeds = [1, 2]
stop = { jobs = 300 }

[fleet]
servers = 4
cores_per_package = 2

[workload]
arrivals = { kind = "poisson", utilization = 0.3 }
tasks = [{ size = { dist = "exponential", mean_ms = 5.0 } }]

[power]
controller = { kind = "delay_timer", tau_s = 0.1 }
local = { core_sleep = "c6", package_sleep = true }

[sweep]
"power.controller.tau_s" = [0.0, 0.1]
"#;

    fn ok(v: Vec<Result<CellResult, RunError>>) -> Vec<CellResult> {
        v.into_iter().map(|r| r.unwrap()).collect()
    }

    #[test]
    fn cell_count_is_points_times_seeds() {
        let exp = Experiment::parse(SWEEP, Path::new(".")).unwrap();
        let reg = PolicyRegistry::default();
        let res = ok(run_cells_sequential(&exp, &exp.cells(), &reg));
        assert_eq!(res.len(), 4);
        let agg = aggregate(&res);
        let energy: Vec<&AggregateRow> = agg.iter().filter(|r| r.metric == "energy_total_j").collect();
        assert_eq!(energy.len(), 2);
        assert!(energy.iter().all(|r| r.n == 2 && r.min <= r.mean && r.mean <= r.max));
        assert!(res.iter().all(|r| r.summary.get("qos_met").is_some()));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let exp = Experiment::parse(SWEEP, Path::new(".")).unwrap();
        let reg = PolicyRegistry::default();
        let cells = exp.cells();
        let a = ok(run_cells_sequential(&exp, &cells, &reg));
        let b = ok(run_cells_parallel(&exp, &cells, &reg, 4));
        assert_eq!(cells_csv(&exp, &a), cells_csv(&exp, &b));
    }

    #[test]
    fn outputs_are_reproducible() {
        let exp = Experiment::parse(SWEEP, Path::new(".")).unwrap();
        let reg = PolicyRegistry::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let res = ok(run_cells(&exp, &exp.cells(), &reg, 2));
            write_outputs(d.path(), &exp, &res).unwrap();
        }
        for f in ["manifest.toml", "cells.csv", "aggregate.csv", "p001_seed2/summary.csv", "p001_seed2/timeseries.csv"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
    }
}
