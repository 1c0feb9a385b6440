use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dcsim::config::{ConfigError, Experiment};
use dcsim::runner::{self, CellResult};
use dcsim::scheduling::PolicyRegistry;

/// Event-driven data-center power and performance simulator.
#[derive(Parser)]
#[command(name = "dcsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration (no [sweep] table) for each of its seeds.
    Run(RunArgs),
    /// Check a configuration without running it.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run every (point, seed) cell of a configuration's [sweep] table.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory. Defaults to `output.dir`, then out/<config name>.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Replace the configured seeds. Repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Worker threads for cells. 0 means one per CPU.
    #[arg(short, long, default_value_t = 0)]
    jobs: usize,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let registry = PolicyRegistry::default();
    match cli.cmd {
        Cmd::Validate { config } => validate(&config, &registry),
        Cmd::Run(a) => execute(a, &registry, false),
        Cmd::Sweep(a) => execute(a, &registry, true),
    }
}

fn report_config_error(path: &Path, e: &ConfigError) {
    eprintln!("{}: {e}", path.display());
}

fn validate(path: &Path, registry: &PolicyRegistry) -> ExitCode {
    match load(path, registry) {
        Ok(exp) => {
            println!("{}: ok ({} point(s), {} seed(s))", path.display(), exp.points.len(), exp.seeds.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_config_error(path, &e);
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load(path: &Path, registry: &PolicyRegistry) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Experiment::parse_with(&text, &dir, registry)
}

fn execute(a: RunArgs, registry: &PolicyRegistry, sweep: bool) -> ExitCode {
    let mut exp = match load(&a.config, registry) {
        Ok(e) => e,
        Err(e) => {
            report_config_error(&a.config, &e);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if !sweep && !exp.axes.is_empty() {
        eprintln!("{}: config has a [sweep] table; use `dcsim sweep`", a.config.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    if !a.seeds.is_empty() {
        exp.override_seeds(a.seeds.clone());
    }
    let out = match (&a.out, &exp.configs[0].output.dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => exp.base_dir.join(d),
        (None, None) => {
            let stem = a.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            PathBuf::from("out").join(stem)
        }
    };
    match run(&exp, registry, a.jobs, &out) {
        Ok(results) => {
            print_table(&exp, &results);
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(exp: &Experiment, registry: &PolicyRegistry, jobs: usize, out: &Path) -> anyhow::Result<Vec<CellResult>> {
    let cells = exp.cells();
    let results = runner::run_cells(exp, &cells, registry, jobs).into_iter().collect::<Result<Vec<_>, _>>()?;
    runner::write_outputs(out, exp, &results).with_context(|| format!("writing {}", out.display()))?;
    Ok(results)
}

const SHOWN: [&str; 5] = ["jobs_completed", "energy_total_j", "avg_power_w", "latency_mean_s", "latency_p95_s"];

fn print_table(exp: &Experiment, results: &[CellResult]) {
    print!("{:>5} {:>8}", "point", "seed");
    for k in SHOWN {
        print!(" {k:>15}");
    }
    println!();
    for r in results {
        print!("{:>5} {:>8}", r.cell.point, r.cell.seed);
        for k in SHOWN {
            match r.summary.get(k).and_then(|m| m.as_f64()) {
                Some(v) if k == "jobs_completed" => print!(" {v:>15}"),
                Some(v) => print!(" {v:>15.6}"),
                None => print!(" {:>15}", "na"),
            }
        }
        println!();
    }
    if !exp.axes.is_empty() {
        for p in &exp.points {
            println!("point {}: {}", p.index, p.label());
        }
    }
}
