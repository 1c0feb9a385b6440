//! Writes a synthetic diurnal arrival trace, one timestamp (ms) per line.
//!
//! usage: gen_trace <out> [day_s] [mean_rate_per_s] [swing] [seed]
//!
//! The rate follows `mean * (1 - swing * cos(2 pi t / day))`, so it starts at
//! a trough, peaks half way and ends at a trough. Arrivals come from thinning
//! a Poisson process at the peak rate.

use std::fs::File;
use std::io::{BufWriter, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> std::io::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let Some(out) = args.get(1) else {
        eprintln!("usage: gen_trace <out> [day_s] [mean_rate_per_s] [swing] [seed]");
        std::process::exit(1);
    };
    let day: f64 = arg(&args, 2, 30.0);
    let mean: f64 = arg(&args, 3, 1200.0);
    let swing: f64 = arg(&args, 4, 0.8);
    let seed: u64 = arg(&args, 5, 7);
    assert!((0.0..=1.0).contains(&swing), "swing must lie in [0, 1]");

    let peak = mean * (1.0 + swing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "# synthetic diurnal trace: day {day} s, mean {mean}/s, swing {swing}, seed {seed}; unit ms")?;
    let mut t = 0.0f64;
    let mut n = 0u64;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / peak;
        if t >= day {
            break;
        }
        let rate = mean * (1.0 - swing * (std::f64::consts::TAU * t / day).cos());
        if rng.random::<f64>() * peak < rate {
            writeln!(w, "{:.3}", t * 1e3)?;
            n += 1;
        }
    }
    w.flush()?;
    eprintln!("wrote {n} arrivals to {out}");
    Ok(())
}
