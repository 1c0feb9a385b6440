//! Statistical checks on the arrival generators.

use dcsim::engine::{RngStream, SimTime, StreamId};
use dcsim::workload::{load_trace, poisson_interarrival, ArrivalProcess, MmppState, TraceUnit};

/// KS critical value at alpha = 0.01, scaled by sqrt(n).
const KS_C_001: f64 = 1.628;

fn ks_exponential(mut xs: Vec<f64>, lambda: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-lambda * x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn poisson_mean_within_one_percent() {
    let lambda = 250.0;
    let mut rng = RngStream::new(11, StreamId::Arrivals);
    let n = 1_000_000;
    let mean = (0..n).map(|_| poisson_interarrival(&mut rng, lambda)).sum::<f64>() / n as f64;
    assert!((mean * lambda - 1.0).abs() < 0.01, "mean gap {mean}");
}

#[test]
fn mmpp_with_equal_rates_is_poisson() {
    let lambda = 40.0;
    let mut state = MmppState::new(lambda, lambda, 3.0, 1.5).unwrap();
    let mut rng = RngStream::new(3, StreamId::Arrivals);
    let n = 100_000;
    let gaps: Vec<f64> = (0..n).map(|_| state.advance(&mut rng)).collect();
    let d = ks_exponential(gaps, lambda);
    assert!(d * (n as f64).sqrt() < KS_C_001, "KS statistic {d}");
}

#[test]
fn bursty_mmpp_fails_the_same_test() {
    // Sanity check on the test's power: a 10:1 MMPP is clearly not Poisson.
    let mut state = MmppState::new(100.0, 10.0, 1.0, 1.0).unwrap();
    let lambda = state.mean_rate();
    let mut rng = RngStream::new(3, StreamId::Arrivals);
    let n = 100_000;
    let gaps: Vec<f64> = (0..n).map(|_| state.advance(&mut rng)).collect();
    assert!(ks_exponential(gaps, lambda) * (n as f64).sqrt() > KS_C_001);
}

#[test]
fn trace_replay_is_exact() {
    let text = "0\n1000\n2500\n2500\n90000\n";
    let trace = load_trace(text.as_bytes(), TraceUnit::Us).unwrap();
    let mut p = ArrivalProcess::trace(trace);
    let mut rng = RngStream::new(1, StreamId::Arrivals);
    let got: Vec<SimTime> = std::iter::from_fn(|| p.next_arrival(&mut rng)).collect();
    assert_eq!(got, [0, 1000, 2500, 2500, 90000].map(SimTime));
}
