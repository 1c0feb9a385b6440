//! Max-min fair rate allocation by progressive filling.

/// Rates for `flows`, each given as the list of resources it crosses.
///
/// All unfrozen flows grow at the same pace; when a resource saturates, every
/// flow crossing it is frozen. A flow that crosses no resource is unbounded.
pub fn max_min_rates(capacities: &[f64], flows: &[Vec<usize>]) -> Vec<f64> {
    let mut rate = vec![0.0; flows.len()];
    let mut frozen: Vec<bool> = flows.iter().map(|f| f.is_empty()).collect();
    for (f, r) in flows.iter().zip(rate.iter_mut()) {
        if f.is_empty() {
            *r = f64::INFINITY;
        }
    }
    let mut left = capacities.to_vec();
    let mut count = vec![0usize; capacities.len()];
    loop {
        count.iter_mut().for_each(|c| *c = 0);
        for (f, res) in flows.iter().enumerate() {
            if !frozen[f] {
                for &r in res {
                    count[r] += 1;
                }
            }
        }
        let Some(inc) = count
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(r, &c)| left[r].max(0.0) / c as f64)
            .min_by(f64::total_cmp)
        else {
            break;
        };
        for (f, res) in flows.iter().enumerate() {
            if !frozen[f] {
                rate[f] += inc;
                for &r in res {
                    left[r] -= inc;
                }
            }
        }
        let saturated: Vec<bool> = count
            .iter()
            .enumerate()
            .map(|(r, &c)| c > 0 && left[r] <= capacities[r] * 1e-12)
            .collect();
        let mut progress = false;
        for (f, res) in flows.iter().enumerate() {
            if !frozen[f] && res.iter().any(|&r| saturated[r]) {
                frozen[f] = true;
                progress = true;
            }
        }
        if !progress {
            // Rounding left every share marginally positive; freeze at the bottleneck.
            let worst = count
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c > 0)
                .min_by(|a, b| (left[a.0] / *a.1 as f64).total_cmp(&(left[b.0] / *b.1 as f64)))
                .map(|(r, _)| r)
                .expect("some resource is in use");
            for (f, res) in flows.iter().enumerate() {
                if res.contains(&worst) {
                    frozen[f] = true;
                }
            }
        }
    }
    rate
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: f64 = 1e9;

    #[test]
    fn single_flow_gets_the_link() {
        assert_eq!(max_min_rates(&[G], &[vec![0]]), vec![G]);
    }

    #[test]
    fn two_flows_split_evenly() {
        assert_eq!(max_min_rates(&[G], &[vec![0], vec![0]]), vec![0.5 * G, 0.5 * G]);
    }

    #[test]
    fn three_flow_chain() {
        let r = max_min_rates(&[G, G], &[vec![0], vec![0, 1], vec![1]]);
        assert_eq!(r, vec![0.5 * G, 0.5 * G, 0.5 * G]);
    }

    #[test]
    fn bottleneck_frees_capacity_elsewhere() {
        // B is held to 0.25 by link 1 (shared four ways); A takes the rest of link 0.
        let flows = vec![vec![0], vec![0, 1], vec![1], vec![1], vec![1]];
        let r = max_min_rates(&[G, G], &flows);
        assert!((r[0] - 0.75 * G).abs() < 1.0);
        for &x in &r[1..] {
            assert!((x - 0.25 * G).abs() < 1.0);
        }
    }

    #[test]
    fn empty_route_is_unbounded() {
        assert_eq!(max_min_rates(&[G], &[vec![]]), vec![f64::INFINITY]);
    }
}
