//! Exact discrete optimal transport with squared Euclidean cost.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;

/// Largest `lcm(N, M) · (N + M)` the integer-mass transport path accepts.
pub const MAX_SCALED_MASS: u64 = 1_000_000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns `assignment[row] = col` and the cost.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i][assignment[i]]).sum();
    (assignment, total)
}

struct Edge {
    to: usize,
    cap: u64,
    cost: f64,
}

/// Successive shortest paths on the bipartite transport network.
/// Returns the minimum total cost of moving `supply` to `demand`.
fn transport(cost: &[Vec<f64>], supply: u64, demand: u64) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    let (src, sink) = (n + m, n + m + 1);
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m + 2];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: u64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost: c });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0, cost: -c });
    };
    for i in 0..n {
        add(&mut edges, &mut adj, src, i, supply, 0.0);
    }
    for j in 0..m {
        add(&mut edges, &mut adj, n + j, sink, demand, 0.0);
    }
    for (i, row) in cost.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            add(&mut edges, &mut adj, i, n + j, u64::MAX, c);
        }
    }
    let total = supply * n as u64;
    let mut sent = 0;
    let mut value = 0.0;
    let nodes = n + m + 2;
    while sent < total {
        // Bellman-Ford (queue based); residual costs can be negative
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut in_queue = vec![false; nodes];
        let mut queue = VecDeque::from([src]);
        dist[src] = 0.0;
        while let Some(a) = queue.pop_front() {
            in_queue[a] = false;
            for &e in &adj[a] {
                let edge = &edges[e];
                if edge.cap == 0 {
                    continue;
                }
                let nd = dist[a] + edge.cost;
                if nd < dist[edge.to] - 1e-15 * (1.0 + nd.abs()) {
                    dist[edge.to] = nd;
                    prev[edge.to] = e;
                    if !in_queue[edge.to] {
                        in_queue[edge.to] = true;
                        queue.push_back(edge.to);
                    }
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut push = total - sent;
        let mut v = sink;
        while v != src {
            let e = prev[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != src {
            let e = prev[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            value += push as f64 * edges[e].cost;
            v = edges[e ^ 1].to;
        }
        sent += push;
    }
    value
}

/// Exact 2-Wasserstein distance between the active particles of two measures.
///
/// Equal counts use an optimal assignment. Unequal counts scale the uniform
/// masses to integers by `lcm(N, M)` and solve the transport problem as a
/// min-cost flow.
pub fn w2_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    let (n, m) = (mu.n_active(), nu.n_active());
    if n == 0 || m == 0 {
        return Err(Error::AllMasked);
    }
    let cost: Vec<Vec<f64>> = mu
        .active_rows()
        .map(|x| nu.active_rows().map(|y| sq_dist(x, y)).collect())
        .collect();
    if n == m {
        let (_, c) = min_cost_assignment(&cost);
        return Ok((c / n as f64).max(0.0).sqrt());
    }
    w2_by_flow(&cost, n, m)
}

/// The min-cost-flow path, usable for any counts.
pub fn w2_distance_flow(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    let (n, m) = (mu.n_active(), nu.n_active());
    if n == 0 || m == 0 {
        return Err(Error::AllMasked);
    }
    let cost: Vec<Vec<f64>> = mu
        .active_rows()
        .map(|x| nu.active_rows().map(|y| sq_dist(x, y)).collect())
        .collect();
    w2_by_flow(&cost, n, m)
}

fn w2_by_flow(cost: &[Vec<f64>], n: usize, m: usize) -> Result<f64> {
    let (n64, m64) = (n as u64, m as u64);
    let lcm = n64 / gcd(n64, m64) * m64;
    if lcm.saturating_mul(n64 + m64) > MAX_SCALED_MASS {
        return Err(Error::UnsupportedScale { n, m });
    }
    let c = transport(cost, lcm / n64, lcm / m64);
    Ok((c / lcm as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::rng_from_seed;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> DiscreteMeasure {
        let mut rng = rng_from_seed(seed);
        DiscreteMeasure::new(Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn brute(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        fn perms(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    perms(k, cur, used, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let n = mu.n_active();
        let mut all = Vec::new();
        perms(n, &mut Vec::new(), &mut vec![false; n], &mut all);
        let best = all
            .iter()
            .map(|p| (0..n).map(|i| sq_dist(mu.points().row(i), nu.points().row(p[i]))).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        (best / n as f64).sqrt()
    }

    #[test]
    fn trivial_values() {
        let a = cloud(6, 1);
        assert_eq!(w2_distance(&a, &a.permuted(&[5, 3, 1, 0, 2, 4])).unwrap(), 0.0);
        let d0 = DiscreteMeasure::from_rows(&[vec![0.0]]).unwrap();
        let d1 = DiscreteMeasure::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(w2_distance(&d0, &d1).unwrap(), 1.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        for seed in 0..10 {
            let (a, b) = (cloud(5, seed), cloud(5, seed + 50));
            assert!((w2_distance(&a, &b).unwrap() - brute(&a, &b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn flow_agrees_with_assignment() {
        for seed in 0..10 {
            let (a, b) = (cloud(7, seed), cloud(7, seed + 9));
            let x = w2_distance(&a, &b).unwrap();
            let y = w2_distance_flow(&a, &b).unwrap();
            assert!((x - y).abs() <= 1e-12, "{x} {y}");
        }
    }

    #[test]
    fn unequal_counts_split_mass() {
        // δ₀ against {−1, 1}: every unit of mass travels distance 1
        let a = DiscreteMeasure::from_rows(&[vec![0.0]]).unwrap();
        let b = DiscreteMeasure::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        assert!((w2_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        // duplicating every particle leaves the measure unchanged
        let c = cloud(3, 4);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| c.points().row(i % 3).to_vec()).collect();
        let dup = DiscreteMeasure::from_rows(&rows).unwrap();
        let other = cloud(4, 5);
        assert!((w2_distance(&c, &other).unwrap() - w2_distance(&dup, &other).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scale_guard() {
        let a = cloud(997, 1);
        let b = cloud(991, 2);
        assert!(matches!(w2_distance(&a, &b), Err(Error::UnsupportedScale { .. })));
    }
}
