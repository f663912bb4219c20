//! Discrete optimal transport between two weighted point sets.

use crate::error::{Error, Result};

/// Transport plan as sparse `(source, sink, mass)` triples plus its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    pub flows: Vec<(usize, usize, f64)>,
}

impl TransportPlan {
    /// Row and column sums of the plan.
    pub fn marginals(&self, m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; m];
        let mut cols = vec![0.0; n];
        for &(i, j, f) in &self.flows {
            rows[i] += f;
            cols[j] += f;
        }
        (rows, cols)
    }
}

fn check_problem(a: &[f64], b: &[f64], cost: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("transport problem with an empty side".into()));
    }
    if cost.len() != a.len() * b.len() {
        return Err(Error::dim("transport cost", &[a.len(), b.len()], &[cost.len()]));
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Contract("transport masses must be finite and nonnegative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Contract(format!("unbalanced transport problem: {sa} vs {sb}")));
    }
    Ok(())
}

const NONE: usize = usize::MAX;

/// Spanning-tree basis of the transportation problem. Nodes `0..m` are
/// sources, `m..m+n` sinks; every basic arc joins one of each.
struct Basis {
    m: usize,
    n: usize,
    arcs: Vec<(usize, usize)>,
    flow: Vec<f64>,
    // Scratch rebuilt on every pivot.
    adj_start: Vec<usize>,
    adj: Vec<usize>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    pot: Vec<f64>,
}

impl Basis {
    /// North-west corner start: exactly `m + n - 1` arcs forming a tree.
    fn north_west(a: &[f64], b: &[f64]) -> Basis {
        let (m, n) = (a.len(), b.len());
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let mut arcs = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        while arcs.len() < m + n - 1 {
            let x = ra[i].min(rb[j]).max(0.0);
            arcs.push((i, j));
            flow.push(x);
            ra[i] -= x;
            rb[j] -= x;
            if j == n - 1 || (i < m - 1 && ra[i] <= rb[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        let nodes = m + n;
        Basis {
            m,
            n,
            arcs,
            flow,
            adj_start: vec![0; nodes + 1],
            adj: vec![0; 2 * (nodes - 1)],
            parent: vec![NONE; nodes],
            parent_arc: vec![NONE; nodes],
            depth: vec![0; nodes],
            pot: vec![0.0; nodes],
        }
    }

    /// Rebuilds parent pointers, depths and dual potentials from node 0.
    fn rebuild(&mut self, cost: &[f64]) {
        let (m, n) = (self.m, self.n);
        let nodes = m + n;
        self.adj_start.iter_mut().for_each(|s| *s = 0);
        for &(i, j) in &self.arcs {
            self.adj_start[i + 1] += 1;
            self.adj_start[m + j + 1] += 1;
        }
        for k in 0..nodes {
            self.adj_start[k + 1] += self.adj_start[k];
        }
        let mut fill = self.adj_start.clone();
        for (k, &(i, j)) in self.arcs.iter().enumerate() {
            self.adj[fill[i]] = k;
            fill[i] += 1;
            self.adj[fill[m + j]] = k;
            fill[m + j] += 1;
        }
        self.parent.iter_mut().for_each(|p| *p = NONE);
        let mut stack = vec![0usize];
        self.parent[0] = 0;
        self.depth[0] = 0;
        self.pot[0] = 0.0;
        while let Some(u) = stack.pop() {
            for &k in &self.adj[self.adj_start[u]..self.adj_start[u + 1]] {
                let (i, j) = self.arcs[k];
                let v = if u < m { m + j } else { i };
                if self.parent[v] != NONE {
                    continue;
                }
                self.parent[v] = u;
                self.parent_arc[v] = k;
                self.depth[v] = self.depth[u] + 1;
                self.pot[v] = cost[i * n + j] - self.pot[u];
                stack.push(v);
            }
        }
    }

    fn reduced_cost(&self, cost: &[f64], i: usize, j: usize) -> f64 {
        cost[i * self.n + j] - self.pot[i] - self.pot[self.m + j]
    }

    /// Tree arcs of the cycle closed by entering arc `(i, j)`, in cycle
    /// order starting at sink `j` and ending at source `i`.
    fn cycle(&self, i: usize, j: usize) -> Vec<usize> {
        let mut a = i;
        let mut b = self.m + j;
        let mut from_a = Vec::new();
        let mut from_b = Vec::new();
        while self.depth[a] > self.depth[b] {
            from_a.push(self.parent_arc[a]);
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            from_b.push(self.parent_arc[b]);
            b = self.parent[b];
        }
        while a != b {
            from_a.push(self.parent_arc[a]);
            a = self.parent[a];
            from_b.push(self.parent_arc[b]);
            b = self.parent[b];
        }
        from_a.reverse();
        from_b.extend(from_a);
        from_b
    }
}

/// Exact minimum-cost transport by the primal transportation simplex.
///
/// `cost` is row-major `a.len() × b.len()`. Masses must balance to within
/// 1e-9 relative; the sink side is rescaled to the source total.
pub fn transport_simplex(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    check_problem(a, b, cost)?;
    let (m, n) = (a.len(), b.len());
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let b: Vec<f64> = if sb > 0.0 {
        b.iter().map(|&x| x * sa / sb).collect()
    } else {
        b.to_vec()
    };
    let mut basis = Basis::north_west(a, &b);
    let scale = cost.iter().fold(0.0f64, |s, &c| s.max(c.abs())).max(1.0);
    let tol = 1e-12 * scale;

    let total = m * n;
    let block = ((total as f64).sqrt() as usize).max(64).min(total);
    let mut cursor = 0usize;
    let max_pivots = 50 * total + 1000;
    let mut pivots = 0usize;
    loop {
        basis.rebuild(cost);
        // Block pricing: scan blocks cyclically, take the best arc of the
        // first block that contains an improving one.
        let mut best = (0.0, NONE);
        let mut scanned = 0;
        while scanned < total {
            let len = block.min(total - scanned);
            for _ in 0..len {
                let (i, j) = (cursor / n, cursor % n);
                let r = basis.reduced_cost(cost, i, j);
                if r < best.0 {
                    best = (r, cursor);
                }
                cursor += 1;
                if cursor == total {
                    cursor = 0;
                }
            }
            scanned += len;
            if best.1 != NONE && best.0 < -tol {
                break;
            }
        }
        if best.1 == NONE || best.0 >= -tol {
            break;
        }
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NonConvergence {
                iterations: pivots,
                residual: -best.0,
            });
        }
        let (ei, ej) = (best.1 / n, best.1 % n);
        let cyc = basis.cycle(ei, ej);
        // Odd positions (0, 2, ...) lose flow.
        let mut theta = f64::INFINITY;
        let mut leave = NONE;
        for (pos, &k) in cyc.iter().enumerate() {
            if pos % 2 == 0 && basis.flow[k] < theta {
                theta = basis.flow[k];
                leave = k;
            }
        }
        for (pos, &k) in cyc.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flow[k] -= theta;
            } else {
                basis.flow[k] += theta;
            }
        }
        basis.arcs[leave] = (ei, ej);
        basis.flow[leave] = theta;
    }

    let mut flows = Vec::new();
    let mut total_cost = 0.0;
    for (&(i, j), &f) in basis.arcs.iter().zip(&basis.flow) {
        let f = f.max(0.0);
        if f > 0.0 {
            total_cost += f * cost[i * n + j];
            flows.push((i, j, f));
        }
    }
    flows.sort_by_key(|&(i, j, _)| (i, j));
    Ok(TransportPlan {
        cost: total_cost,
        flows,
    })
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropy-regularized transport (log-domain Sinkhorn) with inverse
/// temperature `lambda`; larger values approach the exact cost.
///
/// Returns the transport cost of the regularized plan. Fails when the L1
/// marginal residual is still above `tol` after `max_iters` sweeps.
pub fn sinkhorn(
    a: &[f64],
    b: &[f64],
    cost: &[f64],
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    check_problem(a, b, cost)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("sinkhorn lambda must be positive, got {lambda}")));
    }
    let (m, n) = (a.len(), b.len());
    let eps = 1.0 / lambda;
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        for i in 0..m {
            let row = &cost[i * n..(i + 1) * n];
            f[i] = eps * la[i] - eps * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..n {
            g[j] = eps * lb[j] - eps * log_sum_exp((0..m).map(|i| (f[i] - cost[i * n + j]) / eps));
        }
        // Columns are exact after the g update; measure the row marginals.
        residual = (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| ((f[i] + g[j] - cost[i * n + j]) / eps).exp())
                    .sum();
                (s - a[i]).abs()
            })
            .sum();
        if residual <= tol {
            let mut flows = Vec::new();
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..n {
                    let p = ((f[i] + g[j] - cost[i * n + j]) / eps).exp();
                    if p > 0.0 {
                        total += p * cost[i * n + j];
                        flows.push((i, j, p));
                    }
                }
            }
            return Ok(TransportPlan { cost: total, flows });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_mass_one_step() {
        let plan = transport_simplex(&[1.0], &[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((plan.cost - 0.5).abs() < 1e-15);
        assert_eq!(plan.flows, vec![(0, 0, 0.5), (0, 1, 0.5)]);
    }

    #[test]
    fn needs_pivots() {
        // North-west corner ships 0→0 and 1→1 at cost 10 each; optimal
        // crosses over at cost 1 each.
        let cost = [10.0, 1.0, 1.0, 10.0];
        let plan = transport_simplex(&[1.0, 1.0], &[1.0, 1.0], &cost).unwrap();
        assert!((plan.cost - 2.0).abs() < 1e-12);
        let (r, c) = plan.marginals(2, 2);
        assert_eq!(r, vec![1.0, 1.0]);
        assert_eq!(c, vec![1.0, 1.0]);
    }

    #[test]
    fn unbalanced_rejected() {
        assert!(transport_simplex(&[1.0], &[0.5], &[0.0]).is_err());
        assert!(transport_simplex(&[1.0], &[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sinkhorn_approaches_exact() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let cost = [0.0, 2.0, 1.0, 1.0, 2.0, 0.0];
        let exact = transport_simplex(&a, &b, &cost).unwrap().cost;
        let approx = sinkhorn(&a, &b, &cost, 200.0, 10_000, 1e-10).unwrap().cost;
        assert!((approx - exact).abs() < 0.01 * exact, "{approx} vs {exact}");
    }

    #[test]
    fn sinkhorn_reports_residual() {
        let a = [0.2, 0.8];
        let b = [0.7, 0.3];
        let cost = [0.0, 1.0, 1.0, 0.0];
        match sinkhorn(&a, &b, &cost, 2.0, 1, 1e-12) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
