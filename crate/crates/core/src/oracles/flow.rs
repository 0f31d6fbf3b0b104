//! Small exact flow solvers used by the transport oracles.
//!
//! Instances are tiny (a few hundred nodes, integer capacities), so the
//! solvers favor clarity over asymptotics: Dinic for max-flow feasibility
//! and successive shortest paths with Dijkstra potentials for min-cost flow.

use alloc::vec;
use alloc::vec::Vec;

const UNSET: usize = usize::MAX;

#[derive(Clone)]
struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
    rev: usize,
}

/// Directed graph with residual edges; shared by both solvers.
pub struct FlowGraph {
    adj: Vec<Vec<Edge>>,
}

impl FlowGraph {
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n],
        }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) {
        let rev_from = self.adj[to].len();
        let rev_to = self.adj[from].len();
        self.adj[from].push(Edge {
            to,
            cap,
            cost,
            rev: rev_from,
        });
        self.adj[to].push(Edge {
            to: from,
            cap: 0,
            cost: -cost,
            rev: rev_to,
        });
    }

    /// Dinic max-flow from `src` to `sink`. Consumes residual capacity.
    pub fn max_flow(&mut self, src: usize, sink: usize) -> i64 {
        let n = self.adj.len();
        let mut total = 0;
        loop {
            // BFS level graph
            let mut level = vec![UNSET; n];
            level[src] = 0;
            let mut queue = vec![src];
            let mut head = 0;
            while head < queue.len() {
                let u = queue[head];
                head += 1;
                for e in &self.adj[u] {
                    if e.cap > 0 && level[e.to] == UNSET {
                        level[e.to] = level[u] + 1;
                        queue.push(e.to);
                    }
                }
            }
            if level[sink] == UNSET {
                break;
            }
            let mut iter = vec![0usize; n];
            loop {
                let pushed = self.dfs(src, sink, i64::MAX, &level, &mut iter);
                if pushed == 0 {
                    break;
                }
                total += pushed;
            }
        }
        total
    }

    fn dfs(&mut self, u: usize, sink: usize, limit: i64, level: &[usize], iter: &mut [usize]) -> i64 {
        if u == sink {
            return limit;
        }
        while iter[u] < self.adj[u].len() {
            let (to, cap, rev) = {
                let e = &self.adj[u][iter[u]];
                (e.to, e.cap, e.rev)
            };
            if cap > 0 && level[to] == level[u] + 1 {
                let pushed = self.dfs(to, sink, limit.min(cap), level, iter);
                if pushed > 0 {
                    self.adj[u][iter[u]].cap -= pushed;
                    self.adj[to][rev].cap += pushed;
                    return pushed;
                }
            }
            iter[u] += 1;
        }
        0
    }

    /// Successive-shortest-path min-cost flow; pushes exactly `target` units
    /// from `src` to `sink` and returns the total cost. Edge costs must be
    /// non-negative. Panics if the target flow is infeasible.
    pub fn min_cost_flow(&mut self, src: usize, sink: usize, target: i64) -> f64 {
        let n = self.adj.len();
        let mut potential = vec![0.0f64; n];
        let mut remaining = target;
        let mut total_cost = 0.0;

        while remaining > 0 {
            // Dijkstra on reduced costs; instances are tiny, so a linear
            // scan for the minimum is fine.
            let mut dist = vec![f64::INFINITY; n];
            let mut done = vec![false; n];
            let mut prev: Vec<(usize, usize)> = vec![(UNSET, UNSET); n];
            dist[src] = 0.0;
            loop {
                let mut u = UNSET;
                let mut best = f64::INFINITY;
                for i in 0..n {
                    if !done[i] && dist[i] < best {
                        best = dist[i];
                        u = i;
                    }
                }
                if u == UNSET {
                    break;
                }
                done[u] = true;
                for (idx, e) in self.adj[u].iter().enumerate() {
                    if e.cap <= 0 || done[e.to] {
                        continue;
                    }
                    // reduced cost; clamp tiny negative float residue
                    let rc = (e.cost + potential[u] - potential[e.to]).max(0.0);
                    let nd = dist[u] + rc;
                    if nd < dist[e.to] {
                        dist[e.to] = nd;
                        prev[e.to] = (u, idx);
                    }
                }
            }
            assert!(
                dist[sink].is_finite(),
                "min-cost flow infeasible: {remaining} units undeliverable"
            );
            for i in 0..n {
                if dist[i].is_finite() {
                    potential[i] += dist[i];
                }
            }
            // bottleneck along the shortest path
            let mut bottleneck = remaining;
            let mut v = sink;
            while v != src {
                let (u, idx) = prev[v];
                bottleneck = bottleneck.min(self.adj[u][idx].cap);
                v = u;
            }
            let mut v = sink;
            while v != src {
                let (u, idx) = prev[v];
                let rev = self.adj[u][idx].rev;
                self.adj[u][idx].cap -= bottleneck;
                self.adj[v][rev].cap += bottleneck;
                total_cost += bottleneck as f64 * self.adj[u][idx].cost;
                v = u;
            }
            remaining -= bottleneck;
        }
        total_cost
    }
}
