//! Hop and distance tables, the layer-count recommendation, and locale
//! extraction.
//!
//! A state change at node `i` travels downstream at the free-flow speed and
//! upstream at the shockwave speed. Over a horizon of `L` steps it can reach
//! every node within the corresponding radius; the number of GN layers
//! needed is the largest hop count among those reachable nodes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, Edge};

/// All-pairs shortest paths. Paths are ordered by total weight first and
/// hop count second, so `hop(i, j)` is the edge count of the fewest-hop path
/// among the minimum-weight ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HopTable {
    n: usize,
    hops: Vec<Option<usize>>,
    dist: Vec<f64>,
}

impl HopTable {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// `None` when `j` is unreachable from `i`.
    pub fn hop(&self, i: usize, j: usize) -> Option<usize> {
        self.hops[i * self.n + j]
    }

    /// `f64::INFINITY` when `j` is unreachable from `i`.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    hops: usize,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.hops.cmp(&self.hops))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from every source under the lexicographic `(weight, hops)` order.
pub fn shortest_paths(num_nodes: usize, edges: &[Edge], weights: &[f64]) -> Result<HopTable> {
    if weights.len() != edges.len() {
        return Err(Error::Contract("one weight per edge is required".into()));
    }
    if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Data(format!("edge {k} has invalid weight {}", weights[k])));
    }
    let mut out_adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_nodes];
    for (e, &w) in edges.iter().zip(weights) {
        out_adj[e.tail].push((e.head, w));
    }
    let n = num_nodes;
    let mut hops = vec![None; n * n];
    let mut dist = vec![f64::INFINITY; n * n];
    for s in 0..n {
        let row = s * n;
        let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        best[s] = (0.0, 0);
        heap.push(Entry { dist: 0.0, hops: 0, node: s });
        while let Some(Entry { dist: d, hops: h, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            dist[row + u] = d;
            hops[row + u] = Some(h);
            for &(v, w) in &out_adj[u] {
                let cand = (d + w, h + 1);
                let cur = best[v];
                if cand.0 < cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                    best[v] = cand;
                    heap.push(Entry { dist: cand.0, hops: cand.1, node: v });
                }
            }
        }
    }
    Ok(HopTable { n, hops, dist })
}

/// Hop and distance table over edge lengths in km.
pub fn hop_and_distance(graph: &DirectedGraph) -> Result<HopTable> {
    let d = graph
        .distance_km()
        .ok_or_else(|| Error::Data("graph has no edge distances".into()))?;
    shortest_paths(graph.num_nodes(), graph.edges(), d)
}

/// Propagation speeds used for the layer-count recommendation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speeds {
    /// One free-flow and one shockwave speed for the whole graph, km/h.
    Global { freeflow_kmh: f64, shockwave_kmh: f64 },
    /// Per-edge speeds stored in the graph.
    PerEdge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KReport {
    /// Recommended number of GN layers, at least 1.
    pub k: usize,
    /// Per node, the largest hop count to a node reachable downstream.
    pub forward_max_hop: Vec<usize>,
    /// Per node, the largest hop count from a node that reaches it upstream.
    pub backward_max_hop: Vec<usize>,
}

impl KReport {
    /// CSV with header `node,forward_max_hop,backward_max_hop`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node", "forward_max_hop", "backward_max_hop"])?;
        for (i, (f, b)) in self.forward_max_hop.iter().zip(&self.backward_max_hop).enumerate() {
            w.write_record([i.to_string(), f.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest hop over pairs whose shortest weight is within `budget`, per row
/// (`by_source`) or per column.
fn max_hops_within(table: &HopTable, budget: f64, by_source: bool) -> Vec<usize> {
    let n = table.num_nodes();
    (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    let (a, b) = if by_source { (i, j) } else { (j, i) };
                    table.hop(a, b).filter(|_| table.dist(a, b) <= budget)
                })
                .max()
                .unwrap_or(0)
        })
        .collect()
}

/// Recommended GN layer count for a horizon of `steps` intervals of
/// `interval_minutes` each.
///
/// With global speeds the forward radius is `steps * interval * f` and the
/// backward radius `steps * interval * w` (km, interval in hours), compared
/// against shortest distances. With per-edge speeds each edge costs its
/// traversal time instead and the budget is the horizon duration.
pub fn recommend_k(graph: &DirectedGraph, steps: usize, interval_minutes: f64, speeds: Speeds) -> Result<KReport> {
    if steps == 0 {
        return Err(Error::Config("horizon must be at least one step".into()));
    }
    if !(interval_minutes > 0.0 && interval_minutes.is_finite()) {
        return Err(Error::Config(format!("interval {interval_minutes} minutes is not positive")));
    }
    let d = graph
        .distance_km()
        .ok_or_else(|| Error::Data("graph has no edge distances".into()))?;
    let horizon_minutes = steps as f64 * interval_minutes;
    let (fwd, bwd) = match speeds {
        Speeds::Global {
            freeflow_kmh,
            shockwave_kmh,
        } => {
            check_speed("free-flow", freeflow_kmh)?;
            check_speed("shockwave", shockwave_kmh)?;
            let table = hop_and_distance(graph)?;
            (
                max_hops_within(&table, horizon_minutes * freeflow_kmh / 60.0, true),
                max_hops_within(&table, horizon_minutes * shockwave_kmh / 60.0, false),
            )
        }
        Speeds::PerEdge => {
            let s = graph.speeds().ok_or_else(|| {
                Error::Data("graph has no speed columns; supply free-flow and shockwave speeds".into())
            })?;
            for (&f, &w) in s.freeflow_kmh.iter().zip(&s.shockwave_kmh) {
                check_speed("free-flow", f)?;
                check_speed("shockwave", w)?;
            }
            let minutes = |speed: &[f64]| -> Vec<f64> {
                d.iter().zip(speed).map(|(km, kmh)| 60.0 * km / kmh).collect()
            };
            let n = graph.num_nodes();
            let tf = shortest_paths(n, graph.edges(), &minutes(&s.freeflow_kmh))?;
            let tw = shortest_paths(n, graph.edges(), &minutes(&s.shockwave_kmh))?;
            (
                max_hops_within(&tf, horizon_minutes, true),
                max_hops_within(&tw, horizon_minutes, false),
            )
        }
    };
    let k = fwd.iter().chain(&bwd).copied().max().unwrap_or(0).max(1);
    Ok(KReport {
        k,
        forward_max_hop: fwd,
        backward_max_hop: bwd,
    })
}

fn check_speed(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} speed must be positive, got {v}")))
    }
}

/// A node's K-hop neighbourhood as a standalone graph.
#[derive(Debug, Clone)]
pub struct Locale {
    pub graph: DirectedGraph,
    /// Local node `j` is global node `nodes[j]`; ascending.
    pub nodes: Vec<usize>,
    /// Local id of the centre node.
    pub center: usize,
    /// Global ids of the kept edges, in local edge order.
    pub edges: Vec<usize>,
}

/// Nodes within `k` hops of `node` following edges in either direction.
pub fn k_hop_nodes(graph: &DirectedGraph, node: usize, k: usize) -> Vec<usize> {
    let n = graph.num_nodes();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in graph.edges() {
        adj[e.tail].push(e.head);
        adj[e.head].push(e.tail);
    }
    let mut depth = vec![usize::MAX; n];
    depth[node] = 0;
    let mut queue = VecDeque::from([node]);
    while let Some(u) = queue.pop_front() {
        if depth[u] == k {
            continue;
        }
        for &v in &adj[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..n).filter(|&v| depth[v] != usize::MAX).collect()
}

/// Induced subgraph on the `k`-hop neighbourhood of `node`. A model with at
/// most `k` GN layers predicts the same value for `node` on the locale as on
/// the full graph.
pub fn extract_locale(graph: &DirectedGraph, node: usize, k: usize) -> Result<Locale> {
    if node >= graph.num_nodes() {
        return Err(Error::Contract(format!("node {node} is out of range")));
    }
    if k == 0 {
        return Err(Error::Config("locale radius must be at least 1".into()));
    }
    let nodes = k_hop_nodes(graph, node, k);
    let (sub, edges) = graph.induced(&nodes)?;
    let center = nodes.binary_search(&node).expect("centre is in its own neighbourhood");
    Ok(Locale {
        graph: sub,
        nodes,
        center,
        edges,
    })
}
