//! Seeded diffusion data on random directed graphs.
//!
//! Each step every node moves towards the mean of its in-neighbours:
//!
//! ```text
//! x_i(τ+1) = x_i(τ) + α · mean_{j→i}(x_j(τ) − x_i(τ)) + A·cos(2πτ/P) + σ·ε
//! ```
//!
//! The forcing term is shared by all nodes, so the whole network follows a
//! daily swing of `±A·P/2π` around the base level. The next state of a node
//! depends only on itself and its in-neighbours.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, Edge, EdgeSpeeds};
use crate::seed;
use crate::series::SignalSeries;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub nodes: usize,
    /// Probability of each ordered pair being an edge, before the cycle that
    /// makes the graph strongly connected is added.
    pub edge_prob: f64,
    /// Diffusion coefficient, `0 <= α < 0.5`.
    pub alpha: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    pub steps: usize,
    pub seed: u64,
    /// Initial level of every node.
    pub base: f64,
    /// Per-step forcing amplitude.
    pub amplitude: f64,
    /// Forcing period in steps.
    pub period: f64,
    pub interval_minutes: f64,
    pub freeflow_kmh: f64,
    pub shockwave_kmh: f64,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self {
            nodes: 20,
            edge_prob: 0.1,
            alpha: 0.3,
            sigma: 0.025,
            steps: 2016,
            seed: 0,
            base: 60.0,
            amplitude: 0.5,
            period: 288.0,
            interval_minutes: 5.0,
            freeflow_kmh: 90.0,
            shockwave_kmh: 20.0,
        }
    }
}

impl DiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nodes == 0 || self.steps == 0 {
            return bad("nodes and steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge probability {} is not in [0, 1]", self.edge_prob));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return bad(format!("alpha {} is outside the stable range [0, 0.5)", self.alpha));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("noise std {} must be non-negative", self.sigma));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return bad(format!("period {} must be positive", self.period));
        }
        if !(self.base.is_finite() && self.amplitude.is_finite()) {
            return bad("base and amplitude must be finite".into());
        }
        for (name, v) in [
            ("interval", self.interval_minutes),
            ("free-flow speed", self.freeflow_kmh),
            ("shockwave speed", self.shockwave_kmh),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Forcing added at step `τ -> τ+1`.
    pub fn forcing(&self, tau: usize) -> f64 {
        self.amplitude * (2.0 * PI * tau as f64 / self.period).cos()
    }
}

/// Random graph: each ordered pair `i != j` independently with
/// `edge_prob`, plus a directed cycle through a random node order. Edges
/// are sorted by `(tail, head)`; lengths are uniform in `[0.5, 5)` km.
pub fn random_graph(spec: &DiffusionSpec) -> Result<DirectedGraph> {
    spec.validate()?;
    let n = spec.nodes;
    let mut rng = seed::rng(spec.seed, seed::stream::GRAPH);
    let mut adj = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(spec.edge_prob) {
                adj[i * n + j] = true;
            }
        }
    }
    if n > 1 {
        let order = rand::seq::index::sample(&mut rng, n, n).into_vec();
        for k in 0..n {
            adj[order[k] * n + order[(k + 1) % n]] = true;
        }
    }
    let edges: Vec<Edge> = (0..n * n)
        .filter(|&c| adj[c])
        .map(|c| Edge { tail: c / n, head: c % n })
        .collect();
    let dist = (0..edges.len()).map(|_| rng.random_range(0.5..5.0)).collect();
    let m = edges.len();
    DirectedGraph::from_distances(n, edges, dist)?.with_speeds(EdgeSpeeds {
        freeflow_kmh: vec![spec.freeflow_kmh; m],
        shockwave_kmh: vec![spec.shockwave_kmh; m],
    })
}

/// In-neighbour lists in ascending edge order.
fn in_neighbours(graph: &DirectedGraph) -> Vec<Vec<usize>> {
    let mut inn = vec![Vec::new(); graph.num_nodes()];
    for e in graph.edges() {
        inn[e.head].push(e.tail);
    }
    inn
}

fn step(inn: &[Vec<usize>], state: &[f64], alpha: f64, forcing: f64, out: &mut [f64]) {
    for (i, nb) in inn.iter().enumerate() {
        let x = state[i];
        let exchange = if nb.is_empty() {
            0.0
        } else {
            nb.iter().map(|&j| state[j] - x).sum::<f64>() / nb.len() as f64
        };
        out[i] = x + alpha * exchange + forcing;
    }
}

/// Exact noise-free successor of `state` at step `tau`.
pub fn oracle_next(graph: &DirectedGraph, state: &[f64], spec: &DiffusionSpec, tau: usize) -> Result<Vec<f64>> {
    if state.len() != graph.num_nodes() {
        return Err(Error::Contract(format!(
            "state has {} entries for {} nodes",
            state.len(),
            graph.num_nodes()
        )));
    }
    let mut out = vec![0.0; state.len()];
    step(&in_neighbours(graph), state, spec.alpha, spec.forcing(tau), &mut out);
    Ok(out)
}

/// Simulates `spec.steps` rows on `graph`, starting from `initial`.
pub fn simulate(graph: &DirectedGraph, spec: &DiffusionSpec, initial: &[f64]) -> Result<SignalSeries> {
    spec.validate()?;
    if initial.len() != graph.num_nodes() {
        return Err(Error::Contract("initial state length differs from node count".into()));
    }
    let n = graph.num_nodes();
    let inn = in_neighbours(graph);
    let mut rng = seed::rng(spec.seed, seed::stream::NOISE);
    let mut data = Vec::with_capacity(spec.steps * n);
    data.extend_from_slice(initial);
    let mut next = vec![0.0; n];
    for tau in 1..spec.steps {
        let cur = &data[(tau - 1) * n..tau * n];
        step(&inn, cur, spec.alpha, spec.forcing(tau - 1), &mut next);
        if spec.sigma > 0.0 {
            for x in next.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += spec.sigma * e;
            }
        }
        data.extend_from_slice(&next);
    }
    SignalSeries::new(Tensor2::from_vec(spec.steps, n, data)?, spec.interval_minutes)
}

/// Random graph plus a series started from the base level everywhere.
pub fn generate(spec: &DiffusionSpec) -> Result<(DirectedGraph, SignalSeries)> {
    let graph = random_graph(spec)?;
    let series = simulate(&graph, spec, &vec![spec.base; spec.nodes])?;
    Ok((graph, series))
}
