#![allow(dead_code)]

use localegn::graph::{DirectedGraph, Edge};
use localegn::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// `edges` distinct non-loop edges with distances drawn from {0.5, 1.0, ..., 3.0},
/// so path sums are exact in binary floating point.
pub fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, edges: usize) -> DirectedGraph {
    assert!(edges <= nodes * (nodes - 1));
    let mut picked = Vec::new();
    while picked.len() < edges {
        let e = Edge {
            tail: rng.random_range(0..nodes),
            head: rng.random_range(0..nodes),
        };
        if e.tail != e.head && !picked.contains(&e) {
            picked.push(e);
        }
    }
    let dist = (0..edges).map(|_| 0.5 * rng.random_range(1..=6) as f64).collect();
    DirectedGraph::from_distances(nodes, picked, dist).unwrap()
}

/// Central differences of `f` around `x`, compared to `analytic` entry by
/// entry. Entries with `|analytic| <= 1e-8` are skipped.
pub fn check_gradient(
    what: &str,
    x: &Tensor2,
    analytic: &Tensor2,
    h: f64,
    rel_tol: f64,
    mut f: impl FnMut(&Tensor2) -> f64,
) -> usize {
    assert_eq!(x.shape(), analytic.shape(), "{what}: gradient shape");
    let mut checked = 0;
    for k in 0..x.len() {
        let g = analytic.data()[k];
        if g.abs() <= 1e-8 {
            continue;
        }
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        assert!(rel < rel_tol, "{what}[{k}]: analytic {g}, numeric {fd}, relative error {rel}");
        checked += 1;
    }
    checked
}
