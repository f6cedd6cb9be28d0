mod common;

use common::{random_graph, random_tensor, rng};
use localegn::graph::DirectedGraph;
use localegn::locale::{extract_locale, hop_and_distance, recommend_k, Speeds};
use localegn::model::{Model, ModelConfig, ModelVariant};
use localegn::Tensor2;
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Minimum (distance, hops) from `src` to every node, by enumerating every
/// simple path.
fn brute_force(graph: &DirectedGraph, src: usize) -> Vec<Option<(f64, usize)>> {
    let d = graph.distance_km().unwrap();
    let n = graph.num_nodes();
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    let mut on_path = vec![false; n];
    fn walk(
        g: &DirectedGraph,
        d: &[f64],
        u: usize,
        dist: f64,
        hops: usize,
        on_path: &mut [bool],
        best: &mut [Option<(f64, usize)>],
    ) {
        let better = match best[u] {
            None => true,
            Some((bd, bh)) => dist < bd || (dist == bd && hops < bh),
        };
        if better {
            best[u] = Some((dist, hops));
        }
        on_path[u] = true;
        for k in g.outgoing(u) {
            let v = g.edges()[k].head;
            if !on_path[v] {
                walk(g, d, v, dist + d[k], hops + 1, on_path, best);
            }
        }
        on_path[u] = false;
    }
    walk(graph, d, src, 0.0, 0, &mut on_path, &mut best);
    best
}

#[test]
fn hop_table_matches_path_enumeration() {
    let mut r = rng(11);
    for trial in 0..10 {
        let n = 4 + trial % 5;
        let g = random_graph(&mut r, n, (2 * n).min(n * (n - 1)));
        let table = hop_and_distance(&g).unwrap();
        for i in 0..n {
            let oracle = brute_force(&g, i);
            for j in 0..n {
                match oracle[j] {
                    None => {
                        assert_eq!(table.hop(i, j), None);
                        assert!(table.dist(i, j).is_infinite());
                    }
                    Some((dist, hops)) => {
                        assert_eq!(table.dist(i, j), dist, "trial {trial} {i}->{j}");
                        assert_eq!(table.hop(i, j), Some(hops), "trial {trial} {i}->{j}");
                    }
                }
            }
        }
    }
}

#[test]
fn recommended_k_matches_path_enumeration() {
    let mut r = rng(12);
    // 5-minute steps at 36 km/h cover exactly 3 km per step
    let speeds = Speeds::Global {
        freeflow_kmh: 36.0,
        shockwave_kmh: 18.0,
    };
    for trial in 0..10 {
        let n = 5 + trial % 4;
        let g = random_graph(&mut r, n, (2 * n).min(n * (n - 1)));
        let paths: Vec<_> = (0..n).map(|i| brute_force(&g, i)).collect();
        for steps in 1..=3 {
            let report = recommend_k(&g, steps, 5.0, speeds).unwrap();
            let (fr, br) = (3.0 * steps as f64, 1.5 * steps as f64);
            let within = |i: usize, j: usize, radius: f64| match paths[i][j] {
                Some((d, h)) if d <= radius => h,
                _ => 0,
            };
            let fwd: Vec<usize> = (0..n).map(|i| (0..n).map(|j| within(i, j, fr)).max().unwrap()).collect();
            let bwd: Vec<usize> = (0..n).map(|i| (0..n).map(|j| within(j, i, br)).max().unwrap()).collect();
            let k = fwd.iter().chain(&bwd).copied().max().unwrap().max(1);
            assert_eq!(report.forward_max_hop, fwd, "trial {trial} steps {steps}");
            assert_eq!(report.backward_max_hop, bwd, "trial {trial} steps {steps}");
            assert_eq!(report.k, k);
        }
    }
}

#[test]
fn per_edge_speeds_match_global_when_uniform() {
    let mut r = rng(13);
    let g = random_graph(&mut r, 8, 16);
    let m = g.num_edges();
    let with = g
        .clone()
        .with_speeds(localegn::EdgeSpeeds {
            freeflow_kmh: vec![36.0; m],
            shockwave_kmh: vec![18.0; m],
        })
        .unwrap();
    for steps in 1..=4 {
        let a = recommend_k(&with, steps, 5.0, Speeds::PerEdge).unwrap();
        let b = recommend_k(
            &g,
            steps,
            5.0,
            Speeds::Global {
                freeflow_kmh: 36.0,
                shockwave_kmh: 18.0,
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn k_never_decreases_with_horizon(seed in 0u64..10_000, n in 3usize..10, steps in 1usize..8) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, (2 * n).min(n * (n - 1)));
        let sp = Speeds::Global { freeflow_kmh: 60.0, shockwave_kmh: 20.0 };
        let a = recommend_k(&g, steps, 5.0, sp).unwrap();
        let b = recommend_k(&g, steps + 1, 5.0, sp).unwrap();
        prop_assert!(b.k >= a.k);
        for i in 0..n {
            prop_assert!(b.forward_max_hop[i] >= a.forward_max_hop[i]);
            prop_assert!(b.backward_max_hop[i] >= a.backward_max_hop[i]);
        }
    }

    #[test]
    fn k_is_invariant_to_node_labels(seed in 0u64..10_000, n in 3usize..10, steps in 1usize..6) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, (2 * n).min(n * (n - 1)));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let sp = Speeds::Global { freeflow_kmh: 60.0, shockwave_kmh: 20.0 };
        let a = recommend_k(&g, steps, 5.0, sp).unwrap();
        let b = recommend_k(&g.relabeled(&perm).unwrap(), steps, 5.0, sp).unwrap();
        prop_assert_eq!(a.k, b.k);
        for i in 0..n {
            prop_assert_eq!(a.forward_max_hop[i], b.forward_max_hop[perm[i]]);
            prop_assert_eq!(a.backward_max_hop[i], b.backward_max_hop[perm[i]]);
        }
    }
}

/// Nodes with a directed path of at most `k` edges into `target`.
fn in_closure(graph: &DirectedGraph, target: usize, k: usize) -> Vec<bool> {
    let mut reach = vec![false; graph.num_nodes()];
    reach[target] = true;
    for _ in 0..k {
        let prev = reach.clone();
        for e in graph.edges() {
            if prev[e.head] {
                reach[e.tail] = true;
            }
        }
    }
    reach
}

const LOCAL_VARIANTS: [ModelVariant; 4] = [
    ModelVariant::LocaleGn,
    ModelVariant::GnOnly,
    ModelVariant::NodeGruOnly,
    ModelVariant::RGn,
];

fn config(variant: ModelVariant, k: usize) -> ModelConfig {
    ModelConfig {
        lookback: 4,
        hidden: 8,
        gn_layers: k,
        ..ModelConfig::new(variant)
    }
}

fn predict(model: &Model, graph: &DirectedGraph, x: &Tensor2) -> Tensor2 {
    model.predict(&model.batch(graph, 1).unwrap(), x).unwrap()
}

#[test]
fn prediction_ignores_nodes_outside_the_receptive_field() {
    let mut r = rng(14);
    for trial in 0..6 {
        let g = random_graph(&mut r, 12, 18);
        let target = trial % 12;
        for k in [1, 2] {
            let reach = in_closure(&g, target, k);
            for v in LOCAL_VARIANTS {
                let reach = if v == ModelVariant::NodeGruOnly {
                    in_closure(&g, target, 0)
                } else {
                    reach.clone()
                };
                let model = Model::new(config(v, k), trial as u64).unwrap();
                let x = random_tensor(&mut r, 12, 4, 1.0);
                let mut xp = x.clone();
                let noise = random_tensor(&mut r, 12, 4, 5.0);
                for i in (0..12).filter(|&i| !reach[i]) {
                    for c in 0..4 {
                        xp.set(i, c, xp.get(i, c) + noise.get(i, c));
                    }
                }
                let (a, b) = (predict(&model, &g, &x), predict(&model, &g, &xp));
                assert!(
                    (a.get(target, 0) - b.get(target, 0)).abs() <= 1e-12,
                    "{v} K={k} trial {trial}"
                );
            }
        }
    }
}

#[test]
fn prediction_responds_to_an_upstream_neighbour() {
    let mut r = rng(15);
    let g = random_graph(&mut r, 8, 14);
    let target = (0..8).find(|&i| !g.incoming(i).is_empty()).unwrap();
    let src = g.edges()[g.incoming(target)[0]].tail;
    for v in [ModelVariant::LocaleGn, ModelVariant::GnOnly, ModelVariant::RGn] {
        let model = Model::new(config(v, 1), 3).unwrap();
        let x = random_tensor(&mut r, 8, 4, 1.0);
        let mut xp = x.clone();
        xp.set(src, 0, xp.get(src, 0) + 1.0);
        let (a, b) = (predict(&model, &g, &x), predict(&model, &g, &xp));
        assert!((a.get(target, 0) - b.get(target, 0)).abs() > 1e-9, "{v}");
    }
}

#[test]
fn locale_prediction_equals_full_graph_prediction() {
    let mut r = rng(16);
    for trial in 0..5 {
        let g = random_graph(&mut r, 15, 24);
        let x = random_tensor(&mut r, 15, 4, 1.0);
        for k in [1, 2] {
            for v in LOCAL_VARIANTS {
                let model = Model::new(config(v, k), trial).unwrap();
                let full = predict(&model, &g, &x);
                for node in 0..15 {
                    let loc = extract_locale(&g, node, k).unwrap();
                    let mut xl = Tensor2::zeros(loc.nodes.len(), 4);
                    for (j, &gi) in loc.nodes.iter().enumerate() {
                        xl.row_mut(j).copy_from_slice(x.row(gi));
                    }
                    let part = predict(&model, &loc.graph, &xl);
                    assert!(
                        (part.get(loc.center, 0) - full.get(node, 0)).abs() <= 1e-12,
                        "{v} K={k} node {node}"
                    );
                }
            }
        }
    }
}

#[test]
fn attention_variant_sees_the_whole_graph() {
    let mut r = rng(17);
    let g = random_graph(&mut r, 6, 6);
    let model = Model::new(config(ModelVariant::AGn, 1), 5).unwrap();
    let x = random_tensor(&mut r, 6, 4, 1.0);
    let reach = in_closure(&g, 0, 1);
    let far = (0..6).find(|&i| !reach[i]).unwrap();
    let mut xp = x.clone();
    xp.set(far, 1, xp.get(far, 1) + 2.0);
    let (a, b) = (predict(&model, &g, &x), predict(&model, &g, &xp));
    assert!((a.get(0, 0) - b.get(0, 0)).abs() > 1e-12);
}
