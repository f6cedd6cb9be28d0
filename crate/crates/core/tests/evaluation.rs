use localegn::checkpoint::Checkpoint;
use localegn::dataset::Dataset;
use localegn::eval::{evaluate, evaluate_test, median, repeat_experiment, transfer_evaluate, Forecaster, Metric};
use localegn::metrics::{mae, mape, rmse, MAPE_EPS};
use localegn::synthetic::{generate, oracle_next};
use localegn::train::{train, TrainConfig};
use localegn::{
    DiffusionSpec, DirectedGraph, Error, ModelConfig, ModelVariant, Normalizer, Persistence, Protocol, Result,
    SignalSeries, Tensor2, Trained,
};
use proptest::prelude::*;

/// Rolls the noise-free dynamics forward from each window's last row.
struct Oracle(DiffusionSpec);

impl Forecaster for Oracle {
    fn forecast(&self, graph: &DirectedGraph, series: &SignalSeries, ends: &[usize], horizon: usize) -> Result<Tensor2> {
        let n = series.num_nodes();
        let mut out = Tensor2::zeros(ends.len() * n, horizon);
        for (b, &end) in ends.iter().enumerate() {
            let mut state = series.values().row(end).to_vec();
            for h in 0..horizon {
                state = oracle_next(graph, &state, &self.0, end + h)?;
                for i in 0..n {
                    out.set(b * n + i, h, state[i]);
                }
            }
        }
        Ok(out)
    }
}

#[test]
fn exact_dynamics_score_zero_on_noise_free_data() {
    let spec = DiffusionSpec {
        sigma: 0.0,
        seed: 2,
        ..Default::default()
    };
    let (g, s) = generate(&spec).unwrap();
    let data = Dataset::prepare(g, s, Protocol::default(), 0).unwrap();
    let ev = evaluate_test(&Oracle(spec), &data).unwrap();
    assert_eq!(ev.scores.len(), 5);
    for sc in &ev.scores {
        assert!(sc.rmse < 1e-6 && sc.mae < 1e-6, "{sc:?}");
        assert!(sc.mape.unwrap() < 1e-6);
    }
    let p = evaluate_test(&Persistence, &data).unwrap();
    assert!(p.at(1).unwrap().rmse > 1e-3);
}

#[test]
fn persistence_error_grows_with_horizon_on_diffusion_data() {
    let (g, s) = generate(&DiffusionSpec {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let data = Dataset::prepare(g, s, Protocol::default(), 0).unwrap();
    let ev = evaluate_test(&Persistence, &data).unwrap();
    assert!(ev.at(1).unwrap().rmse < ev.at(12).unwrap().rmse);
}

#[test]
fn pooled_mae_is_the_weighted_mean_of_per_node_maes() {
    let (g, s) = generate(&DiffusionSpec {
        seed: 4,
        nodes: 9,
        ..Default::default()
    })
    .unwrap();
    let data = Dataset::prepare(g, s, Protocol::default(), 0).unwrap();
    let ends = &data.test_ends;
    let ev = evaluate(&Persistence, &data.graph, &data.raw, ends, &[3]).unwrap();
    let n = data.raw.num_nodes();
    let mut weighted = 0.0;
    for i in 0..n {
        let p: Vec<f64> = ends.iter().map(|&e| data.raw.at(e, i)).collect();
        let t: Vec<f64> = ends.iter().map(|&e| data.raw.at(e + 3, i)).collect();
        weighted += mae(&p, &t).unwrap() * ends.len() as f64;
    }
    weighted /= (n * ends.len()) as f64;
    let pooled = ev.at(3).unwrap();
    assert_eq!(pooled.n, n * ends.len());
    assert!((pooled.mae - weighted).abs() <= 1e-12);
}

#[test]
fn metric_examples() {
    assert_eq!(rmse(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), 1.0);
    assert_eq!(mae(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), 1.0);
    assert_eq!(mape(&[3.0, 5.0], &[4.0, 4.0], MAPE_EPS).unwrap().percent, Some(25.0));
    let m = mape(&[1.0, 2.0, 3.0], &[0.0, 4.0, 3.0], MAPE_EPS).unwrap();
    assert_eq!(m.excluded, 1);
    assert_eq!(m.percent, Some(25.0));
    let none = mape(&[1.0], &[0.0], MAPE_EPS).unwrap();
    assert_eq!((none.percent, none.excluded), (None, 1));
}

proptest! {
    #[test]
    fn rmse_and_mae_are_symmetric_but_mape_is_not(
        pairs in proptest::collection::vec((1.0f64..100.0, 1.0f64..100.0), 1..40)
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(rmse(&p, &t).unwrap(), rmse(&t, &p).unwrap());
        prop_assert_eq!(mae(&p, &t).unwrap(), mae(&t, &p).unwrap());
        prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-12);
        let a = mape(&p, &t, MAPE_EPS).unwrap().percent.unwrap();
        let b = mape(&t, &p, MAPE_EPS).unwrap().percent.unwrap();
        let expect_a = 100.0 * p.iter().zip(&t).map(|(x, y)| ((x - y) / y).abs()).sum::<f64>() / p.len() as f64;
        prop_assert!((a - expect_a).abs() <= 1e-9 * expect_a.max(1.0));
        if p.iter().zip(&t).any(|(x, y)| x != y) {
            let expect_b = 100.0 * p.iter().zip(&t).map(|(x, y)| ((y - x) / x).abs()).sum::<f64>() / p.len() as f64;
            prop_assert!((b - expect_b).abs() <= 1e-9 * expect_b.max(1.0));
        }
    }
}

#[test]
fn mape_differs_when_arguments_swap() {
    let (p, t) = ([2.0, 8.0], [4.0, 4.0]);
    let a = mape(&p, &t, MAPE_EPS).unwrap().percent.unwrap();
    let b = mape(&t, &p, MAPE_EPS).unwrap().percent.unwrap();
    assert_eq!(a, 75.0);
    assert_eq!(b, 75.0);
    let (p, t) = ([2.0, 4.0], [4.0, 4.0]);
    assert_ne!(
        mape(&p, &t, MAPE_EPS).unwrap().percent,
        mape(&t, &p, MAPE_EPS).unwrap().percent
    );
}

fn trained_fixture(seed: u64) -> (Trained, Dataset, TrainConfig) {
    let (g, s) = generate(&DiffusionSpec {
        seed,
        nodes: 10,
        ..Default::default()
    })
    .unwrap();
    let data = Dataset::prepare(g, s, Protocol::default(), seed).unwrap();
    let cfg = TrainConfig {
        iterations: 150,
        val_every: 50,
        seed,
        ..Default::default()
    };
    let mcfg = ModelConfig {
        hidden: 16,
        ..ModelConfig::new(ModelVariant::LocaleGn)
    };
    let (model, _) = train(mcfg, &cfg, &data).unwrap();
    let t = Trained {
        model,
        normalizer: data.normalizer,
    };
    (t, data, cfg)
}

#[test]
fn transfer_on_the_source_graph_equals_evaluate() {
    let (t, data, _) = trained_fixture(5);
    let direct = evaluate_test(&t, &data).unwrap();
    let before = t.model.params().checksum();
    let via = transfer_evaluate(&t, data.graph.clone(), data.raw.clone(), data.protocol.clone()).unwrap();
    assert_eq!(direct, via);
    assert_eq!(t.model.params().checksum(), before);
}

#[test]
fn transfer_runs_on_a_larger_graph_without_touching_parameters() {
    let (t, _, _) = trained_fixture(6);
    let before = t.model.params().checksum();
    let (g, s) = generate(&DiffusionSpec {
        seed: 600,
        nodes: 35,
        ..Default::default()
    })
    .unwrap();
    let ev = transfer_evaluate(&t, g, s, Protocol::default()).unwrap();
    assert_eq!(ev.scores.len(), 5);
    assert_eq!(ev.at(1).unwrap().n % 35, 0);
    assert_eq!(t.model.params().checksum(), before);
}

#[test]
fn transfer_rejects_incompatible_targets() {
    let (t, data, _) = trained_fixture(7);
    let p6 = Protocol {
        lookback: 6,
        ..Protocol::default()
    };
    assert!(matches!(
        transfer_evaluate(&t, data.graph.clone(), data.raw.clone(), p6),
        Err(Error::Config(_))
    ));
    let n = data.graph.num_nodes();
    let two = DirectedGraph::with_edge_attr(n, data.graph.edges().to_vec(), Tensor2::zeros(data.graph.num_edges(), 2)).unwrap();
    assert!(matches!(
        transfer_evaluate(&t, two, data.raw.clone(), Protocol::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_exact_and_checks_the_manifest() {
    let (t, data, cfg) = trained_fixture(8);
    let ck = Checkpoint::new(&t, cfg, data.protocol.clone());
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back.manifest, ck.manifest);
    assert_eq!(back.manifest.num_parameters, t.model.params().num_scalars());
    let restored = back.clone().into_trained(Some(t.model.config())).unwrap();
    assert_eq!(restored.model.params().checksum(), t.model.params().checksum());
    assert_eq!(restored.normalizer, t.normalizer);
    assert_eq!(evaluate_test(&restored, &data).unwrap(), evaluate_test(&t, &data).unwrap());

    let wider = ModelConfig {
        hidden: 32,
        ..*t.model.config()
    };
    assert!(matches!(back.clone().into_trained(Some(&wider)), Err(Error::Config(_))));
    let other = ModelConfig {
        variant: ModelVariant::RGn,
        ..*t.model.config()
    };
    assert!(matches!(back.into_trained(Some(&other)), Err(Error::Config(_))));
    assert!(Checkpoint::from_json("{\"manifest\": 3}").is_err());
}

#[test]
fn report_mean_of_identical_runs_is_that_value() {
    let (t, data, _) = trained_fixture(9);
    let ev = evaluate_test(&t, &data).unwrap();
    let report = localegn::EvalReport::from_runs(&[ev.clone(), ev.clone(), ev.clone()], "mph").unwrap();
    for s in &ev.scores {
        let r = report.get(s.horizon, Metric::Rmse).unwrap();
        assert_eq!((r.mean, r.std), (Some(s.rmse), Some(0.0)));
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("horizon,metric,mean,std,n,excluded\n"));
    assert_eq!(text.lines().count(), 1 + 5 * 3);
    let table = report.to_string();
    assert!(table.contains("RMSE") && table.contains("MAPE (%)") && table.contains("MAE"));
}

#[test]
fn rollout_error_drifts_upward_with_horizon() {
    let (g, s) = generate(&DiffusionSpec {
        seed: 10,
        nodes: 8,
        ..Default::default()
    })
    .unwrap();
    let protocol = Protocol {
        horizons: vec![1, 12],
        ..Protocol::default()
    };
    let cfg = TrainConfig {
        iterations: 400,
        seed: 1,
        ..Default::default()
    };
    let mcfg = ModelConfig {
        hidden: 16,
        ..ModelConfig::new(ModelVariant::LocaleGn)
    };
    let ex = repeat_experiment(&g, &s, &protocol, mcfg, &cfg, 3, false, "u").unwrap();
    let h1: Vec<f64> = ex.runs.iter().map(|r| r.evaluation.at(1).unwrap().rmse).collect();
    let h12: Vec<f64> = ex.runs.iter().map(|r| r.evaluation.at(12).unwrap().rmse).collect();
    assert!(median(&h1) <= median(&h12), "{h1:?} vs {h12:?}");
}

#[test]
fn identity_normalizer_round_trips() {
    let n = Normalizer { mean: 0.0, std: 1.0 };
    assert_eq!(n.invert(n.apply(3.25)), 3.25);
    let z = Normalizer { mean: 60.0, std: 4.0 };
    assert_eq!(z.apply(64.0), 1.0);
    assert_eq!(z.invert(-0.5), 58.0);
}
