mod common;

use std::rc::Rc;

use common::{check_gradient, random_graph, random_tensor, rng};
use localegn::model::{Model, ModelConfig, ModelVariant};
use localegn::tape::{Segments, Tape, Var};
use localegn::train::l2_loss;
use localegn::Tensor2;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Checks every input of `build` against central differences of
/// `sum(build(inputs) ⊙ R)` for a fixed random `R`.
fn check_op(name: &str, inputs: Vec<Tensor2>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let weights = |tape: &mut Tape, out: Var, seed: u64| {
        let (r, c) = tape.value(out).shape();
        let w = random_tensor(&mut rng(seed), r, c, 1.0);
        let wv = tape.constant(w);
        let p = tape.hadamard(out, wv).unwrap();
        tape.sum(p)
    };
    let eval = |xs: &[Tensor2]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = weights(&mut tape, out, 99);
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weights(&mut tape, out, 99);
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| {
            let (r, c) = inputs[i].shape();
            Tensor2::zeros(r, c)
        });
        check_gradient(&format!("{name} input {i}"), &inputs[i], &g, H, TOL, |x| {
            let mut xs = inputs.clone();
            xs[i] = x.clone();
            eval(&xs)
        });
    }
}

#[test]
fn elementary_ops_match_finite_differences() {
    let mut r = rng(1);
    let mut t = |rows, cols| random_tensor(&mut r, rows, cols, 1.0);
    let (a, b, c, d) = (t(3, 4), t(4, 2), t(3, 4), t(1, 4));
    check_op("matmul", vec![a.clone(), b.clone()], |tp, v| tp.matmul(v[0], v[1]).unwrap());
    check_op("matmul_nt", vec![a.clone(), c.clone()], |tp, v| tp.matmul_nt(v[0], v[1]).unwrap());
    check_op("add_bias", vec![a.clone(), d.clone()], |tp, v| tp.add_bias(v[0], v[1]).unwrap());
    check_op("add", vec![a.clone(), c.clone()], |tp, v| tp.add(v[0], v[1]).unwrap());
    check_op("sub", vec![a.clone(), c.clone()], |tp, v| tp.sub(v[0], v[1]).unwrap());
    check_op("hadamard", vec![a.clone(), c.clone()], |tp, v| tp.hadamard(v[0], v[1]).unwrap());
    check_op("hadamard self", vec![a.clone()], |tp, v| tp.hadamard(v[0], v[0]).unwrap());
    check_op("relu", vec![a.clone()], |tp, v| tp.relu(v[0]));
    check_op("sigmoid", vec![a.scale_by(4.0)], |tp, v| tp.sigmoid(v[0]));
    check_op("tanh", vec![a.clone()], |tp, v| tp.tanh(v[0]));
    check_op("scale", vec![a.clone()], |tp, v| tp.scale(v[0], -2.5));
    check_op("one_minus", vec![a.clone()], |tp, v| tp.one_minus(v[0]));
    check_op("sum", vec![a.clone()], |tp, v| tp.sum(v[0]));
    check_op("softmax_rows", vec![a.scale_by(3.0)], |tp, v| tp.softmax_rows(v[0]));
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut r = rng(2);
    let mut t = |rows, cols| random_tensor(&mut r, rows, cols, 1.0);
    let (a, b, c) = (t(3, 4), t(3, 2), t(5, 4));
    check_op("concat_cols", vec![a.clone(), b.clone(), a.clone()], |tp, v| {
        tp.concat_cols(&[v[0], v[1], v[2]]).unwrap()
    });
    check_op("concat_rows", vec![a.clone(), c.clone()], |tp, v| tp.concat_rows(&[v[0], v[1]]).unwrap());
    check_op("slice_cols", vec![a.clone()], |tp, v| tp.slice_cols(v[0], 1, 2).unwrap());
    check_op("slice_rows", vec![c.clone()], |tp, v| tp.slice_rows(v[0], 2, 3).unwrap());
    let idx: Rc<[usize]> = vec![2, 0, 2, 4, 4, 4].into();
    check_op("gather_rows", vec![c.clone()], move |tp, v| tp.gather_rows(v[0], idx.clone()).unwrap());
    // group 1 is empty, group 2 repeats a row
    let seg = Rc::new(Segments::new(&[vec![0, 3], vec![], vec![1, 1, 4], vec![2]], 5).unwrap());
    check_op("segment_mean", vec![c.clone()], move |tp, v| tp.segment_mean(v[0], seg.clone()).unwrap());
    check_op("mean_of", vec![a.clone(), a.scale_by(-0.5), t(3, 4)], |tp, v| tp.mean_of(&[v[0], v[1], v[2]]).unwrap());
}

#[test]
fn empty_segment_yields_zero_row() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let seg = Rc::new(Segments::new(&[vec![0, 1], vec![]], 2).unwrap());
    let y = tape.segment_mean(x, seg).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 3.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor2::zeros(2, 2));
    assert!(tape.backward(x).is_err());
}

trait ScaleBy {
    fn scale_by(&self, k: f64) -> Tensor2;
}

impl ScaleBy for Tensor2 {
    fn scale_by(&self, k: f64) -> Tensor2 {
        self.map(|x| x * k)
    }
}

fn model_loss(model: &Model, graph: &localegn::DirectedGraph, x: &Tensor2, y: &Tensor2) -> (Tape, Var) {
    let batch = model.batch(graph, x.rows() / graph.num_nodes()).unwrap();
    let mut tape = Tape::new();
    let loss = {
        let b = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let p = b.forward(&mut tape, &batch, xv).unwrap();
        l2_loss(&mut tape, p, yv).unwrap()
    };
    (tape, loss)
}

fn check_model_gradients(variant: ModelVariant, gn_layers: usize, gru_input_width: usize, seed: u64) {
    let mut r = rng(seed);
    let graph = random_graph(&mut r, 3, 4);
    let cfg = ModelConfig {
        lookback: 4,
        hidden: 5,
        gn_layers,
        gru_input_width,
        ..ModelConfig::new(variant)
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let x = random_tensor(&mut r, 6, 4, 1.0);
    let y = random_tensor(&mut r, 6, 1, 1.0);
    let (tape, loss) = model_loss(&model, &graph, &x, &y);
    model.params_mut().zero_grads();
    tape.backward_into(loss, model.params_mut()).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    let mut checked = 0;
    for id in ids {
        let name = model.params().name(id).to_string();
        let value = model.params().value(id).clone();
        let grad = model.params().grad(id).clone();
        let mut probe = model.clone();
        checked += check_gradient(&format!("{variant} {name}"), &value, &grad, H, TOL, |v| {
            *probe.params_mut().value_mut(id) = v.clone();
            let (t, l) = model_loss(&probe, &graph, &x, &y);
            t.value(l).item().unwrap()
        });
    }
    assert!(checked > 0);
}

#[test]
fn every_variant_matches_finite_differences() {
    for (i, v) in ModelVariant::ALL.into_iter().enumerate() {
        check_model_gradients(v, 1, 1, 10 + i as u64);
    }
}

#[test]
fn stacked_layers_and_recurrent_gru_match_finite_differences() {
    check_model_gradients(ModelVariant::LocaleGn, 2, 2, 21);
    check_model_gradients(ModelVariant::RGn, 3, 4, 22);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn two_step_gru_matches_direct_recurrence() {
    let cfg = ModelConfig {
        lookback: 2,
        hidden: 3,
        ..ModelConfig::new(ModelVariant::NodeGruOnly)
    };
    let model = Model::new(cfg, 5).unwrap();
    let p = model.params();
    let get = |n: &str| p.value(p.id(n).unwrap()).clone();
    let seq = [0.7, -1.3];

    let mut h = [0.0; 3];
    for &x in &seq {
        let lin = |g: &str, hin: &[f64; 3]| -> [f64; 3] {
            let (w, u, b) = (get(&format!("gru.w_{g}")), get(&format!("gru.u_{g}")), get(&format!("gru.b_{g}")));
            std::array::from_fn(|j| {
                x * w.get(0, j) + (0..3).map(|k| hin[k] * u.get(k, j)).sum::<f64>() + b.get(0, j)
            })
        };
        let z = lin("z", &h).map(sigmoid);
        let r = lin("r", &h).map(sigmoid);
        let rh: [f64; 3] = std::array::from_fn(|j| r[j] * h[j]);
        let cand = lin("h", &rh).map(f64::tanh);
        h = std::array::from_fn(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]);
    }

    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let xv = tape.constant(Tensor2::row_vector(&seq));
    let out = b.node_gru(&mut tape, xv).unwrap();
    for j in 0..3 {
        assert!((tape.value(out).get(0, j) - h[j]).abs() < 1e-12);
    }
}
