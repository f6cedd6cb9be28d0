//! The localized graph-network forecaster and its ablation variants.
//!
//! Data flow for the full model, per node `i` and edge `k`:
//!
//! ```text
//! window v_i ──► GRU ───────────────────────────────────────────┐
//!          └──► node encoder ─┐                                 │
//! edge attr e_k ► edge encoder ┴► GN block (×K) ─► decoder ─► ⊕ ─► output
//! ```
//!
//! A GN layer updates each edge from its own features and the features of
//! its two endpoints, averages the updated edges arriving at each node, and
//! updates the node from that average plus its own features. Every weight
//! is shared across nodes and edges, so the parameter count depends only on
//! the window length, edge attribute width, hidden width and layer count.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::params::{ParamId, ParameterStore};
use crate::seed;
use crate::tape::{GruWeights, Segments, Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// GRU branch plus GN branch, joined at the output layer.
    #[serde(rename = "localegn")]
    LocaleGn,
    /// GN branch only.
    #[serde(rename = "gn-only")]
    GnOnly,
    /// GRU branch only.
    #[serde(rename = "nodegru-only")]
    NodeGruOnly,
    /// GN branch with a residual connection on node features in every layer.
    #[serde(rename = "rgn")]
    RGn,
    /// GN branch whose encoded node features are augmented by self-attention
    /// across the node windows.
    #[serde(rename = "agn")]
    AGn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::LocaleGn,
        ModelVariant::GnOnly,
        ModelVariant::NodeGruOnly,
        ModelVariant::RGn,
        ModelVariant::AGn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::LocaleGn => "localegn",
            ModelVariant::GnOnly => "gn-only",
            ModelVariant::NodeGruOnly => "nodegru-only",
            ModelVariant::RGn => "rgn",
            ModelVariant::AGn => "agn",
        }
    }

    fn has_gru(self) -> bool {
        matches!(self, ModelVariant::LocaleGn | ModelVariant::NodeGruOnly)
    }

    fn has_gn(self) -> bool {
        !matches!(self, ModelVariant::NodeGruOnly)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of localegn, gn-only, nodegru-only, rgn, agn)"
                ))
            })
    }
}

/// Which edges a node averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Edges whose head is the node (traffic arriving at it).
    #[default]
    Incoming,
    /// Edges whose tail is the node.
    Outgoing,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incoming" => Ok(Aggregation::Incoming),
            "outgoing" => Ok(Aggregation::Outgoing),
            _ => Err(Error::Config(format!(
                "unknown aggregation `{s}` (expected incoming or outgoing)"
            ))),
        }
    }
}

/// Architecture hyper-parameters. Everything that determines the set and
/// shapes of trainable tensors lives here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Lookback window length M.
    pub lookback: usize,
    /// Width of the per-edge attribute vector.
    pub attr_dim: usize,
    /// Hidden width H of every encoder, GN update, decoder and the GRU.
    pub hidden: usize,
    /// Number of stacked GN layers K.
    pub gn_layers: usize,
    /// Readings fed to the GRU per recurrence step. 1 runs the scalar-input
    /// recurrence over all `lookback` readings; `lookback` feeds the whole
    /// window as a single input vector.
    pub gru_input_width: usize,
    pub aggregation: Aggregation,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            variant,
            lookback: 12,
            attr_dim: 1,
            hidden: 64,
            gn_layers: 1,
            gru_input_width: 1,
            aggregation: Aggregation::Incoming,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.hidden == 0 || self.attr_dim == 0 {
            return Err(Error::Config("lookback, hidden and attr_dim must be positive".into()));
        }
        if self.variant.has_gn() && self.gn_layers == 0 {
            return Err(Error::Config("at least one GN layer is required".into()));
        }
        if self.gru_input_width == 0 || self.lookback % self.gru_input_width != 0 {
            return Err(Error::Config(format!(
                "GRU input width {} must divide the lookback {}",
                self.gru_input_width, self.lookback
            )));
        }
        Ok(())
    }

    /// Number of GRU recurrence steps per window.
    pub fn gru_steps(&self) -> usize {
        self.lookback / self.gru_input_width.max(1)
    }

    /// Every trainable tensor: name, shape, and the half-width of its
    /// uniform initialization.
    fn tensor_specs(&self) -> Vec<(String, (usize, usize), f64)> {
        let (m, a, h) = (self.lookback, self.attr_dim, self.hidden);
        let mut out = Vec::new();
        let mut dense = |name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            out.push((format!("{name}.w"), (fan_in, fan_out), bound));
            out.push((format!("{name}.b"), (1, fan_out), bound));
        };
        let v = self.variant;
        if v.has_gn() {
            dense("node_enc", m, h);
            dense("edge_enc", a, h);
            for l in 0..self.gn_layers {
                dense(&format!("gn.{l}.edge"), 3 * h, h);
                dense(&format!("gn.{l}.node"), 2 * h, h);
            }
            dense("decoder", h, h);
        }
        let out_width = if v == ModelVariant::LocaleGn { 2 * h } else { h };
        dense("output", out_width, 1);
        if v.has_gru() {
            let bound = 1.0 / (h as f64).sqrt();
            for gate in ["z", "r", "h"] {
                out.push((format!("gru.w_{gate}"), (self.gru_input_width, h), bound));
                out.push((format!("gru.u_{gate}"), (h, h), bound));
                out.push((format!("gru.b_{gate}"), (1, h), bound));
            }
        }
        if v == ModelVariant::AGn {
            let bm = 1.0 / (m as f64).sqrt();
            let bh = 1.0 / (h as f64).sqrt();
            out.push(("attn.w_q".into(), (m, h), bm));
            out.push(("attn.w_k".into(), (m, h), bm));
            out.push(("attn.w_v".into(), (m, h), bm));
            out.push(("attn.w_o".into(), (h, h), bh));
        }
        out
    }
}

/// Closed-form trainable-parameter count. Depends on the architecture only,
/// never on the graph.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (m, a, h, k) = (cfg.lookback, cfg.attr_dim, cfg.hidden, cfg.gn_layers);
    let dense = |i: usize, o: usize| i * o + o;
    let gru = 3 * ((cfg.gru_input_width + h) * h + h);
    let gn_branch = dense(m, h) + dense(a, h) + k * (dense(3 * h, h) + dense(2 * h, h)) + dense(h, h);
    match cfg.variant {
        ModelVariant::LocaleGn => gn_branch + gru + dense(2 * h, 1),
        ModelVariant::GnOnly | ModelVariant::RGn => gn_branch + dense(h, 1),
        ModelVariant::NodeGruOnly => gru + dense(h, 1),
        ModelVariant::AGn => gn_branch + dense(h, 1) + 3 * m * h + h * h,
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    node_enc: Option<Dense>,
    edge_enc: Option<Dense>,
    gn: Vec<(Dense, Dense)>,
    decoder: Option<Dense>,
    output: Dense,
    gru: Option<[Gate; 3]>,
    attn: Option<[ParamId; 4]>,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        let specs = cfg.tensor_specs();
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, the {} architecture needs {}",
                store.len(),
                cfg.variant,
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != *shape {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let dense = |n: &str| Dense {
            w: id(&format!("{n}.w")),
            b: id(&format!("{n}.b")),
        };
        let v = cfg.variant;
        Ok(Self {
            node_enc: v.has_gn().then(|| dense("node_enc")),
            edge_enc: v.has_gn().then(|| dense("edge_enc")),
            gn: if v.has_gn() {
                (0..cfg.gn_layers)
                    .map(|l| (dense(&format!("gn.{l}.edge")), dense(&format!("gn.{l}.node"))))
                    .collect()
            } else {
                Vec::new()
            },
            decoder: v.has_gn().then(|| dense("decoder")),
            output: dense("output"),
            gru: v.has_gru().then(|| {
                ["z", "r", "h"].map(|g| Gate {
                    w: id(&format!("gru.w_{g}")),
                    u: id(&format!("gru.u_{g}")),
                    b: id(&format!("gru.b_{g}")),
                })
            }),
            attn: (v == ModelVariant::AGn)
                .then(|| ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"].map(id)),
        })
    }
}

/// `copies` disjoint copies of one graph, laid out so that copy `b` owns node
/// rows `b*N .. (b+1)*N` and edge rows `b*E .. (b+1)*E`. This is how a
/// mini-batch of windows on the same topology is evaluated in one pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    nodes_per_copy: usize,
    copies: usize,
    tails: Rc<[usize]>,
    heads: Rc<[usize]>,
    groups: Rc<Segments>,
    edge_attr: Tensor2,
}

impl GraphBatch {
    pub fn new(graph: &DirectedGraph, copies: usize, aggregation: Aggregation) -> Result<Self> {
        let (n, e) = (graph.num_nodes(), graph.num_edges());
        let mut tails = Vec::with_capacity(copies * e);
        let mut heads = Vec::with_capacity(copies * e);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); copies * n];
        let mut attr = Vec::with_capacity(copies * graph.edge_attr().len());
        for b in 0..copies {
            for (k, edge) in graph.edges().iter().enumerate() {
                let (t, h) = (b * n + edge.tail, b * n + edge.head);
                tails.push(t);
                heads.push(h);
                let owner = match aggregation {
                    Aggregation::Incoming => h,
                    Aggregation::Outgoing => t,
                };
                groups[owner].push(b * e + k);
            }
            attr.extend_from_slice(graph.edge_attr().data());
        }
        Ok(Self {
            nodes_per_copy: n,
            copies,
            tails: tails.into(),
            heads: heads.into(),
            groups: Rc::new(Segments::new(&groups, copies * e)?),
            edge_attr: Tensor2::from_vec(copies * e, graph.attr_dim(), attr)?,
        })
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn nodes_per_copy(&self) -> usize {
        self.nodes_per_copy
    }

    pub fn total_nodes(&self) -> usize {
        self.copies * self.nodes_per_copy
    }

    pub fn edge_attr(&self) -> &Tensor2 {
        &self.edge_attr
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

/// Intermediate outputs of the stacked GN layers.
#[derive(Debug, Clone, Copy)]
pub struct GnOutput {
    pub nodes: Var,
    pub edges: Var,
}

impl Model {
    /// Fresh model with seeded uniform initialization.
    pub fn new(config: ModelConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed_value, seed::stream::INIT);
        let mut store = ParameterStore::new();
        for (name, (r, c), bound) in config.tensor_specs() {
            let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
            store.add(name, Tensor2::from_vec(r, c, data)?)?;
        }
        Self::from_params(config, store)
    }

    /// Wraps an existing parameter set; names and shapes must match exactly.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    /// Loads every parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.params.ids().map(|id| tape.param(&self.params, id)).collect();
        Bound { model: self, vars }
    }

    pub fn batch(&self, graph: &DirectedGraph, copies: usize) -> Result<GraphBatch> {
        self.check_graph(graph)?;
        GraphBatch::new(graph, copies, self.config.aggregation)
    }

    fn check_graph(&self, graph: &DirectedGraph) -> Result<()> {
        if graph.attr_dim() != self.config.attr_dim {
            return Err(Error::Config(format!(
                "graph edges carry {} attributes, the model expects {}",
                graph.attr_dim(),
                self.config.attr_dim
            )));
        }
        Ok(())
    }

    /// One-step prediction for stacked windows `(copies*N) x M`.
    pub fn predict(&self, batch: &GraphBatch, windows: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(windows.clone());
        let y = bound.forward(&mut tape, batch, x)?;
        Ok(tape.value(y).clone())
    }

    /// Autoregressive multi-step prediction: predict one step, drop the
    /// oldest reading, append the prediction, repeat. Returns
    /// `(copies*N) x horizon`.
    pub fn rollout(&self, batch: &GraphBatch, windows: &Tensor2, horizon: usize) -> Result<Tensor2> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let rows = windows.rows();
        let m = windows.cols();
        let mut w = windows.clone();
        let mut out = Tensor2::zeros(rows, horizon);
        for step in 0..horizon {
            let pred = self.predict(batch, &w)?;
            for r in 0..rows {
                let p = pred.get(r, 0);
                out.set(r, step, p);
                let row = w.row_mut(r);
                row.copy_within(1..m, 0);
                row[m - 1] = p;
            }
        }
        Ok(out)
    }

    /// Updated incoming-edge features and window of one node: everything the
    /// node's prediction is conditioned on beyond its own GRU summary.
    pub fn locale_view(&self, graph: &DirectedGraph, window: &Tensor2, node: usize) -> Result<LocaleView> {
        if !self.config.variant.has_gn() {
            return Err(Error::Config(format!("{} has no GN block", self.config.variant)));
        }
        let batch = self.batch(graph, 1)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(window.clone());
        let (v, e) = bound.encode(&mut tape, &batch, x)?;
        let gn = bound.gn_block(&mut tape, &batch, v, e)?;
        let edges = match self.config.aggregation {
            Aggregation::Incoming => graph.incoming(node),
            Aggregation::Outgoing => graph.outgoing(node),
        };
        let ev = tape.value(gn.edges);
        let mut feats = Tensor2::zeros(edges.len(), ev.cols());
        for (j, &k) in edges.iter().enumerate() {
            feats.row_mut(j).copy_from_slice(ev.row(k));
        }
        Ok(LocaleView {
            node,
            window: window.row(node).to_vec(),
            edges,
            edge_features: feats,
        })
    }
}

/// A node's locale: its own window and the updated features of the edges
/// it aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocaleView {
    pub node: usize,
    pub window: Vec<f64>,
    pub edges: Vec<usize>,
    pub edge_features: Tensor2,
}

/// A model whose parameters are loaded on a tape.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Bound<'_> {
    #[inline]
    fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn param_var(&self, id: ParamId) -> Var {
        self.p(id)
    }

    fn dense(&self, tape: &mut Tape, x: Var, d: Dense, relu: bool) -> Result<Var> {
        let y = tape.matmul(x, self.p(d.w))?;
        let y = tape.add_bias(y, self.p(d.b))?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn layout(&self) -> &Layout {
        &self.model.layout
    }

    /// Shared GRU over each row's window; returns the final hidden state.
    pub fn node_gru(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [gz, gr, gh] = self
            .layout()
            .gru
            .ok_or_else(|| Error::Config(format!("{} has no GRU branch", self.model.variant())))?;
        let cfg = &self.model.config;
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != cfg.lookback {
            return Err(Error::Shape {
                op: "node_gru",
                left: tape.value(x).shape(),
                right: (rows, cfg.lookback),
            });
        }
        let width = cfg.gru_input_width;
        let weights = GruWeights {
            w: [self.p(gz.w), self.p(gr.w), self.p(gh.w)],
            u: [self.p(gz.u), self.p(gr.u), self.p(gh.u)],
            b: [self.p(gz.b), self.p(gr.b), self.p(gh.b)],
        };
        let mut h = tape.constant(Tensor2::zeros(rows, cfg.hidden));
        for step in 0..cfg.gru_steps() {
            let xt = tape.slice_cols(x, step * width, width)?;
            h = tape.gru_cell(xt, h, weights)?;
        }
        Ok(h)
    }

    /// Node and edge encoders.
    pub fn encode(&self, tape: &mut Tape, batch: &GraphBatch, x: Var) -> Result<(Var, Var)> {
        let l = self.layout();
        let (ne, ee) = match (l.node_enc, l.edge_enc) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("{} has no encoders", self.model.variant()))),
        };
        let v = self.dense(tape, x, ne, true)?;
        let e_in = tape.constant(batch.edge_attr.clone());
        let e = self.dense(tape, e_in, ee, true)?;
        Ok((v, e))
    }

    /// All stacked GN layers. Node features feed the next layer's node
    /// input; updated edge features feed the next layer's edge input.
    pub fn gn_block(&self, tape: &mut Tape, batch: &GraphBatch, v: Var, e: Var) -> Result<GnOutput> {
        let residual = self.model.variant() == ModelVariant::RGn;
        let (mut v, mut e) = (v, e);
        for &(edge_fn, node_fn) in &self.layout().gn {
            let vt = tape.gather_rows(v, batch.tails.clone())?;
            let vh = tape.gather_rows(v, batch.heads.clone())?;
            let cat = tape.concat_cols(&[e, vt, vh])?;
            let e_new = self.dense(tape, cat, edge_fn, true)?;
            let agg = tape.segment_mean(e_new, batch.groups.clone())?;
            let cat = tape.concat_cols(&[agg, v])?;
            let mut v_new = self.dense(tape, cat, node_fn, true)?;
            if residual {
                v_new = tape.add(v_new, v)?;
            }
            v = v_new;
            e = e_new;
        }
        Ok(GnOutput { nodes: v, edges: e })
    }

    /// Single-head scaled dot-product attention across the nodes of each
    /// graph copy, projected back to the hidden width.
    pub fn attention(&self, tape: &mut Tape, batch: &GraphBatch, x: Var) -> Result<Var> {
        let [wq, wk, wv, wo] = self
            .layout()
            .attn
            .ok_or_else(|| Error::Config(format!("{} has no attention block", self.model.variant())))?;
        let q = tape.matmul(x, self.p(wq))?;
        let k = tape.matmul(x, self.p(wk))?;
        let v = tape.matmul(x, self.p(wv))?;
        let n = batch.nodes_per_copy;
        let scale = 1.0 / (self.model.config.hidden as f64).sqrt();
        let mut blocks = Vec::with_capacity(batch.copies);
        for b in 0..batch.copies {
            let qb = tape.slice_rows(q, b * n, n)?;
            let kb = tape.slice_rows(k, b * n, n)?;
            let vb = tape.slice_rows(v, b * n, n)?;
            let s = tape.matmul_nt(qb, kb)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            blocks.push(tape.matmul(a, vb)?);
        }
        let att = tape.concat_rows(&blocks)?;
        tape.matmul(att, self.p(wo))
    }

    /// Node decoder followed by the output layer. With a GRU summary the
    /// output layer sees `decoded ⊕ gru`.
    pub fn decode_and_output(&self, tape: &mut Tape, nodes: Var, gru: Option<Var>) -> Result<Var> {
        let dec = self
            .layout()
            .decoder
            .ok_or_else(|| Error::Config(format!("{} has no decoder", self.model.variant())))?;
        let d = self.dense(tape, nodes, dec, true)?;
        let input = match gru {
            Some(g) => tape.concat_cols(&[d, g])?,
            None => d,
        };
        self.dense(tape, input, self.layout().output, false)
    }

    /// One-step prediction, `(copies*N) x 1`, for windows `x`.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        if rows != batch.total_nodes() {
            return Err(Error::Shape {
                op: "forward",
                left: tape.value(x).shape(),
                right: (batch.total_nodes(), self.model.config.lookback),
            });
        }
        match self.model.variant() {
            ModelVariant::LocaleGn => {
                let g = self.node_gru(tape, x)?;
                let (v, e) = self.encode(tape, batch, x)?;
                let gn = self.gn_block(tape, batch, v, e)?;
                self.decode_and_output(tape, gn.nodes, Some(g))
            }
            ModelVariant::GnOnly | ModelVariant::RGn => {
                let (v, e) = self.encode(tape, batch, x)?;
                let gn = self.gn_block(tape, batch, v, e)?;
                self.decode_and_output(tape, gn.nodes, None)
            }
            ModelVariant::NodeGruOnly => {
                let g = self.node_gru(tape, x)?;
                self.dense(tape, g, self.layout().output, false)
            }
            ModelVariant::AGn => {
                let (v, e) = self.encode(tape, batch, x)?;
                let a = self.attention(tape, batch, x)?;
                let v = tape.add(v, a)?;
                let gn = self.gn_block(tape, batch, v, e)?;
                self.decode_and_output(tape, gn.nodes, None)
            }
        }
    }
}
