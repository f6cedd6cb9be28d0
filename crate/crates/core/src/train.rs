//! Loss, optimizer and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{BatchCache, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::params::ParameterStore;
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// `Σ (pred - target)²` over every entry.
pub fn l2_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.hadamard(d, d)?;
    Ok(tape.sum(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply decay directly to the weights instead of adding it to the
    /// gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: false,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Tensor2::zeros(r, c)
                })
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (j, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = if c.decoupled { g } else { g + c.weight_decay * *w };
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut delta = mhat / (vhat.sqrt() + c.eps);
                if c.decoupled {
                    delta += c.weight_decay * *w;
                }
                *w -= c.learning_rate * delta;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Windows per gradient step.
    pub batch_size: usize,
    /// Validation interval in iterations.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            iterations: 3000,
            batch_size: 16,
            val_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.iterations == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("iterations, batch size and validation interval must be positive".into()));
        }
        if !(a.learning_rate > 0.0) || !(a.weight_decay >= 0.0) || !(a.eps > 0.0) {
            return Err(Error::Config("learning rate and eps must be positive, weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based iteration.
    pub iter: usize,
    /// Mean over the batch of the per-window ℓ2 loss, normalized units.
    pub loss: f64,
    /// One-step validation RMSE in data units, at checkpoints only.
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Iteration whose parameters were returned.
    pub best_iter: usize,
}

impl TrainLog {
    pub fn best_val_rmse(&self) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.iter == self.best_iter)
            .and_then(|r| r.val_rmse)
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.val_rmse.map(|v| (r.iter, v)))
    }

    /// CSV with header `iter,loss,val_rmse`; `val_rmse` is empty between
    /// checkpoints.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "loss", "val_rmse"])?;
        for r in &self.rows {
            let v = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.iter.to_string(), r.loss.to_string(), v])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// One-step RMSE of `model` over `ends`, de-normalized.
pub fn one_step_rmse(model: &Model, data: &Dataset, ends: &[usize]) -> Result<f64> {
    let mut cache = BatchCache::default();
    one_step_rmse_cached(model, data, ends, &mut cache)
}

const EVAL_CHUNK: usize = 64;

fn one_step_rmse_cached(model: &Model, data: &Dataset, ends: &[usize], cache: &mut BatchCache) -> Result<f64> {
    let mut pred = Vec::with_capacity(ends.len() * data.graph.num_nodes());
    let mut truth = Vec::with_capacity(pred.capacity());
    for chunk in ends.chunks(EVAL_CHUNK) {
        let batch = cache.get(model, &data.graph, chunk.len())?;
        let y = model.predict(batch, &data.stack_windows(chunk))?;
        pred.extend(y.data().iter().map(|&z| data.normalizer.invert(z)));
        for &end in chunk {
            truth.extend(data.raw.values().row(end + 1));
        }
    }
    metrics::rmse(&pred, &truth)
}

/// Trains a fresh model and returns the parameters of the checkpoint with
/// the lowest validation RMSE. Checkpoints are taken every `val_every`
/// iterations and after the last one.
pub fn train(model_cfg: ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if model_cfg.lookback != data.lookback() {
        return Err(Error::Config(format!(
            "model lookback {} differs from data lookback {}",
            model_cfg.lookback,
            data.lookback()
        )));
    }
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut rng = seed::rng(cfg.seed, seed::stream::BATCHES);
    let mut cache = BatchCache::default();
    let b = cfg.batch_size.min(data.train_ends.len());
    let mut order = data.train_ends.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    for iter in 1..=cfg.iterations {
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let ends = &order[cursor..cursor + b];
        cursor += b;
        let windows = data.stack_windows(ends);
        let targets = data.stack_targets(ends);
        let batch = cache.get(&model, &data.graph, b)?;
        let mut tape = Tape::new();
        let loss = {
            let bound = model.bind(&mut tape);
            let x = tape.constant(windows);
            let y = tape.constant(targets);
            let pred = bound.forward(&mut tape, batch, x)?;
            let total = l2_loss(&mut tape, pred, y)?;
            tape.scale(total, 1.0 / b as f64)
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                iteration: iter,
                msg: format!("training loss became {value}"),
            });
        }
        model.params_mut().zero_grads();
        tape.backward_into(loss, model.params_mut())?;
        adam.step(model.params_mut());
        let mut row = LogRow {
            iter,
            loss: value,
            val_rmse: None,
        };
        if iter % cfg.val_every == 0 || iter == cfg.iterations {
            let v = one_step_rmse_cached(&model, data, &data.val_ends, &mut cache)?;
            if !v.is_finite() {
                return Err(Error::Numeric {
                    iteration: iter,
                    msg: format!("validation RMSE became {v}"),
                });
            }
            row.val_rmse = Some(v);
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, iter, model.params().clone()));
            }
        }
        log.rows.push(row);
    }
    let (_, best_iter, params) = best.expect("the last iteration is always a checkpoint");
    log.best_iter = best_iter;
    let mut params = params;
    params.zero_grads();
    Ok((Model::from_params(model_cfg, params)?, log))
}
