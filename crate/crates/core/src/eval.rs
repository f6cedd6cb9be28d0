//! Multi-horizon evaluation, the persistence baseline, repeated experiments
//! and the cross-graph transfer harness.
//!
//! Errors at each horizon are pooled jointly over nodes and test windows.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::dataset::{stack_windows, Dataset, Protocol};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::metrics::{self, MAPE_EPS};
use crate::model::{Model, ModelConfig};
use crate::series::{Normalizer, SignalSeries};
use crate::tensor::Tensor2;
use crate::train::{self, TrainConfig, TrainLog};

/// Anything that maps lookback windows to multi-step forecasts.
pub trait Forecaster {
    /// Forecasts for the windows ending at `ends`, stacked per window:
    /// `(ends.len()*N) x horizon`, data units.
    fn forecast(&self, graph: &DirectedGraph, series: &SignalSeries, ends: &[usize], horizon: usize) -> Result<Tensor2>;
}

/// Predicts the last observed value at every horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast(&self, _graph: &DirectedGraph, series: &SignalSeries, ends: &[usize], horizon: usize) -> Result<Tensor2> {
        let n = series.num_nodes();
        let mut out = Tensor2::zeros(ends.len() * n, horizon);
        for (b, &end) in ends.iter().enumerate() {
            for i in 0..n {
                out.row_mut(b * n + i).fill(series.at(end, i));
            }
        }
        Ok(out)
    }
}

/// A model together with the scaling it was trained under.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub normalizer: Normalizer,
}

const ROLLOUT_CHUNK: usize = 64;

impl Forecaster for Trained {
    fn forecast(&self, graph: &DirectedGraph, series: &SignalSeries, ends: &[usize], horizon: usize) -> Result<Tensor2> {
        let m = self.model.config().lookback;
        if let Some(&bad) = ends.iter().find(|&&e| e + 1 < m) {
            return Err(Error::Contract(format!("window ending at {bad} is shorter than the lookback")));
        }
        let n = series.num_nodes();
        let mut out = Tensor2::zeros(ends.len() * n, horizon);
        let mut cached: Option<(usize, crate::model::GraphBatch)> = None;
        for (c, chunk) in ends.chunks(ROLLOUT_CHUNK).enumerate() {
            if cached.as_ref().is_none_or(|(k, _)| *k != chunk.len()) {
                cached = Some((chunk.len(), self.model.batch(graph, chunk.len())?));
            }
            let batch = &cached.as_ref().expect("just set").1;
            let w = stack_windows(series, chunk, m).map(|x| self.normalizer.apply(x));
            let y = self.model.rollout(batch, &w, horizon)?;
            let base = c * ROLLOUT_CHUNK * n;
            for r in 0..y.rows() {
                for (dst, &z) in out.row_mut(base + r).iter_mut().zip(y.row(r)) {
                    *dst = self.normalizer.invert(z);
                }
            }
        }
        Ok(out)
    }
}

/// Errors of one run at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonScore {
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every truth value was below the MAPE guard.
    pub mape: Option<f64>,
    /// Pooled (node, window) pairs.
    pub n: usize,
    /// Pairs left out of MAPE.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<HorizonScore>,
}

impl Evaluation {
    pub fn at(&self, horizon: usize) -> Option<&HorizonScore> {
        self.scores.iter().find(|s| s.horizon == horizon)
    }
}

/// Scores `f` on the windows ending at `ends` for each of `horizons`.
pub fn evaluate(
    f: &dyn Forecaster,
    graph: &DirectedGraph,
    series: &SignalSeries,
    ends: &[usize],
    horizons: &[usize],
) -> Result<Evaluation> {
    let hmax = horizons.iter().copied().max().ok_or_else(|| Error::Config("no horizons".into()))?;
    if horizons.contains(&0) {
        return Err(Error::Config("horizons must be positive".into()));
    }
    if let Some(&bad) = ends.iter().find(|&&e| e + hmax >= series.len()) {
        return Err(Error::Contract(format!("window ending at {bad} has no target at horizon {hmax}")));
    }
    let n = series.num_nodes();
    let pred = f.forecast(graph, series, ends, hmax)?;
    if pred.shape() != (ends.len() * n, hmax) {
        return Err(Error::Shape {
            op: "forecast",
            left: pred.shape(),
            right: (ends.len() * n, hmax),
        });
    }
    let mut scores = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut p = Vec::with_capacity(ends.len() * n);
        let mut t = Vec::with_capacity(ends.len() * n);
        for (b, &end) in ends.iter().enumerate() {
            for i in 0..n {
                p.push(pred.get(b * n + i, h - 1));
                t.push(series.at(end + h, i));
            }
        }
        let mape = metrics::mape(&p, &t, MAPE_EPS)?;
        scores.push(HorizonScore {
            horizon: h,
            rmse: metrics::rmse(&p, &t)?,
            mae: metrics::mae(&p, &t)?,
            mape: mape.percent,
            n: p.len(),
            excluded: mape.excluded,
        });
    }
    Ok(Evaluation { scores })
}

/// Scores `f` on the test windows of `data`.
pub fn evaluate_test(f: &dyn Forecaster, data: &Dataset) -> Result<Evaluation> {
    evaluate(f, &data.graph, &data.raw, &data.test_ends, &data.protocol.horizons)
}

/// Zero-shot evaluation of `source` on another graph's test windows. The
/// parameters are used as they are; the target only has to agree on the
/// window length and the edge attribute width.
pub fn transfer_evaluate(source: &Trained, graph: DirectedGraph, series: SignalSeries, protocol: Protocol) -> Result<Evaluation> {
    let cfg = source.model.config();
    if cfg.lookback != protocol.lookback {
        return Err(Error::Config(format!(
            "checkpoint lookback {} differs from requested lookback {}",
            cfg.lookback, protocol.lookback
        )));
    }
    if cfg.attr_dim != graph.attr_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {} edge attributes, target graph has {}",
            cfg.attr_dim,
            graph.attr_dim()
        )));
    }
    // Test windows do not depend on the subsample seed.
    let data = Dataset::prepare_with(graph, series, protocol, 0, source.normalizer)?;
    evaluate_test(source, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Rmse,
    Mae,
    Mape,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rmse, Metric::Mae, Metric::Mape];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
            Metric::Mape => "mape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub horizon: usize,
    pub metric: Metric,
    /// Mean over runs; `None` when the metric is undefined in any run.
    pub mean: Option<f64>,
    /// Sample standard deviation over runs; 0 for a single run.
    pub std: Option<f64>,
    /// Pooled pairs per run.
    pub n: usize,
    /// MAPE exclusions per run, summed over runs.
    pub excluded: usize,
}

/// Mean and spread across repeated runs, per horizon and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub runs: usize,
    /// Unit label of the data, e.g. `mph` or `veh/h`.
    pub units: String,
}

/// Sample mean and standard deviation (n-1). The mean is accumulated as an
/// offset from the first value, so identical inputs give that value and a
/// spread of exactly zero.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let x0 = xs[0];
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median of `xs`; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

impl EvalReport {
    pub fn from_runs(runs: &[Evaluation], units: impl Into<String>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Contract("report over no runs".into()))?;
        let mut rows = Vec::new();
        for s in &first.scores {
            let per: Vec<&HorizonScore> = runs
                .iter()
                .map(|r| r.at(s.horizon).ok_or_else(|| Error::Contract("runs disagree on horizons".into())))
                .collect::<Result<_>>()?;
            for metric in Metric::ALL {
                let vals: Option<Vec<f64>> = per
                    .iter()
                    .map(|h| match metric {
                        Metric::Rmse => Some(h.rmse),
                        Metric::Mae => Some(h.mae),
                        Metric::Mape => h.mape,
                    })
                    .collect();
                let ms = vals.map(|v| mean_std(&v));
                rows.push(ReportRow {
                    horizon: s.horizon,
                    metric,
                    mean: ms.map(|m| m.0),
                    std: ms.map(|m| m.1),
                    n: s.n,
                    excluded: if metric == Metric::Mape {
                        per.iter().map(|h| h.excluded).sum()
                    } else {
                        0
                    },
                });
            }
        }
        Ok(Self {
            rows,
            runs: runs.len(),
            units: units.into(),
        })
    }

    pub fn get(&self, horizon: usize, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.horizon == horizon && r.metric == metric)
    }

    /// CSV with header `horizon,metric,mean,std,n,excluded`. Undefined
    /// values are written as `undefined`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["horizon", "metric", "mean", "std", "n", "excluded"])?;
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.horizon.to_string(),
                r.metric.as_str().to_string(),
                show(r.mean),
                show(r.std),
                r.n.to_string(),
                r.excluded.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "errors pooled over nodes and test windows; {} run(s); units {}",
            self.runs, self.units
        )?;
        writeln!(f, "{:>8}  {:>20}  {:>20}  {:>20}", "horizon", "RMSE", "MAPE (%)", "MAE")?;
        let mut horizons: Vec<usize> = self.rows.iter().map(|r| r.horizon).collect();
        horizons.dedup();
        for h in horizons {
            let cell = |m: Metric| match self.get(h, m) {
                Some(ReportRow {
                    mean: Some(mu),
                    std: Some(sd),
                    ..
                }) => format!("{mu:.4} ± {sd:.4}"),
                _ => "undefined".to_string(),
            };
            writeln!(
                f,
                "{h:>8}  {:>20}  {:>20}  {:>20}",
                cell(Metric::Rmse),
                cell(Metric::Mape),
                cell(Metric::Mae)
            )?;
        }
        Ok(())
    }
}

/// One seeded train-and-test run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub trained: Trained,
    pub log: TrainLog,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<RunOutcome>,
    pub report: EvalReport,
}

/// Trains and tests `repeats` times with seeds `seed, seed+1, ...`, or with
/// `seed` every time when `fixed_seed` is set. Each seed drives both the
/// window subsample and the model initialization and batching. Runs execute
/// concurrently on up to `available_parallelism` threads.
pub fn repeat_experiment(
    graph: &DirectedGraph,
    series: &SignalSeries,
    protocol: &Protocol,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    repeats: usize,
    fixed_seed: bool,
    units: &str,
) -> Result<Experiment> {
    if repeats < 2 {
        return Err(Error::Config(format!("repeats must be at least 2, got {repeats}")));
    }
    let seeds: Vec<u64> = (0..repeats)
        .map(|k| if fixed_seed { train_cfg.seed } else { train_cfg.seed.wrapping_add(k as u64) })
        .collect();
    let run = |seed: u64| -> Result<RunOutcome> {
        let data = Dataset::prepare(graph.clone(), series.clone(), protocol.clone(), seed)?;
        let cfg = TrainConfig { seed, ..*train_cfg };
        let (model, log) = train::train(model_cfg, &cfg, &data)?;
        let trained = Trained {
            model,
            normalizer: data.normalizer,
        };
        let evaluation = evaluate_test(&trained, &data)?;
        Ok(RunOutcome {
            seed,
            trained,
            log,
            evaluation,
        })
    };
    // Runs are independent; results keep seed order whatever the thread count.
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut runs = Vec::with_capacity(repeats);
    for wave in seeds.chunks(threads) {
        if wave.len() == 1 {
            runs.push(run(wave[0])?);
            continue;
        }
        let results: Vec<Result<RunOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|&seed| s.spawn(move || run(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    let evals: Vec<Evaluation> = runs.iter().map(|r| r.evaluation.clone()).collect();
    let report = EvalReport::from_runs(&evals, units)?;
    Ok(Experiment { runs, report })
}
