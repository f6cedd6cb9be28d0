//! The experimental protocol: chronological split, few-sample subsampling
//! of training windows, and normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::model::GraphBatch;
use crate::series::{self, Normalizer, SignalSeries, Split};
use crate::tensor::Tensor2;

pub const DEFAULT_HORIZONS: [usize; 5] = [1, 3, 6, 9, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub lookback: usize,
    /// Evaluation horizons in steps; the largest fixes the test windows.
    pub horizons: Vec<usize>,
    /// Train, validation and test proportions.
    pub ratios: (usize, usize, usize),
    /// Fraction of training windows kept.
    pub subsample: f64,
    /// Keep one random run of consecutive windows rather than a scattered
    /// random subset.
    pub contiguous: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            lookback: 12,
            horizons: DEFAULT_HORIZONS.to_vec(),
            ratios: (6, 1, 1),
            subsample: 0.2,
            contiguous: false,
        }
    }
}

impl Protocol {
    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::Config("lookback must be at least 1".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a non-empty list of positive steps".into()));
        }
        Ok(())
    }
}

/// A graph and its series prepared for training and evaluation. Window
/// lists hold end indices `τ`; a window covers rows `τ-M+1 ..= τ`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: DirectedGraph,
    pub raw: SignalSeries,
    pub normalized: SignalSeries,
    pub normalizer: Normalizer,
    pub split: Split,
    pub protocol: Protocol,
    /// Subsampled one-step training windows.
    pub train_ends: Vec<usize>,
    /// One-step validation windows.
    pub val_ends: Vec<usize>,
    /// Test windows with room for the largest horizon.
    pub test_ends: Vec<usize>,
}

impl Dataset {
    /// Fits the normalizer on the rows seen by the kept training windows.
    pub fn prepare(graph: DirectedGraph, raw: SignalSeries, protocol: Protocol, seed_value: u64) -> Result<Self> {
        Self::build(graph, raw, protocol, seed_value, None)
    }

    /// Uses `normalizer` instead of fitting one, as when evaluating a model
    /// on data it was not trained on.
    pub fn prepare_with(
        graph: DirectedGraph,
        raw: SignalSeries,
        protocol: Protocol,
        seed_value: u64,
        normalizer: Normalizer,
    ) -> Result<Self> {
        Self::build(graph, raw, protocol, seed_value, Some(normalizer))
    }

    fn build(
        graph: DirectedGraph,
        raw: SignalSeries,
        protocol: Protocol,
        seed_value: u64,
        normalizer: Option<Normalizer>,
    ) -> Result<Self> {
        protocol.validate()?;
        if raw.num_nodes() != graph.num_nodes() {
            return Err(Error::Data(format!(
                "signals have {} columns, graph has {} nodes",
                raw.num_nodes(),
                graph.num_nodes()
            )));
        }
        let m = protocol.lookback;
        let hmax = protocol.max_horizon();
        raw.check_trainable(m, hmax)?;
        let split = series::split(raw.len(), protocol.ratios, m, hmax)?;
        let all_train = series::window_ends(&split.train, m, 1, false);
        let train_ends = series::subsample(&all_train, protocol.subsample, seed_value, protocol.contiguous)?;
        let val_ends = series::window_ends(&split.val, m, 1, true);
        let test_ends = series::window_ends(&split.test, m, hmax, true);
        if val_ends.is_empty() || test_ends.is_empty() {
            return Err(Error::Data("validation or test segment yields no windows".into()));
        }
        let normalizer = match normalizer {
            Some(n) => n,
            None => {
                let mut seen = vec![false; raw.len()];
                for &end in &train_ends {
                    seen[end + 1 - m..=end + 1].iter_mut().for_each(|s| *s = true);
                }
                let c = raw.num_nodes();
                let values: Vec<f64> = (0..raw.len())
                    .filter(|&t| seen[t])
                    .flat_map(|t| raw.values().data()[t * c..(t + 1) * c].iter().copied())
                    .collect();
                Normalizer::fit(&values)?
            }
        };
        let normalized = raw.map_values(|x| normalizer.apply(x));
        Ok(Self {
            graph,
            raw,
            normalized,
            normalizer,
            split,
            protocol,
            train_ends,
            val_ends,
            test_ends,
        })
    }

    pub fn lookback(&self) -> usize {
        self.protocol.lookback
    }

    /// Normalized windows of `ends`, stacked to `(len*N) x M`.
    pub fn stack_windows(&self, ends: &[usize]) -> Tensor2 {
        stack_windows(&self.normalized, ends, self.lookback())
    }

    /// Normalized next-step targets of `ends`, stacked to `(len*N) x 1`.
    pub fn stack_targets(&self, ends: &[usize]) -> Tensor2 {
        let n = self.normalized.num_nodes();
        let mut out = Tensor2::zeros(ends.len() * n, 1);
        for (b, &end) in ends.iter().enumerate() {
            for i in 0..n {
                out.set(b * n + i, 0, self.normalized.at(end + 1, i));
            }
        }
        out
    }
}

/// Windows of `series` ending at each of `ends`, stacked to `(len*N) x M`.
pub fn stack_windows(series: &SignalSeries, ends: &[usize], lookback: usize) -> Tensor2 {
    let n = series.num_nodes();
    let mut out = Tensor2::zeros(ends.len() * n, lookback);
    for (b, &end) in ends.iter().enumerate() {
        for t in 0..lookback {
            let row = end + 1 - lookback + t;
            for i in 0..n {
                out.set(b * n + i, t, series.at(row, i));
            }
        }
    }
    out
}

/// Graph batches keyed by copy count, built on first use.
#[derive(Debug, Default)]
pub(crate) struct BatchCache {
    batches: Vec<(usize, GraphBatch)>,
}

impl BatchCache {
    pub(crate) fn get(&mut self, model: &crate::model::Model, graph: &DirectedGraph, copies: usize) -> Result<&GraphBatch> {
        let pos = match self.batches.iter().position(|(c, _)| *c == copies) {
            Some(p) => p,
            None => {
                self.batches.push((copies, model.batch(graph, copies)?));
                self.batches.len() - 1
            }
        };
        Ok(&self.batches[pos].1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn toy(t: usize) -> (DirectedGraph, SignalSeries) {
        let g = DirectedGraph::from_distances(2, vec![Edge { tail: 0, head: 1 }], vec![1.0]).unwrap();
        let data = (0..t * 2).map(|x| (x as f64 * 0.37).sin()).collect();
        (g, SignalSeries::new(Tensor2::from_vec(t, 2, data).unwrap(), 5.0).unwrap())
    }

    #[test]
    fn default_protocol_on_a_week() {
        let (g, s) = toy(2016);
        let d = Dataset::prepare(g, s, Protocol::default(), 3).unwrap();
        assert_eq!(d.split.train, 0..1512);
        assert_eq!(d.train_ends.len(), 300);
        assert!(d.train_ends.windows(2).all(|w| w[1] > w[0]));
        assert!(d.train_ends.windows(2).any(|w| w[1] > w[0] + 1));
        assert_eq!(d.val_ends.len(), 252);
        assert_eq!(d.test_ends.len(), 241);
        assert!(d.test_ends.iter().all(|&e| e + 12 < 2016 && e >= 1763));

        let run = Protocol {
            contiguous: true,
            ..Protocol::default()
        };
        let (g, s) = toy(2016);
        let d = Dataset::prepare(g, s, run, 3).unwrap();
        assert_eq!(d.train_ends.len(), 300);
        assert!(d.train_ends.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn stacked_windows_are_row_blocks() {
        let (g, s) = toy(64);
        let p = Protocol {
            lookback: 3,
            horizons: vec![1, 2],
            subsample: 1.0,
            ..Protocol::default()
        };
        let d = Dataset::prepare(g, s, p, 0).unwrap();
        let w = d.stack_windows(&[5, 9]);
        assert_eq!(w.shape(), (4, 3));
        assert_eq!(w.row(3), d.normalized.window(9, 3).row(1));
        let y = d.stack_targets(&[5, 9]);
        assert_eq!(y.get(2, 0), d.normalized.at(10, 0));
    }

    #[test]
    fn column_mismatch_is_a_data_error() {
        let (_, s) = toy(64);
        let g3 = DirectedGraph::from_distances(3, vec![], vec![]).unwrap();
        assert!(matches!(
            Dataset::prepare(g3, s, Protocol::default(), 0),
            Err(Error::Data(_))
        ));
    }
}
