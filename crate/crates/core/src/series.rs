//! Node signal series, chronological splitting, lookback windows and
//! normalization.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::seed;
use crate::tensor::Tensor2;

pub const DEFAULT_INTERVAL_MINUTES: f64 = 5.0;

/// `T x N_v` readings, one row per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    values: Tensor2,
    interval_minutes: f64,
}

impl SignalSeries {
    pub fn new(values: Tensor2, interval_minutes: f64) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::Data("signal series contains non-finite values".into()));
        }
        if !(interval_minutes > 0.0) {
            return Err(Error::Config("interval must be positive".into()));
        }
        Ok(Self {
            values,
            interval_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    pub fn interval_minutes(&self) -> f64 {
        self.interval_minutes
    }

    #[inline]
    pub fn at(&self, t: usize, node: usize) -> f64 {
        self.values.get(t, node)
    }

    /// Rejects series too short to yield a single training sample.
    pub fn check_trainable(&self, lookback: usize, max_horizon: usize) -> Result<()> {
        if self.len() < lookback + max_horizon {
            return Err(Error::Data(format!(
                "series has {} steps; at least lookback {lookback} + horizon {max_horizon} are needed",
                self.len()
            )));
        }
        Ok(())
    }

    /// The `N_v x M` window ending at `end` (inclusive).
    pub fn window(&self, end: usize, lookback: usize) -> Tensor2 {
        let n = self.num_nodes();
        let start = end + 1 - lookback;
        let mut w = Tensor2::zeros(n, lookback);
        for (c, t) in (start..=end).enumerate() {
            for i in 0..n {
                w.set(i, c, self.at(t, i));
            }
        }
        w
    }

    /// The `N_v x L` slice of values at `end + 1 ..= end + horizon`.
    pub fn future(&self, end: usize, horizon: usize) -> Tensor2 {
        let n = self.num_nodes();
        let mut f = Tensor2::zeros(n, horizon);
        for h in 0..horizon {
            for i in 0..n {
                f.set(i, h, self.at(end + 1 + h, i));
            }
        }
        f
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.map(f),
            interval_minutes: self.interval_minutes,
        }
    }
}

/// Reads a signal CSV: a header of node ids, then one row per interval.
pub fn read_signals<R: Read>(reader: R, source_name: &str, num_nodes: usize) -> Result<SignalSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let width = rdr.headers()?.len();
    if rdr.headers()?.iter().all(str::is_empty) {
        return Err(Error::ingestion(source_name, 0, None, "empty file"));
    }
    if width != num_nodes {
        return Err(Error::ingestion(
            source_name,
            0,
            None,
            format!("header has {width} columns but the graph has {num_nodes} nodes"),
        ));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::ingestion(source_name, row, None, e.to_string()))?;
        if rec.len() != num_nodes {
            return Err(Error::ingestion(
                source_name,
                row,
                None,
                format!("expected {num_nodes} columns, found {}", rec.len()),
            ));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::ingestion(source_name, row, Some(c + 1), format!("`{cell}` is not a finite number"))
                })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::ingestion(source_name, 0, None, "no data rows"));
    }
    SignalSeries::new(Tensor2::from_vec(rows, num_nodes, data)?, DEFAULT_INTERVAL_MINUTES)
}

pub fn load_signals(path: &Path, graph: &DirectedGraph) -> Result<SignalSeries> {
    let file = std::fs::File::open(path)?;
    read_signals(file, &path.display().to_string(), graph.num_nodes())
}

/// Number of columns in a signal CSV header, used to size the graph.
pub fn signal_width(path: &Path) -> Result<usize> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let h = rdr.headers()?;
    if h.iter().all(str::is_empty) {
        return Err(Error::ingestion(path.display().to_string(), 0, None, "empty file"));
    }
    Ok(h.len())
}

pub fn write_signals<W: Write>(series: &SignalSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((0..series.num_nodes()).map(|i| format!("n{i}")))?;
    for t in 0..series.len() {
        w.write_record(series.values().row(t).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_signals(series: &SignalSeries, path: &Path) -> Result<()> {
    write_signals(series, std::fs::File::create(path)?)
}

/// Z-score scaling with one mean and standard deviation for all nodes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a normalizer on no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Data(format!(
                "training values have standard deviation {std}; cannot normalize"
            )));
        }
        Ok(Self { mean, std })
    }

    /// Fits on the rows `rows` of `series` only.
    pub fn fit_rows(series: &SignalSeries, rows: Range<usize>) -> Result<Self> {
        let c = series.num_nodes();
        Self::fit(&series.values().data()[rows.start * c..rows.end * c])
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Contiguous chronological train/validation/test ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `len` steps by `ratios` (train:val:test) in that order.
///
/// The training segment must hold a full lookback plus the largest horizon.
/// Validation and test samples may draw their lookback from the preceding
/// segment, so those segments only need to hold `max_horizon` targets.
pub fn split(len: usize, ratios: (usize, usize, usize), lookback: usize, max_horizon: usize) -> Result<Split> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 || ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let n_train = ratios.0 * len / total;
    let n_val = ratios.1 * len / total;
    let s = Split {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..len,
    };
    for (name, r) in [("validation", &s.val), ("test", &s.test)] {
        if r.len() < max_horizon.max(1) {
            return Err(Error::Data(format!(
                "{name} segment has {} steps, needs at least {max_horizon}",
                r.len()
            )));
        }
    }
    if s.train.len() < lookback + max_horizon {
        return Err(Error::Data(format!(
            "training segment has {} steps, needs lookback {lookback} + horizon {max_horizon}",
            s.train.len()
        )));
    }
    Ok(s)
}

/// Window end indices `τ` whose targets `τ+1 ..= τ+horizon` fall inside
/// `segment`. With `borrow_history`, the lookback may reach before the
/// segment start (never before step 0).
pub fn window_ends(segment: &Range<usize>, lookback: usize, horizon: usize, borrow_history: bool) -> Vec<usize> {
    assert!(lookback >= 1 && horizon >= 1);
    let lo = if borrow_history {
        (lookback - 1).max(segment.start.saturating_sub(1))
    } else {
        segment.start + lookback - 1
    };
    if segment.end < horizon + 1 {
        return Vec::new();
    }
    let hi = segment.end - horizon; // exclusive bound on τ + 1 ..
    (lo..hi).collect()
}

/// One model input sample: the lookback window and its future slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraphSignal {
    /// Index of the last step inside the window.
    pub end: usize,
    /// `N_v x M`.
    pub window: Tensor2,
    /// `N_v x horizon`, steps `end+1 ..= end+horizon`.
    pub target: Tensor2,
}

/// Every complete (window, future) pair in `series`.
pub fn make_windows(series: &SignalSeries, lookback: usize, horizon: usize) -> Result<Vec<TemporalGraphSignal>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be at least 1".into()));
    }
    Ok(window_ends(&(0..series.len()), lookback, horizon, false)
        .into_iter()
        .map(|end| TemporalGraphSignal {
            end,
            window: series.window(end, lookback),
            target: series.future(end, horizon),
        })
        .collect())
}

/// Seeded subset of window indices, returned in ascending order. With
/// `contiguous`, a random run of consecutive windows is taken instead.
pub fn subsample(ends: &[usize], fraction: f64, seed_value: u64, contiguous: bool) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} is not in (0, 1]")));
    }
    let n = ends.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    if k == 0 {
        return Err(Error::Data(format!(
            "subsampling {n} windows at {fraction} leaves nothing to train on"
        )));
    }
    if k == n {
        return Ok(ends.to_vec());
    }
    let mut rng = seed::rng(seed_value, seed::stream::SUBSAMPLE);
    if contiguous {
        let start = rng.random_range(0..=n - k);
        return Ok(ends[start..start + k].to_vec());
    }
    let mut picked: Vec<usize> = index::sample(&mut rng, n, k).into_iter().collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ends[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, n: usize) -> SignalSeries {
        let data = (0..t * n).map(|x| x as f64).collect();
        SignalSeries::new(Tensor2::from_vec(t, n, data).unwrap(), 5.0).unwrap()
    }

    #[test]
    fn seven_days_of_five_minute_rows() {
        let mut s = String::from("n0,n1\n");
        for t in 0..7 * 24 * 12 {
            s.push_str(&format!("{t},{}\n", t * 2));
        }
        let series = read_signals(s.as_bytes(), "s", 2).unwrap();
        assert_eq!(series.len(), 2016);
    }

    #[test]
    fn empty_signal_file_is_an_error() {
        assert!(read_signals("".as_bytes(), "s", 2).is_err());
        assert!(read_signals("n0,n1\n".as_bytes(), "s", 2).is_err());
    }

    #[test]
    fn bad_cells_report_row_and_column() {
        let err = read_signals("n0,n1\n1,2\n3,x\n".as_bytes(), "s", 2).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 2, col: Some(2), .. }), "{err}");
        let err = read_signals("n0,n1\n1,2\n3\n".as_bytes(), "s", 2).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 2, .. }), "{err}");
        let err = read_signals("n0,n1\n1,\n".as_bytes(), "s", 2).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 1, col: Some(2), .. }), "{err}");
        assert!(read_signals("n0,n1,n2\n1,2,3\n".as_bytes(), "s", 2).is_err());
    }

    #[test]
    fn non_positive_readings_are_kept() {
        let s = read_signals("n0\n0\n-1\n".as_bytes(), "s", 1).unwrap();
        assert_eq!(s.values().data(), &[0.0, -1.0]);
    }

    #[test]
    fn short_series_is_not_trainable() {
        let s = ramp(10, 2);
        assert!(s.check_trainable(12, 1).is_err());
        assert!(ramp(13, 2).check_trainable(12, 1).is_ok());
    }

    #[test]
    fn six_one_one_split_of_a_week() {
        let s = split(2016, (6, 1, 1), 12, 12).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1512, 252, 252));
    }

    #[test]
    fn tiny_split() {
        let s = split(8, (6, 1, 1), 1, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 1));
    }

    #[test]
    fn short_validation_segment_is_an_error() {
        let err = split(16, (6, 1, 1), 12, 12).unwrap_err();
        assert!(err.to_string().contains("validation"), "{err}");
    }

    #[test]
    fn split_is_a_contiguous_cover() {
        for len in [40, 41, 97, 2016] {
            let s = split(len, (6, 1, 1), 3, 2).unwrap();
            assert_eq!(s.train.start, 0);
            assert_eq!(s.train.end, s.val.start);
            assert_eq!(s.val.end, s.test.start);
            assert_eq!(s.test.end, len);
        }
    }

    #[test]
    fn window_counting_and_content() {
        let s = ramp(14, 3);
        let w = make_windows(&s, 12, 1).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w.last().unwrap().end + 1, 13);
        // last sample's target is the final row
        assert_eq!(w[1].target.get(2, 0), s.at(13, 2));
        for sample in &w {
            for i in 0..3 {
                for c in 0..12 {
                    assert_eq!(sample.window.get(i, c), s.at(sample.end - 11 + c, i));
                }
            }
        }
    }

    #[test]
    fn borrowed_history_reaches_back_but_targets_stay_inside() {
        let ends = window_ends(&(10..15), 4, 2, true);
        assert_eq!(ends, vec![9, 10, 11, 12]);
        assert!(window_ends(&(10..15), 4, 2, false).is_empty());
        assert_eq!(window_ends(&(10..20), 4, 2, false), vec![13, 14, 15, 16, 17]);
    }

    #[test]
    fn train_windows_of_a_week_subsample_to_three_hundred() {
        let ends = window_ends(&(0..1512), 12, 1, false);
        assert_eq!(ends.len(), 1500);
        let picked = subsample(&ends, 0.2, 3, false).unwrap();
        assert_eq!(picked.len(), 300);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(picked, subsample(&ends, 0.2, 3, false).unwrap());
        assert_ne!(picked, subsample(&ends, 0.2, 4, false).unwrap());
    }

    #[test]
    fn full_fraction_is_identity_and_empty_result_errors() {
        let ends: Vec<usize> = (5..20).collect();
        assert_eq!(subsample(&ends, 1.0, 1, false).unwrap(), ends);
        assert!(subsample(&ends[..2], 0.1, 1, false).is_err());
        assert!(subsample(&ends, 0.0, 1, false).is_err());
        assert!(subsample(&ends, 1.5, 1, false).is_err());
    }

    #[test]
    fn contiguous_subsample_is_a_run() {
        let ends: Vec<usize> = (0..100).collect();
        let p = subsample(&ends, 0.2, 9, true).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn normalizer_round_trip_and_train_only_fit() {
        let s = ramp(40, 2);
        let norm = Normalizer::fit_rows(&s, 0..30).unwrap();
        let train: Vec<f64> = s.values().data()[..60].to_vec();
        let mean = train.iter().sum::<f64>() / 60.0;
        assert_eq!(norm.mean, mean);
        for &x in s.values().data() {
            let back = norm.invert(norm.apply(x));
            assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert!(Normalizer::fit(&[3.0, 3.0]).is_err());
    }

    #[test]
    fn signals_round_trip_through_csv() {
        let s = SignalSeries::new(Tensor2::from_rows(&[[0.1, 2.0 / 3.0], [1e-300, -7.25]]), 5.0).unwrap();
        let mut buf = Vec::new();
        write_signals(&s, &mut buf).unwrap();
        let back = read_signals(buf.as_slice(), "s", 2).unwrap();
        assert_eq!(back, s);
    }
}
