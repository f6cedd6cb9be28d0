//! Point-forecast error metrics. All inputs are in data units.

use crate::error::{Error, Result};

/// Entries with `|truth|` below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-6;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metric",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    if pred.is_empty() {
        return Err(Error::Contract("metric over no values".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// Percent; `None` when every entry was excluded.
    pub percent: Option<f64>,
    pub excluded: usize,
}

pub fn mape(pred: &[f64], truth: &[f64], eps: f64) -> Result<Mape> {
    check(pred, truth)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() < eps {
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    Ok(Mape {
        percent: (used > 0).then(|| 100.0 * sum / used as f64),
        excluded: pred.len() - used,
    })
}
