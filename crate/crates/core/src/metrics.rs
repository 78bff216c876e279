//! MSE, Pearson (LCC) and Spearman (SRCC) over prediction/target pairs.
//!
//! All accumulation is done in `f64` in a fixed left-to-right order, so the
//! same inputs always give bit-identical outputs. Correlations are
//! `Option<f64>`: `None` marks an undefined coefficient (zero variance on
//! either side) and callers choose the fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// Predictions and targets of equal length, all finite.
#[derive(Debug, Clone, Copy)]
pub struct ScorePair<'a> {
    predictions: &'a [f64],
    targets: &'a [f64],
}

impl<'a> ScorePair<'a> {
    pub fn new(predictions: &'a [f64], targets: &'a [f64]) -> Result<Self, MetricsError> {
        if predictions.len() != targets.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                targets: targets.len(),
            });
        }
        if predictions.is_empty() {
            return Err(MetricsError::TooFewSamples { required: 1, got: 0 });
        }
        if let Some(i) = predictions
            .iter()
            .zip(targets)
            .position(|(p, y)| !p.is_finite() || !y.is_finite())
        {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self {
            predictions,
            targets,
        })
    }

    pub fn predictions(&self) -> &'a [f64] {
        self.predictions
    }

    pub fn targets(&self) -> &'a [f64] {
        self.targets
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// The (MSE, LCC, SRCC) triple for one model on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl EvalMetrics {
    pub fn compute(pair: ScorePair<'_>) -> Self {
        let (lcc, srcc) = if pair.len() >= 2 {
            (pearson_unchecked(pair.predictions, pair.targets), spearman_unchecked(pair))
        } else {
            (None, None)
        };
        Self {
            mse: mse(pair),
            lcc,
            srcc,
        }
    }
}

pub fn mse(pair: ScorePair<'_>) -> f64 {
    let sum = pair
        .predictions
        .iter()
        .zip(pair.targets)
        .fold(0.0, |acc, (p, y)| acc + (p - y) * (p - y));
    sum / pair.len() as f64
}

pub fn pearson_lcc(pair: ScorePair<'_>) -> Result<Option<f64>, MetricsError> {
    require_two(pair)?;
    Ok(pearson_unchecked(pair.predictions, pair.targets))
}

pub fn spearman_srcc(pair: ScorePair<'_>) -> Result<Option<f64>, MetricsError> {
    require_two(pair)?;
    Ok(spearman_unchecked(pair))
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end, mean is their midpoint
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn require_two(pair: ScorePair<'_>) -> Result<(), MetricsError> {
    if pair.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            required: 2,
            got: pair.len(),
        });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x) / xs.len() as f64
}

fn pearson_unchecked(p: &[f64], y: &[f64]) -> Option<f64> {
    let (mp, my) = (mean(p), mean(y));
    let (mut cov, mut vp, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        let (da, db) = (a - mp, b - my);
        cov += da * db;
        vp += da * da;
        vy += db * db;
    }
    if vp == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vp * vy).sqrt())
}

fn spearman_unchecked(pair: ScorePair<'_>) -> Option<f64> {
    let rp = average_ranks(pair.predictions);
    let ry = average_ranks(pair.targets);
    pearson_unchecked(&rp, &ry)
}
