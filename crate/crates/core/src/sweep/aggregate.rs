use serde::{Deserialize, Serialize};

use crate::feature_store::Split;

use super::run::LayerResult;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `None` for an empty sample. Sums run left to right.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().fold(0.0, |a, v| a + v) / n;
        let var = values.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Per-metric statistics over the seeds that produced a defined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mse: Option<Stat>,
    pub lcc: Option<Stat>,
    pub srcc: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub layer: u16,
    pub completed: usize,
    pub failed: usize,
    pub validation: MetricSummary,
    pub test: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub seeds: Vec<u64>,
    pub layers: Vec<LayerAggregate>,
    pub best_layer: Option<u16>,
    /// Layers with no successful seed; never best-layer candidates.
    pub excluded_layers: Vec<u16>,
}

impl SweepAggregate {
    pub fn layer(&self, layer: u16) -> Option<&LayerAggregate> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

fn summarize<'a>(results: impl Iterator<Item = &'a LayerResult> + Clone, split: Split) -> MetricSummary {
    let collect = |f: fn(&crate::metrics::EvalMetrics) -> Option<f64>| {
        let values: Vec<f64> = results.clone().filter_map(|r| r.metrics(split).and_then(f)).collect();
        Stat::of(&values)
    };
    MetricSummary {
        mse: collect(|m| Some(m.mse)),
        lcc: collect(|m| m.lcc),
        srcc: collect(|m| m.srcc),
    }
}

/// Per-layer mean and population std over `seeds`, then best-layer
/// selection. Results for seeds outside `seeds` are ignored.
pub fn aggregate(results: &[LayerResult], seeds: &[u64]) -> SweepAggregate {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let mut sorted: Vec<&LayerResult> = results.iter().filter(|r| seeds.contains(&r.seed)).collect();
    sorted.sort_by_key(|r| (r.layer, r.seed));
    let mut layer_ids: Vec<u16> = sorted.iter().map(|r| r.layer).collect();
    layer_ids.dedup();

    let mut layers = Vec::with_capacity(layer_ids.len());
    let mut excluded = Vec::new();
    for layer in layer_ids {
        let runs: Vec<&LayerResult> = sorted.iter().copied().filter(|r| r.layer == layer).collect();
        let completed = runs.iter().filter(|r| r.is_completed()).count();
        if completed == 0 {
            excluded.push(layer);
        }
        layers.push(LayerAggregate {
            layer,
            completed,
            failed: runs.len() - completed,
            validation: summarize(runs.iter().copied(), Split::Validation),
            test: summarize(runs.iter().copied(), Split::Test),
        });
    }
    let mut agg = SweepAggregate {
        model_id: None,
        seeds,
        layers,
        best_layer: None,
        excluded_layers: excluded,
    };
    agg.best_layer = select_best_layer(&agg);
    agg
}

/// Argmax of mean validation LCC, smallest layer on ties. Falls back to the
/// lowest mean validation MSE when no layer has a defined LCC.
pub fn select_best_layer(agg: &SweepAggregate) -> Option<u16> {
    let candidates = agg.layers.iter().filter(|l| l.completed > 0);
    let mut best: Option<(f64, u16)> = None;
    for l in candidates.clone() {
        if let Some(s) = l.validation.lcc {
            // layers are visited in ascending order, so strict > keeps the smallest
            if best.is_none_or(|(b, _)| s.mean > b) {
                best = Some((s.mean, l.layer));
            }
        }
    }
    if best.is_some() {
        return best.map(|(_, l)| l);
    }
    let mut best: Option<(f64, u16)> = None;
    for l in candidates {
        if let Some(s) = l.validation.mse {
            if best.is_none_or(|(b, _)| s.mean < b) {
                best = Some((s.mean, l.layer));
            }
        }
    }
    best.map(|(_, l)| l)
}
