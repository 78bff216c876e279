use crate::nn_head::HeadConfig;
use crate::trainer::TrainConfig;

use super::SweepError;

/// `[1, 1 + stride, 1 + 2 * stride, ...]` up to `total_layers`.
pub fn plan_layers(total_layers: u16, stride: u16) -> Vec<u16> {
    if total_layers == 0 || stride == 0 {
        return Vec::new();
    }
    (1..=total_layers).step_by(stride as usize).collect()
}

/// Parses a layer list: `1..12` (inclusive), `1..47:2` (with stride), or a
/// comma list such as `3,5,7`. Ranges and single indices may be mixed with
/// commas; the result must be strictly increasing.
pub fn parse_layer_spec(spec: &str) -> Result<Vec<u16>, SweepError> {
    let bad = |why: String| SweepError::LayerSpec(format!("{spec:?}: {why}"));
    let mut layers = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((range, rest)) = part.split_once("..") {
            let (end, stride) = match rest.split_once(':') {
                Some((end, stride)) => (end, stride),
                None => (rest, "1"),
            };
            let start: u16 = range.trim().parse().map_err(|_| bad(format!("bad start in {part:?}")))?;
            let end: u16 = end.trim().parse().map_err(|_| bad(format!("bad end in {part:?}")))?;
            let stride: u16 = stride.trim().parse().map_err(|_| bad(format!("bad stride in {part:?}")))?;
            if stride == 0 || end < start {
                return Err(bad(format!("empty range {part:?}")));
            }
            layers.extend((start..=end).step_by(stride as usize));
        } else {
            layers.push(part.parse().map_err(|_| bad(format!("bad layer {part:?}")))?);
        }
    }
    if layers.is_empty() {
        return Err(bad("no layers".into()));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("layers must be strictly increasing".into()));
    }
    Ok(layers)
}

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, SweepError> {
    let seeds = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| SweepError::Plan(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(SweepError::Plan("no seeds".into()));
    }
    Ok(seeds)
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub model_id: String,
    pub layer_indices: Vec<u16>,
    pub seeds: Vec<u64>,
    pub head_config: HeadConfig,
    /// The seed field is replaced per run.
    pub train_config: TrainConfig,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.layer_indices.is_empty() {
            return Err(SweepError::Plan("no layers to sweep".into()));
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SweepError::Plan("layer indices must be strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::Plan("no seeds".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(SweepError::Plan("seeds must be distinct".into()));
        }
        self.head_config.validate()?;
        self.train_config.validate()?;
        Ok(())
    }

    /// `(layer, seed)` pairs in canonical lexicographic order.
    pub fn jobs(&self) -> Vec<(u16, u64)> {
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        self.layer_indices
            .iter()
            .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
            .collect()
    }
}
