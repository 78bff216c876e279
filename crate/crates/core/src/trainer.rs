//! Mini-batch Adam training of one projection head on one layer's features,
//! with per-epoch validation and best-epoch selection by validation LCC.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::feature_store::{self, DatasetManifest, Split, StoreError};
use crate::metrics::{EvalMetrics, ScorePair};
use crate::nn_head::{self, HeadConfig, HeadError, ParamSet, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("{utt_id}: features {got:?}, expected {expected:?}")]
    Shape {
        utt_id: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon < 0.0 {
            return bad("adam_epsilon must be >= 0");
        }
        Ok(())
    }
}

/// First/second moment accumulators for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState<F>,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let shapes = |p: &ParamSet<F>| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let expected = shapes(params);
    if shapes(grads) != expected || shapes(&state.m) != expected || shapes(&state.v) != expected {
        return Err(TrainError::Head(HeadError::Shape(
            "adam: params, grads and moments differ in shape".into(),
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64(config.adam_beta1);
    let b2 = F::from_f64(config.adam_beta2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 - config.adam_beta1.powi(t));
    let bc2 = F::from_f64(1.0 - config.adam_beta2.powi(t));
    let lr = F::from_f64(config.learning_rate);
    let eps = F::from_f64(config.adam_epsilon);

    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((theta, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One split's features for a single layer, loaded into memory, in
/// manifest order.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub split: Split,
    pub layer: u16,
    pub utt_ids: Vec<String>,
    pub features: Vec<Array2<f32>>,
    pub targets: Vec<f64>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn check_shape(&self, config: &HeadConfig) -> Result<(), TrainError> {
        let expected = (config.input_frames, config.input_dim);
        for (id, f) in self.utt_ids.iter().zip(&self.features) {
            if f.dim() != expected {
                return Err(TrainError::Shape {
                    utt_id: id.clone(),
                    got: f.dim(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Reads `layer` for every entry of `split`.
pub fn load_split(manifest: &DatasetManifest, split: Split, layer: u16) -> Result<LoadedSplit, TrainError> {
    let mut out = LoadedSplit {
        split,
        layer,
        utt_ids: Vec::new(),
        features: Vec::new(),
        targets: Vec::new(),
    };
    for entry in manifest.split(split) {
        let m = feature_store::read_feature_layer(&manifest.resolve(entry), layer)?;
        out.utt_ids.push(entry.utt_id.clone());
        out.features.push(m);
        out.targets.push(entry.mos);
    }
    if out.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_params: ParamSet<f32>,
    /// 1-based index into `history`.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Epoch (1-based) with the highest validation LCC, earliest on ties. When
/// no epoch has a defined LCC, the lowest validation MSE wins instead.
pub fn select_best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<(f64, &EpochRecord)> = None;
    for rec in history {
        if let Some(lcc) = rec.validation.lcc {
            if best.is_none_or(|(b, _)| lcc > b) {
                best = Some((lcc, rec));
            }
        }
    }
    if let Some((_, rec)) = best {
        return Some(rec.epoch);
    }
    let mut best: Option<&EpochRecord> = None;
    for rec in history {
        if best.is_none_or(|b| rec.validation.mse < b.validation.mse) {
            best = Some(rec);
        }
    }
    best.map(|r| r.epoch)
}

pub fn predict_split(params: &ParamSet<f32>, head: &HeadConfig, split: &LoadedSplit) -> Result<Vec<f64>, TrainError> {
    split.check_shape(head)?;
    split
        .features
        .iter()
        .map(|f| {
            nn_head::predict(f.view(), params, head)
                .map(|p| p as f64)
                .map_err(TrainError::from)
        })
        .collect()
}

/// Runs the head over `split` in manifest order and scores it.
pub fn evaluate(params: &ParamSet<f32>, head: &HeadConfig, split: &LoadedSplit) -> Result<EvalMetrics, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit(split.split));
    }
    let predictions = predict_split(params, head, split)?;
    let pair = ScorePair::new(&predictions, &split.targets).map_err(|e| {
        TrainError::Head(HeadError::Shape(format!("evaluation produced bad scores: {e}")))
    })?;
    Ok(EvalMetrics::compute(pair))
}

/// Trains a freshly initialized head. The run is a pure function of
/// `(train, val, head, config)`: init and shuffling both derive from
/// `config.seed`.
pub fn train_head(
    train: &LoadedSplit,
    val: &LoadedSplit,
    head: &HeadConfig,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    head.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Validation));
    }
    train.check_shape(head)?;
    val.check_shape(head)?;

    let mut params = nn_head::init_params::<f32>(head, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // separate stream from init so the two never share draws
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, ParamSet<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<_> = idx.iter().map(|&i| train.features[i].view()).collect();
            let targets: Vec<f32> = idx.iter().map(|&i| train.targets[i] as f32).collect();
            let cache = nn_head::head_forward_batch(&inputs, &params, head)?;
            let (loss, dloss) = nn_head::mse_loss(&cache.predictions(), &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch + 1,
                    loss: loss as f64,
                });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            grads.fill(0.0);
            nn_head::head_backward_batch(&cache, &params, head, &dloss, &mut grads)?;
            adam_step(&mut params, &grads, &mut adam, config)?;
        }
        let validation = evaluate(&params, head, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            validation,
        };
        history.push(record);
        if select_best_epoch(&history) == Some(epoch) {
            best = Some((epoch, params.clone()));
        }
    }
    let (best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        best_params,
        best_epoch,
        history,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,train_loss,val_mse,val_lcc,val_srcc`; undefined correlations are
/// left empty.
pub fn write_history(history: &[EpochRecord], destination: &Path) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(destination)?);
    writeln!(out, "epoch,train_loss,val_mse,val_lcc,val_srcc")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.validation.mse,
            opt(r.validation.lcc),
            opt(r.validation.srcc)
        )?;
    }
    out.flush()?;
    Ok(())
}
