use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::feature_store::{self, validate_store, DatasetManifest, Split};
use crate::metrics::EvalMetrics;
use crate::nn_head;
use crate::trainer::{self, TrainConfig};

use super::plan::SweepPlan;
use super::report::write_results_csv;
use super::SweepError;

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed {
        validation: EvalMetrics,
        test: EvalMetrics,
        best_epoch: usize,
    },
    Failed {
        reason: String,
    },
}

/// One `(layer, seed)` slot of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub layer: u16,
    pub seed: u64,
    pub outcome: RunOutcome,
}

impl LayerResult {
    pub fn metrics(&self, split: Split) -> Option<&EvalMetrics> {
        match (&self.outcome, split) {
            (RunOutcome::Completed { validation, .. }, Split::Validation) => Some(validation),
            (RunOutcome::Completed { test, .. }, Split::Test) => Some(test),
            _ => None,
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self.outcome, RunOutcome::Completed { .. })
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon pick.
    pub jobs: usize,
    /// Root for per-run artifacts (`<model_id>/L<layer>/seed<k>/`); nothing
    /// is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub write_checkpoints: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            out_dir: None,
            write_checkpoints: true,
        }
    }
}

pub fn run_dir(root: &Path, model_id: &str, layer: u16, seed: u64) -> PathBuf {
    root.join(model_id).join(format!("L{layer}")).join(format!("seed{seed}"))
}

/// Trains one head per `(layer, seed)` and scores its best checkpoint on
/// the validation and test splits. Store problems abort before training;
/// a failing run is recorded in its slot and the sweep continues. Results
/// come back in `(layer, seed)` order whatever the worker count.
pub fn run_sweep(
    manifest: &DatasetManifest,
    plan: &SweepPlan,
    options: &RunOptions,
) -> Result<Vec<LayerResult>, SweepError> {
    plan.validate()?;
    let report = validate_store(manifest, &plan.layer_indices);
    if !report.is_empty() {
        return Err(SweepError::Store(report));
    }
    for split in Split::ALL {
        if manifest.count(split) == 0 {
            return Err(SweepError::Plan(format!("{split} split is empty")));
        }
    }
    let first = manifest.entries().first().expect("non-empty splits");
    let header = feature_store::read_header(&manifest.resolve(first))?;
    let (t, d) = header.shape();
    if (t, d) != (plan.head_config.input_frames, plan.head_config.input_dim) {
        return Err(SweepError::Plan(format!(
            "store geometry T={t} D={d} does not match head input ({}, {})",
            plan.head_config.input_frames, plan.head_config.input_dim
        )));
    }

    let jobs = plan.jobs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| SweepError::Plan(format!("thread pool: {e}")))?;
    let results: Vec<LayerResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(layer, seed)| {
                let outcome = match run_one(manifest, plan, options, layer, seed) {
                    Ok(o) => o,
                    Err(e) => RunOutcome::Failed {
                        reason: e.to_string(),
                    },
                };
                LayerResult { layer, seed, outcome }
            })
            .collect()
    });

    if let Some(root) = &options.out_dir {
        for r in &results {
            let dir = run_dir(root, &plan.model_id, r.layer, r.seed);
            std::fs::create_dir_all(&dir).map_err(|e| SweepError::io(&dir, e))?;
            write_results_csv(std::slice::from_ref(r), &dir.join("result.csv"))?;
        }
    }
    Ok(results)
}

fn run_one(
    manifest: &DatasetManifest,
    plan: &SweepPlan,
    options: &RunOptions,
    layer: u16,
    seed: u64,
) -> Result<RunOutcome, SweepError> {
    let train = trainer::load_split(manifest, Split::Train, layer)?;
    let val = trainer::load_split(manifest, Split::Validation, layer)?;
    let test = trainer::load_split(manifest, Split::Test, layer)?;
    let config = TrainConfig {
        seed,
        ..plan.train_config.clone()
    };
    let result = trainer::train_head(&train, &val, &plan.head_config, &config)?;
    let validation = result.history[result.best_epoch - 1].validation;
    let test_metrics = trainer::evaluate(&result.best_params, &plan.head_config, &test)?;

    if let Some(root) = &options.out_dir {
        let dir = run_dir(root, &plan.model_id, layer, seed);
        std::fs::create_dir_all(&dir).map_err(|e| SweepError::io(&dir, e))?;
        trainer::write_history(&result.history, &dir.join("history.csv"))?;
        if options.write_checkpoints {
            nn_head::save_checkpoint(&result.best_params, &plan.head_config, &dir.join("head.sslf"))?;
        }
    }
    Ok(RunOutcome::Completed {
        validation,
        test: test_metrics,
        best_epoch: result.best_epoch,
    })
}
